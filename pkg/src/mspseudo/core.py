"""Multi-state event-history data: transition graphs, long-format records,
risk sets and counting processes.

Conventions used throughout the package:

* states are labelled ``1..K``; in integer arrays ``0`` means *unknown*;
* a transition recorded with ``t_stop = u`` takes effect at ``u`` (paths are
  right-continuous with left limits);
* a subject censored at ``u`` is still at risk for events at ``u``;
* a subject at risk in state ``j`` at time ``u`` is one with a record from
  ``j`` such that ``t_start < u <= t_stop``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GraphError, UnknownSubject, ValidationError

TRANSITIONED = 1
CENSORED = 0
UNKNOWN = 0


@dataclass(frozen=True)
class TransitionGraph:
    """Finite state space with the allowed instantaneous transitions.

    Parameters
    ----------
    num_states : int
        Number of states ``K``; states are ``1..K``.
    transitions : sequence of (int, int)
        Allowed ``(from_state, to_state)`` pairs, in a fixed order that
        defines the transition index ``0..Q-1``.
    absorbing : sequence, optional
        Either ``K`` booleans or a list of absorbing state labels.  Defaults
        to the states without outgoing transitions.
    """

    num_states: int
    transitions: tuple
    absorbing: tuple = None

    def __post_init__(self):
        K = int(self.num_states)
        object.__setattr__(self, "num_states", K)
        if K < 2:
            raise GraphError(f"need at least 2 states, got {K}")
        pairs = tuple((int(a), int(b)) for a, b in self.transitions)
        object.__setattr__(self, "transitions", pairs)
        if not pairs:
            raise GraphError("graph has no transitions")
        if len(set(pairs)) != len(pairs):
            raise GraphError("duplicate transitions in graph")
        for a, b in pairs:
            if not (1 <= a <= K and 1 <= b <= K):
                raise GraphError(f"transition {a}->{b} outside states 1..{K}")
            if a == b:
                raise GraphError(f"self-transition {a}->{b} not allowed")

        outgoing = {a for a, _ in pairs}
        if self.absorbing is None:
            flags = tuple(k not in outgoing for k in range(1, K + 1))
        else:
            given = list(self.absorbing)
            if len(given) == K and all(isinstance(v, (bool, np.bool_)) for v in given):
                flags = tuple(bool(v) for v in given)
            else:
                labels = {int(v) for v in given}
                if any(not 1 <= v <= K for v in labels):
                    raise GraphError("absorbing label outside state range")
                flags = tuple(k in labels for k in range(1, K + 1))
        for k in range(1, K + 1):
            if flags[k - 1] and k in outgoing:
                raise GraphError(f"state {k} is flagged absorbing but has outgoing transitions")
        object.__setattr__(self, "absorbing", flags)

    @property
    def K(self) -> int:
        return self.num_states

    @property
    def Q(self) -> int:
        return len(self.transitions)

    @property
    def states(self) -> range:
        return range(1, self.num_states + 1)

    @cached_property
    def transition_index(self) -> dict:
        return {pair: q for q, pair in enumerate(self.transitions)}

    def is_absorbing(self, state: int) -> bool:
        return self.absorbing[state - 1]

    def outgoing(self, state: int) -> list:
        return [pair for pair in self.transitions if pair[0] == state]

    @cached_property
    def allowed(self) -> np.ndarray:
        """``(K+1, K+1)`` boolean lookup; row/column 0 unused."""
        table = np.zeros((self.num_states + 1, self.num_states + 1), dtype=bool)
        for a, b in self.transitions:
            table[a, b] = True
        return table

    @cached_property
    def absorbing_mask(self) -> np.ndarray:
        """``(K+1,)`` boolean lookup indexed by state label."""
        return np.array((False,) + self.absorbing)

    def to_dict(self) -> dict:
        return {
            "num_states": self.num_states,
            "transitions": [list(p) for p in self.transitions],
            "absorbing": [k for k in self.states if self.is_absorbing(k)],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "TransitionGraph":
        try:
            return cls(
                num_states=data["num_states"],
                transitions=[tuple(p) for p in data["transitions"]],
                absorbing=data.get("absorbing"),
            )
        except KeyError as exc:
            raise GraphError(f"graph definition missing field {exc.args[0]!r}") from None

    def label(self, pair) -> str:
        return f"{pair[0]}->{pair[1]}"


def infer_graph(from_state, to_state, status) -> TransitionGraph:
    """Smallest graph containing every observed transition."""
    from_state = np.asarray(from_state)
    to_state = np.asarray(to_state)
    status = np.asarray(status)
    ev = status == TRANSITIONED
    pairs = sorted({(int(a), int(b)) for a, b in zip(from_state[ev], to_state[ev])})
    K = int(max(from_state.max(initial=1), to_state.max(initial=1), 2))
    return TransitionGraph(K, pairs)


@dataclass(frozen=True)
class TransitionRecord:
    subject_id: object
    from_state: int
    to_state: int
    t_start: float
    t_stop: float
    status: int


@dataclass(frozen=True)
class Issue:
    code: str
    subject_id: object
    record: int | None
    message: str

    def __str__(self):
        where = f"subject {self.subject_id!r}"
        if self.record is not None:
            where += f", record {self.record}"
        return f"{self.code} ({where}): {self.message}"


@dataclass(frozen=True)
class RiskSetSnapshot:
    """Risk set and event counts just before/at one event time.

    ``at_risk[j-1]`` is ``Y_j(u)``; ``event_counts[q]`` is ``dN`` for
    ``graph.transitions[q]``.
    """

    time: float
    at_risk: tuple
    event_counts: tuple


@dataclass(frozen=True)
class CountingProcess:
    """Array form of the event timeline.

    ``times`` has shape ``(E,)``, ``at_risk`` ``(E, K)`` and ``events``
    ``(E, K, K)`` with ``events[e, j-1, k-1] = dN_jk(times[e])``.
    """

    times: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class MultiStateDataset:
    """Cohort in long format plus a covariate matrix.

    Records are kept as parallel arrays sorted by subject then start time;
    ``subject`` holds positions into ``subject_ids``.  Instances are treated
    as immutable.
    """

    def __init__(
        self,
        graph: TransitionGraph,
        subject_ids: Sequence,
        subject,
        from_state,
        to_state,
        t_start,
        t_stop,
        status,
        covariates=None,
        horizon: float | None = None,
        covariate_names: Sequence[str] | None = None,
    ):
        self.graph = graph
        self.subject_ids = tuple(subject_ids)
        n = len(self.subject_ids)
        subject = np.asarray(subject, dtype=np.int64)
        arrays = [
            np.asarray(from_state, dtype=np.int64),
            np.asarray(to_state, dtype=np.int64),
            np.asarray(t_start, dtype=np.float64),
            np.asarray(t_stop, dtype=np.float64),
            np.asarray(status, dtype=np.int64),
        ]
        if any(a.shape != subject.shape for a in arrays):
            raise ValueError("record arrays must have equal length")
        if subject.size and (subject.min() < 0 or subject.max() >= n):
            raise ValueError("record subject index out of range")
        order = np.lexsort((arrays[3], arrays[2], subject))
        self.subject = _readonly(subject[order])
        self.from_state, self.to_state, self.t_start, self.t_stop, self.status = (
            _readonly(a[order]) for a in arrays
        )
        if covariates is None:
            covariates = np.zeros((n, 0))
        covariates = np.asarray(covariates, dtype=np.float64)
        if covariates.ndim == 1:
            covariates = covariates.reshape(n, -1)
        if covariates.shape[0] != n:
            raise ValueError(f"covariates have {covariates.shape[0]} rows for {n} subjects")
        self.covariates = _readonly(covariates)
        if covariate_names is None:
            covariate_names = [f"x{i + 1}" for i in range(covariates.shape[1])]
        self.covariate_names = tuple(covariate_names)
        if horizon is None:
            horizon = float(self.t_stop.max()) if self.t_stop.size else 0.0
        self.horizon = float(horizon)

    # construction helpers -------------------------------------------------

    @classmethod
    def from_records(
        cls,
        graph: TransitionGraph,
        records: Iterable[TransitionRecord],
        covariates: Mapping | None = None,
        horizon: float | None = None,
        covariate_names=None,
    ) -> "MultiStateDataset":
        """Build from record objects.  ``covariates`` maps subject id to a
        vector; subjects without an entry get a NaN row (flagged by
        :func:`validate_dataset`)."""
        records = list(records)
        ids, index = [], {}
        for r in records:
            if r.subject_id not in index:
                index[r.subject_id] = len(ids)
                ids.append(r.subject_id)
        p = 0
        if covariates:
            p = len(np.atleast_1d(next(iter(covariates.values()))))
        X = np.full((len(ids), p), np.nan)
        if covariates:
            for sid, i in index.items():
                if sid in covariates:
                    X[i] = covariates[sid]
        return cls(
            graph,
            ids,
            [index[r.subject_id] for r in records],
            [r.from_state for r in records],
            [r.to_state for r in records],
            [r.t_start for r in records],
            [r.t_stop for r in records],
            [r.status for r in records],
            covariates=X,
            horizon=horizon,
            covariate_names=covariate_names,
        )

    def replace(self, **changes) -> "MultiStateDataset":
        fields = dict(
            graph=self.graph,
            subject_ids=self.subject_ids,
            subject=self.subject,
            from_state=self.from_state,
            to_state=self.to_state,
            t_start=self.t_start,
            t_stop=self.t_stop,
            status=self.status,
            covariates=self.covariates,
            horizon=self.horizon,
            covariate_names=self.covariate_names,
        )
        fields.update(changes)
        return MultiStateDataset(**fields)

    def subset(self, subjects) -> "MultiStateDataset":
        """Dataset restricted to the given subject positions (or a boolean
        mask over subjects), preserving subject order."""
        keep = np.zeros(self.n_subjects, dtype=bool)
        keep[np.asarray(subjects)] = True
        new_pos = np.cumsum(keep) - 1
        rec = keep[self.subject]
        return MultiStateDataset(
            self.graph,
            [sid for sid, k in zip(self.subject_ids, keep) if k],
            new_pos[self.subject[rec]],
            self.from_state[rec],
            self.to_state[rec],
            self.t_start[rec],
            self.t_stop[rec],
            self.status[rec],
            covariates=self.covariates[keep],
            horizon=self.horizon,
            covariate_names=self.covariate_names,
        )

    def drop(self, subject: int) -> "MultiStateDataset":
        keep = np.ones(self.n_subjects, dtype=bool)
        keep[subject] = False
        return self.subset(keep)

    # basic accessors ------------------------------------------------------

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    def __len__(self) -> int:
        return self.n_subjects

    @property
    def n_records(self) -> int:
        return int(self.subject.size)

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @cached_property
    def records(self) -> tuple:
        ids = self.subject_ids
        return tuple(
            TransitionRecord(ids[s], int(a), int(b), float(t0), float(t1), int(st))
            for s, a, b, t0, t1, st in zip(
                self.subject, self.from_state, self.to_state, self.t_start, self.t_stop, self.status
            )
        )

    @cached_property
    def _id_index(self) -> dict:
        return {sid: i for i, sid in enumerate(self.subject_ids)}

    def index_of(self, subject_id) -> int:
        try:
            return self._id_index[subject_id]
        except KeyError:
            raise UnknownSubject(subject_id) from None

    @cached_property
    def _bounds(self) -> tuple:
        """First and one-past-last record position per subject."""
        n = self.n_subjects
        first = np.searchsorted(self.subject, np.arange(n), side="left")
        end = np.searchsorted(self.subject, np.arange(n), side="right")
        return first, end

    def subject_records(self, i: int) -> slice:
        first, end = self._bounds
        return slice(int(first[i]), int(end[i]))

    @cached_property
    def has_records(self) -> np.ndarray:
        first, end = self._bounds
        return end > first

    @cached_property
    def initial_states(self) -> np.ndarray:
        first, end = self._bounds
        out = np.zeros(self.n_subjects, dtype=np.int64)
        ok = end > first
        out[ok] = self.from_state[first[ok]]
        return out

    @cached_property
    def last_times(self) -> np.ndarray:
        first, end = self._bounds
        out = np.zeros(self.n_subjects)
        ok = end > first
        out[ok] = self.t_stop[end[ok] - 1]
        return out

    @cached_property
    def final_states(self) -> np.ndarray:
        """Last observed state (the censored state or the state entered)."""
        first, end = self._bounds
        out = np.zeros(self.n_subjects, dtype=np.int64)
        ok = end > first
        last = end[ok] - 1
        out[ok] = np.where(self.status[last] == TRANSITIONED, self.to_state[last], self.from_state[last])
        return out

    @cached_property
    def censored(self) -> np.ndarray:
        """True where the subject's last record is censored."""
        first, end = self._bounds
        out = np.zeros(self.n_subjects, dtype=bool)
        ok = end > first
        out[ok] = self.status[end[ok] - 1] == CENSORED
        return out

    @cached_property
    def absorbed(self) -> np.ndarray:
        fs = self.final_states
        return ~self.censored & self.graph.absorbing_mask[fs] & self.has_records

    def censoring_rate(self) -> float:
        return float(self.censored.mean()) if self.n_subjects else 0.0

    # state queries --------------------------------------------------------

    def states_at(self, t: float) -> np.ndarray:
        """State of every subject at ``t`` (``0`` where unknown)."""
        out = np.zeros(self.n_subjects, dtype=np.int64)
        cover = (self.t_start <= t) & (t < self.t_stop)
        out[self.subject[cover]] = self.from_state[cover]
        first, end = self._bounds
        ok = end > first
        subj = np.nonzero(ok)[0]
        last = end[ok] - 1
        last_stop = self.t_stop[last]
        trans = self.status[last] == TRANSITIONED
        at_end = last_stop == t
        out[subj[at_end & trans]] = self.to_state[last[at_end & trans]]
        out[subj[at_end & ~trans]] = self.from_state[last[at_end & ~trans]]
        past = last_stop < t
        absorb = trans & self.graph.absorbing_mask[self.to_state[last]]
        out[subj[past & absorb]] = self.to_state[last[past & absorb]]
        return out

    def entry_times_at(self, t: float) -> np.ndarray:
        """Entry time into the state occupied at ``t`` (NaN where unknown)."""
        out = np.full(self.n_subjects, np.nan)
        cover = (self.t_start <= t) & (t < self.t_stop)
        out[self.subject[cover]] = self.t_start[cover]
        first, end = self._bounds
        ok = end > first
        subj = np.nonzero(ok)[0]
        last = end[ok] - 1
        last_stop = self.t_stop[last]
        trans = self.status[last] == TRANSITIONED
        at_end = last_stop == t
        out[subj[at_end & ~trans]] = self.t_start[last[at_end & ~trans]]
        absorb = trans & self.graph.absorbing_mask[self.to_state[last]]
        entered = (at_end & trans) | ((last_stop < t) & absorb)
        out[subj[entered]] = last_stop[entered]
        return out

    def time_in_state(self) -> np.ndarray:
        """``(n, K)`` observed person-time per subject and state."""
        out = np.zeros((self.n_subjects, self.graph.K))
        np.add.at(out, (self.subject, self.from_state - 1), self.t_stop - self.t_start)
        return out

    def __repr__(self):
        return (
            f"MultiStateDataset(n={self.n_subjects}, records={self.n_records}, "
            f"K={self.graph.K}, p={self.n_covariates}, horizon={self.horizon:g})"
        )


def validate_dataset(raw: MultiStateDataset) -> MultiStateDataset:
    """Check every record and path invariant.

    Returns the dataset unchanged when valid; otherwise raises
    :class:`ValidationError` whose ``issues`` list every violation with the
    subject id and the record's position within that subject's history.
    """
    graph = raw.graph
    K = graph.K
    ids = raw.subject_ids
    issues = []
    first, end = raw._bounds

    for i in range(raw.n_subjects):
        sid = ids[i]
        lo, hi = int(first[i]), int(end[i])
        if hi == lo:
            issues.append(Issue("MissingRecords", sid, None, "subject has no records"))
        if raw.n_covariates and not np.all(np.isfinite(raw.covariates[i])):
            issues.append(Issue("MissingCovariates", sid, None, "covariate row missing or non-finite"))
        prev = None
        for r in range(lo, hi):
            pos = r - lo
            a, b = int(raw.from_state[r]), int(raw.to_state[r])
            t0, t1 = float(raw.t_start[r]), float(raw.t_stop[r])
            st = int(raw.status[r])
            if st not in (TRANSITIONED, CENSORED):
                issues.append(Issue("InvalidStatus", sid, pos, f"status {st} not in {{0, 1}}"))
            if not (1 <= a <= K):
                issues.append(Issue("IllegalTransition", sid, pos, f"from_state {a} outside 1..{K}"))
            elif graph.is_absorbing(a):
                issues.append(Issue("IllegalTransition", sid, pos, f"record leaves absorbing state {a}"))
            if st == TRANSITIONED:
                if not (1 <= b <= K) or not (1 <= a <= K) or not graph.allowed[a, b]:
                    issues.append(Issue("IllegalTransition", sid, pos, f"transition {a}->{b} not in graph"))
            if not (np.isfinite(t0) and np.isfinite(t1)) or t0 < 0 or t1 <= t0:
                issues.append(Issue("InvalidTime", sid, pos, f"bad interval [{t0}, {t1}]"))
            elif t1 > raw.horizon:
                issues.append(Issue("InvalidTime", sid, pos, f"t_stop {t1} beyond horizon {raw.horizon}"))
            if prev is not None:
                pa, pb, pt1, pst = prev
                if pst == CENSORED:
                    issues.append(Issue("CensoredNotLast", sid, pos - 1, "censored record followed by more records"))
                elif a != pb:
                    issues.append(
                        Issue("NonChainingPath", sid, pos, f"from_state {a} != previous to_state {pb}")
                    )
                if t0 < pt1:
                    issues.append(
                        Issue("OverlappingIntervals", sid, pos, f"starts at {t0} before previous stop {pt1}")
                    )
                elif t0 > pt1:
                    issues.append(Issue("NonChainingPath", sid, pos, f"gap between {pt1} and {t0}"))
            prev = (a, b, t1, st)

    if issues:
        raise ValidationError(issues)
    return raw


def state_at(dataset: MultiStateDataset, subject_id, t: float):
    """State occupied by ``subject_id`` at ``t``, or ``None`` if unknown."""
    i = dataset.index_of(subject_id)
    sl = dataset.subject_records(i)
    t0, t1 = dataset.t_start[sl], dataset.t_stop[sl]
    cover = np.nonzero((t0 <= t) & (t < t1))[0]
    if cover.size:
        return int(dataset.from_state[sl][cover[0]])
    if t1.size == 0 or t < t0[0]:
        return None
    last = sl.stop - 1
    transitioned = dataset.status[last] == TRANSITIONED
    if t == dataset.t_stop[last]:
        return int(dataset.to_state[last] if transitioned else dataset.from_state[last])
    if transitioned and dataset.graph.is_absorbing(int(dataset.to_state[last])):
        return int(dataset.to_state[last])
    return None


def counting_process(
    dataset: MultiStateDataset,
    after: float | None = None,
    until: float | None = None,
) -> CountingProcess:
    """Risk sets ``Y_j(u)`` and event counts ``dN_jk(u)`` at every distinct
    transition time ``u`` with ``after < u <= until``."""
    K = dataset.graph.K
    ev = dataset.status == TRANSITIONED
    ev_times = dataset.t_stop[ev]
    keep = np.ones(ev_times.shape, dtype=bool)
    if after is not None:
        keep &= ev_times > after
    if until is not None:
        keep &= ev_times <= until
    times = np.unique(ev_times[keep])
    E = times.size
    at_risk = np.zeros((E, K), dtype=np.int64)
    for j in range(1, K + 1):
        from_j = dataset.from_state == j
        if not from_j.any():
            continue
        starts = np.sort(dataset.t_start[from_j])
        stops = np.sort(dataset.t_stop[from_j])
        at_risk[:, j - 1] = np.searchsorted(starts, times, side="left") - np.searchsorted(
            stops, times, side="left"
        )
    events = np.zeros((E, K, K), dtype=np.int64)
    if E:
        f = dataset.from_state[ev][keep]
        t = dataset.to_state[ev][keep]
        idx = np.searchsorted(times, ev_times[keep])
        np.add.at(events, (idx, f - 1, t - 1), 1)
    return CountingProcess(times, at_risk, events)


def event_timeline(dataset: MultiStateDataset) -> list:
    """One :class:`RiskSetSnapshot` per distinct transition time, ascending."""
    cp = counting_process(dataset)
    pairs = dataset.graph.transitions
    out = []
    for e, u in enumerate(cp.times):
        counts = tuple(int(cp.events[e, a - 1, b - 1]) for a, b in pairs)
        out.append(RiskSetSnapshot(float(u), tuple(int(y) for y in cp.at_risk[e]), counts))
    return out
