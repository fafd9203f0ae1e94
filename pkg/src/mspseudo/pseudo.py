"""Jackknife pseudo values and estimator selection.

The pseudo value of subject ``i`` for an estimate ``y`` computed on ``n``
subjects is ``n * y - (n - 1) * y_{-i}``, with ``y_{-i}`` the same estimate
after dropping subject ``i``.

Which consistent estimator feeds the jackknife depends on the task:

* state occupation (``sop``): Aalen-Johansen;
* dynamic state occupation (``dynamic-sop``): landmark AJ when a global test
  rejects the Markov assumption, otherwise AJ;
* transition probabilities (``tp``): per transition, landmark AJ when the
  transition-specific test rejects and the landmark population has at least
  ``epsilon`` subjects, otherwise AJ.

For the two landmark tasks only subjects whose state at ``s`` is observed are
in scope, and a subject's pseudo values come from its own landmark group
(``n`` is the group size).
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import MultiStateDataset
from .errors import NoInteriorTransitions, ScopeEmpty
from .estimators import (
    TimeGrid,
    aj_row,
    aj_state_occupation,
    default_grid,
    initial_distribution,
    leave_one_out_product,
)
from .io import fmt
from .markov_tests import ca_global_test, logrank_transition_test

log = logging.getLogger(__name__)

TASKS = ("sop", "dynamic-sop", "tp")


def _target_label(target) -> str:
    if isinstance(target, tuple):
        return f"{target[0]}->{target[1]}"
    return str(target)


def _parse_target(text: str):
    if "->" in text:
        a, b = text.split("->")
        return (int(a), int(b))
    return int(text)


@dataclass
class PseudoValueTable:
    """Pseudo values for ``subject_ids x targets x grid``.

    ``values[i, t, m]`` is NaN where ``membership[i, t]`` is False (a TP
    target whose from-state the subject did not occupy at ``s``).  Values
    may fall outside ``[0, 1]``.
    """

    task: str
    grid: TimeGrid
    targets: tuple
    subject_ids: tuple
    values: np.ndarray
    estimator_used: tuple
    conditioning_time: float = 0.0
    membership: np.ndarray | None = None
    landmark_states: np.ndarray | None = None
    decisions: list = field(default_factory=list)

    def __post_init__(self):
        n, T = len(self.subject_ids), len(self.targets)
        if self.values.shape != (n, T, self.grid.M):
            raise ValueError(f"values shape {self.values.shape} != {(n, T, self.grid.M)}")
        if self.membership is None:
            self.membership = np.ones((n, T), dtype=bool)
        if self.landmark_states is None:
            self.landmark_states = np.zeros(n, dtype=np.int64)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def target_labels(self) -> list:
        return [_target_label(t) for t in self.targets]

    def flat(self) -> tuple:
        """``(n, T*M)`` targets and the matching boolean mask."""
        n, T, M = self.values.shape
        mask = np.repeat(self.membership[:, :, None], M, axis=2).reshape(n, T * M)
        return np.nan_to_num(self.values.reshape(n, T * M)), mask

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "target", "time", "value", "estimator"])
        labels = self.target_labels
        for i, sid in enumerate(self.subject_ids):
            for t, label in enumerate(labels):
                if not self.membership[i, t]:
                    continue
                for m, tau in enumerate(self.grid.points):
                    w.writerow([sid, label, fmt(tau), fmt(self.values[i, t, m]), self.estimator_used[t]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, task: str = "sop", conditioning_time: float = 0.0) -> "PseudoValueTable":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["id", "target", "time", "value", "estimator"]:
            raise ValueError("unexpected pseudo-value header")
        rows = rows[1:]

        def key(v):
            try:
                return int(v)
            except ValueError:
                return v

        ids, targets, times, est = [], [], set(), {}
        for sid, target, time, _, e in rows:
            sid, target = key(sid), _parse_target(target)
            if sid not in ids:
                ids.append(sid)
            if target not in targets:
                targets.append(target)
            times.add(float(time))
            est[target] = e
        grid = TimeGrid(tuple(sorted(times)))
        id_pos = {s: i for i, s in enumerate(ids)}
        t_pos = {t: i for i, t in enumerate(targets)}
        m_pos = {t: i for i, t in enumerate(grid.points)}
        values = np.full((len(ids), len(targets), grid.M), np.nan)
        for sid, target, time, value, _ in rows:
            values[id_pos[key(sid)], t_pos[_parse_target(target)], m_pos[float(time)]] = float(value)
        membership = ~np.isnan(values).all(axis=2)
        return cls(
            task,
            grid,
            tuple(targets),
            tuple(ids),
            values,
            tuple(est[t] for t in targets),
            conditioning_time,
            membership,
        )


def jackknife(
    dataset: MultiStateDataset,
    estimator,
    targets,
    grid,
    scope=None,
    n: int | None = None,
    task: str = "sop",
    estimator_name: str = "custom",
    conditioning_time: float = 0.0,
) -> PseudoValueTable:
    """Pseudo values by explicit leave-one-out recomputation.

    Parameters
    ----------
    dataset : MultiStateDataset
    estimator : callable
        ``estimator(dataset) -> array (len(targets), M)``; must be
        deterministic and defined on every leave-one-out cohort.
    targets : sequence
    grid : TimeGrid
    scope : array of int, optional
        Positions of the subjects to compute pseudo values for (default:
        all).
    n : int, optional
        Sample size used in the jackknife formula (default: the number of
        subjects in ``dataset``).
    """
    grid = grid if isinstance(grid, TimeGrid) else TimeGrid(tuple(grid))
    scope = np.arange(dataset.n_subjects) if scope is None else np.asarray(scope, dtype=np.int64)
    if scope.size == 0:
        raise ScopeEmpty("no subjects in jackknife scope")
    n = dataset.n_subjects if n is None else int(n)
    theta = np.asarray(estimator(dataset), dtype=float)
    values = np.empty((scope.size,) + theta.shape)
    for r, i in enumerate(scope):
        if n == 1:
            values[r] = theta
        else:
            values[r] = n * theta - (n - 1) * np.asarray(estimator(dataset.drop(int(i))), dtype=float)
    return PseudoValueTable(
        task,
        grid,
        tuple(targets),
        tuple(dataset.subject_ids[i] for i in scope),
        values,
        (estimator_name,) * len(targets),
        conditioning_time,
    )


def _combine(n, theta, theta_loo):
    if n == 1:
        return np.broadcast_to(theta, theta_loo.shape).copy()
    return n * theta[None] - (n - 1) * theta_loo


def sop_pseudo_values(dataset: MultiStateDataset, grid, method: str = "fast") -> np.ndarray:
    """``(n, K, M)`` jackknife pseudo values of the AJ state occupation."""
    grid = grid if isinstance(grid, TimeGrid) else TimeGrid(tuple(grid))
    n, K = dataset.n_subjects, dataset.graph.K
    if n == 0:
        raise ScopeEmpty("empty dataset")
    if method == "naive":
        theta = aj_state_occupation(dataset, grid).probabilities
        loo = np.stack(
            [aj_state_occupation(dataset.drop(i), grid).probabilities for i in range(n)]
        ) if n > 1 else np.zeros((1,) + theta.shape)
    else:
        start = initial_distribution(dataset)
        counts = np.bincount(dataset.initial_states, minlength=K + 1)[1:].astype(float)
        loo_start = np.tile(counts, (n, 1))
        loo_start[np.arange(n), dataset.initial_states - 1] -= 1.0
        loo_start /= max(n - 1, 1)
        theta, loo = leave_one_out_product(dataset, -np.inf, grid.array, start, loo_start, np.arange(n))
    return _combine(n, theta, loo).transpose(0, 2, 1)


def landmark_pseudo_values(
    dataset: MultiStateDataset,
    j: int,
    s: float,
    grid,
    estimator: str = "LMAJ",
    method: str = "fast",
    members=None,
) -> tuple:
    """Pseudo values of ``P(X(t) = k | X(s) = j)`` for the subjects in
    ``j`` at ``s``.

    ``estimator="LMAJ"`` jackknifes the AJ row computed on the landmark
    group; ``"AJ"`` jackknifes row ``j`` of the full-cohort AJ ``P(s, t)``.
    Either way ``n`` is the group size.

    Returns
    -------
    members : ndarray of int
        Positions (into ``dataset``) of the group.
    values : ndarray, shape (n_j, K, M)
    """
    grid = grid if isinstance(grid, TimeGrid) else TimeGrid(tuple(grid))
    K = dataset.graph.K
    if members is None:
        members = np.nonzero(dataset.states_at(s) == j)[0]
    members = np.asarray(members, dtype=np.int64)
    n_j = members.size
    if n_j == 0:
        raise ScopeEmpty(f"no subject in state {j} at {s}")
    e_j = np.zeros(K)
    e_j[j - 1] = 1.0
    if estimator == "LMAJ":
        population = dataset.subset(members)
        scope = np.arange(n_j)
    elif estimator == "AJ":
        population = dataset
        scope = members
    else:
        raise ValueError(f"unknown estimator {estimator!r}")

    if method == "naive":
        theta = aj_row(population, j, s, grid).probabilities
        loo = np.stack([aj_row(population.drop(int(i)), j, s, grid).probabilities for i in scope])
    else:
        theta, loo = leave_one_out_product(population, s, grid.array, e_j, np.tile(e_j, (n_j, 1)), scope)
    return members, _combine(n_j, theta, loo).transpose(0, 2, 1)


def _markov_rejected_globally(dataset, test_choice, alpha, seed, n_permutations):
    """Global decision for the dynamic-SOP branch."""
    if test_choice == "logrank":
        ps = [
            logrank_transition_test(dataset, pair, alpha=alpha, seed=seed, n_permutations=n_permutations).p_value
            for pair in dataset.graph.transitions
        ]
        p = min(1.0, min(ps) * len(ps))
        return p, {"test": "logrank-bonferroni", "p_value": p}
    try:
        res = ca_global_test(dataset, alpha)
    except NoInteriorTransitions:
        log.warning("CA test undefined (no interior transitions); using AJ")
        return None, {"test": "CA", "p_value": None, "note": "NoInteriorTransitions"}
    return res.p_value, {"test": "CA", "p_value": res.p_value, "statistic": res.statistic, "dof": res.dof}


def _transition_p_value(dataset, pair, test_choice, alpha, seed, n_permutations, ca_cache):
    if test_choice == "ca":
        if "per" not in ca_cache:
            try:
                ca_cache["per"] = ca_global_test(dataset, alpha).details["per_transition"]
            except NoInteriorTransitions:
                ca_cache["per"] = {}
        stat = ca_cache["per"].get(pair)
        if stat is None:
            return 1.0, {"test": "CA", "p_value": 1.0, "note": "transition not tested"}
        from scipy import stats

        p = float(stats.chi2.sf(stat, 1))
        return p, {"test": "CA", "p_value": p, "statistic": stat}
    res = logrank_transition_test(dataset, pair, alpha=alpha, seed=seed, n_permutations=n_permutations)
    return res.p_value, {
        "test": "logrank",
        "p_value": res.p_value,
        "statistic": res.statistic,
        "degenerate": res.degenerate,
    }


def derive_pseudo_values(
    dataset: MultiStateDataset,
    task: str,
    grid=None,
    s: float | None = None,
    epsilon: int = 1,
    test_choice: str | None = None,
    alpha: float = 0.05,
    method: str = "fast",
    seed: int = 0,
    n_permutations: int = 500,
) -> PseudoValueTable:
    """Pseudo values for ``task`` from an estimator chosen by testing the
    Markov assumption.

    Parameters
    ----------
    dataset : MultiStateDataset
        Training data (never include held-out subjects).
    task : {"sop", "dynamic-sop", "tp"}
    grid : TimeGrid, optional
        Defaults to 30 quantiles of the observed transition times (after
        ``s`` for the landmark tasks).
    s : float
        Landmark time; required for ``dynamic-sop`` and ``tp``.
    epsilon : int
        Minimum landmark population for using LMAJ on a transition.
    test_choice : {"ca", "logrank"}, optional
        Defaults to ``"ca"`` for ``dynamic-sop`` and ``"logrank"`` for
        ``tp``.
    method : {"fast", "naive"}
        Incremental leave-one-out sweep or explicit recomputation.

    Returns
    -------
    PseudoValueTable
        ``decisions`` holds the test results and the estimator chosen per
        target.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    if epsilon < 1:
        raise ValueError("epsilon must be >= 1")
    graph = dataset.graph
    K = graph.K

    if task == "sop":
        if grid is None:
            grid = default_grid(dataset)
        grid = grid if isinstance(grid, TimeGrid) else TimeGrid(tuple(grid))
        values = sop_pseudo_values(dataset, grid, method)
        decisions = [{"target": "all", "estimator": "AJ", "reason": "AJ and LMAJ target the same SOP"}]
        return PseudoValueTable(
            "sop", grid, tuple(graph.states), dataset.subject_ids, values, ("AJ",) * K, 0.0, decisions=decisions
        )

    if s is None:
        raise ValueError(f"task {task!r} needs a landmark time s")
    s = float(s)
    if grid is None:
        grid = default_grid(dataset, after=s)
    grid = grid if isinstance(grid, TimeGrid) else TimeGrid(tuple(grid))
    states_s = dataset.states_at(s)
    test_choice = test_choice or ("ca" if task == "dynamic-sop" else "logrank")

    if task == "dynamic-sop":
        scope = np.nonzero(states_s > 0)[0]
        if scope.size == 0:
            raise ScopeEmpty(f"no subject has an observed state at s={s}")
        p, info = _markov_rejected_globally(dataset, test_choice, alpha, seed, n_permutations)
        chosen = "LMAJ" if p is not None and p < alpha else "AJ"
        decisions = [dict(info, target="all", significant=bool(p is not None and p < alpha), estimator=chosen)]
        log.info("dynamic SOP: %s p=%s -> %s", info["test"], p, chosen)
        values = np.empty((scope.size, K, grid.M))
        pos = {int(i): r for r, i in enumerate(scope)}
        for j in graph.states:
            members = np.nonzero(states_s == j)[0]
            if members.size == 0:
                continue
            _, vals = landmark_pseudo_values(dataset, j, s, grid, chosen, method, members)
            values[[pos[int(i)] for i in members]] = vals
            decisions.append({"target": f"X(s)={j}", "landmark_population": int(members.size), "estimator": chosen})
        return PseudoValueTable(
            task,
            grid,
            tuple(graph.states),
            tuple(dataset.subject_ids[i] for i in scope),
            values,
            (chosen,) * K,
            s,
            landmark_states=states_s[scope],
            decisions=decisions,
        )

    # transition probabilities
    has_out = np.array([False] + [bool(graph.outgoing(k)) for k in graph.states])
    scope = np.nonzero((states_s > 0) & has_out[states_s])[0]
    if scope.size == 0:
        raise ScopeEmpty(f"no subject occupies a transient state at s={s}")
    pos = {int(i): r for r, i in enumerate(scope)}
    Q = graph.Q
    values = np.full((scope.size, Q, grid.M), np.nan)
    membership = np.zeros((scope.size, Q), dtype=bool)
    used, decisions, cache, ca_cache = [], [], {}, {}
    for q, (j, k) in enumerate(graph.transitions):
        members = np.nonzero(states_s == j)[0]
        p, info = _transition_p_value(dataset, (j, k), test_choice, alpha, seed, n_permutations, ca_cache)
        significant = p < alpha
        chosen = "AJ"
        note = None
        if significant and members.size >= epsilon:
            chosen = "LMAJ"
        elif significant:
            note = f"landmark population {members.size} < epsilon={epsilon}"
            log.warning("transition %d->%d: %s; using AJ", j, k, note)
        used.append(chosen)
        decisions.append(
            dict(
                info,
                target=f"{j}->{k}",
                significant=bool(significant),
                landmark_population=int(members.size),
                estimator=chosen,
                note=note,
            )
        )
        if members.size == 0:
            continue
        if (j, chosen) not in cache:
            cache[(j, chosen)] = landmark_pseudo_values(dataset, j, s, grid, chosen, method, members)[1]
        rows = [pos[int(i)] for i in members]
        values[rows, q] = cache[(j, chosen)][:, k - 1]
        membership[rows, q] = True
    return PseudoValueTable(
        task,
        grid,
        tuple(graph.transitions),
        tuple(dataset.subject_ids[i] for i in scope),
        values,
        tuple(used),
        s,
        membership,
        landmark_states=states_s[scope],
        decisions=decisions,
    )
