"""Aalen-Johansen and landmark Aalen-Johansen estimators.

The Aalen-Johansen (AJ) estimator of the transition probability matrix is
the product integral

    P(s, t) = prod_{s < u <= t} (I + dA(u)),

where ``dA_jk(u) = dN_jk(u) / Y_j(u)`` off the diagonal (zero when
``Y_j(u) = 0``) and the diagonal makes every row sum to one.  Simultaneous
events enter a single increment.  Landmark AJ (LMAJ) runs the same product
integral on the subjects occupying a given state at the landmark time.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import CountingProcess, MultiStateDataset, counting_process
from .errors import EmptyLandmark, GridBeforeOrigin

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing evaluation times ``tau_1 < ... < tau_M``."""

    points: tuple

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).ravel()
        if pts.size < 1:
            raise ValueError("time grid needs at least one point")
        if not np.all(np.isfinite(pts)) or np.any(pts < 0):
            raise ValueError("time grid points must be finite and non-negative")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("time grid must be strictly increasing")
        object.__setattr__(self, "points", tuple(float(p) for p in pts))

    @property
    def M(self) -> int:
        return len(self.points)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.points)

    def __len__(self):
        return self.M

    def __iter__(self):
        return iter(self.points)

    @classmethod
    def linspace(cls, start: float, stop: float, M: int) -> "TimeGrid":
        return cls(tuple(np.linspace(start, stop, int(M))))

    @classmethod
    def parse(cls, text: str) -> "TimeGrid":
        """Parse ``start:stop:M``."""
        try:
            start, stop, M = text.split(":")
            return cls.linspace(float(start), float(stop), int(M))
        except ValueError as exc:
            raise ValueError(f"grid must look like start:stop:M, got {text!r}") from exc


def default_grid(dataset: MultiStateDataset, M: int = 30, after: float = 0.0) -> TimeGrid:
    """``M`` equally spaced quantiles of the observed transition times
    later than ``after`` (duplicates removed)."""
    ev = dataset.t_stop[(dataset.status == 1) & (dataset.t_stop > after)]
    if ev.size == 0:
        raise ValueError(f"no transition times after {after}")
    levels = np.arange(1, M + 1) / (M + 1)
    pts = np.unique(np.quantile(ev, levels))
    return TimeGrid(tuple(pts))


@dataclass(frozen=True)
class TransitionProbabilitySeries:
    """``matrices[m]`` is the ``K x K`` estimate of ``P(s, grid[m])``."""

    origin_time: float
    grid: TimeGrid
    matrices: np.ndarray

    def row(self, j: int) -> np.ndarray:
        return self.matrices[:, j - 1, :]


@dataclass(frozen=True)
class OccupationSeries:
    """``probabilities[m, k-1]`` estimates ``P(X(grid[m]) = k | ...)``.

    ``conditioning_time`` is 0 for unconditional occupation; for landmark
    quantities ``landmark_state`` is the state conditioned on at that time.
    """

    grid: TimeGrid
    probabilities: np.ndarray
    conditioning_time: float = 0.0
    landmark_state: int | None = None


@dataclass(frozen=True)
class DynamicOccupation:
    """Per-landmark-state occupation series plus the states with an empty
    landmark population."""

    landmark_time: float
    by_state: dict
    empty_states: tuple = field(default=())


def increments(cp: CountingProcess) -> np.ndarray:
    """``(E, K, K)`` matrices ``I + dA(u)`` for every event time."""
    E, K = cp.at_risk.shape
    Y = cp.at_risk[:, :, None].astype(float)
    dA = np.divide(cp.events, Y, out=np.zeros((E, K, K)), where=Y > 0)
    out = dA.copy()
    diag = np.arange(K)
    out[:, diag, diag] = 1.0 - dA.sum(axis=2) + dA[:, diag, diag]
    return out


def _row_increment(Y: int, dN_row: np.ndarray, j: int) -> np.ndarray:
    r = dN_row / Y if Y > 0 else np.zeros(dN_row.shape)
    r[j] = 0.0
    r[j] = 1.0 - r.sum()
    return r


def product_integral(cp: CountingProcess, grid, start) -> np.ndarray:
    """Evaluate ``start @ prod (I + dA)`` at each grid point.

    ``start`` is a vector ``(K,)`` or a matrix ``(K, K)``; values at a grid
    point use every event time ``<= tau_m`` (right-continuous steps).
    """
    grid = np.asarray(grid, dtype=float)
    cur = np.array(start, dtype=float)
    out = np.empty((grid.size,) + cur.shape)
    counts = np.searchsorted(cp.times, grid, side="right")
    inc = increments(cp)
    m = 0
    for e in range(cp.times.size):
        while m < grid.size and counts[m] == e:
            out[m] = cur
            m += 1
        if m == grid.size:
            break
        cur = cur @ inc[e]
    out[m:] = cur
    return out


def _as_grid(grid) -> TimeGrid:
    return grid if isinstance(grid, TimeGrid) else TimeGrid(tuple(np.atleast_1d(grid)))


def initial_distribution(dataset: MultiStateDataset) -> np.ndarray:
    """Empirical distribution of the states occupied at entry."""
    K = dataset.graph.K
    init = dataset.initial_states[dataset.has_records]
    counts = np.bincount(init, minlength=K + 1)[1:].astype(float)
    total = counts.sum()
    return counts / total if total else counts


def aj_transition_probability(dataset: MultiStateDataset, s: float, grid) -> TransitionProbabilitySeries:
    """AJ estimate of ``P(s, t)`` for every ``t`` in ``grid`` (all ``> s``)."""
    grid = _as_grid(grid)
    if grid.points[0] <= s:
        raise GridBeforeOrigin(f"grid point {grid.points[0]} is not after origin {s}")
    cp = counting_process(dataset, after=s, until=grid.points[-1])
    mats = product_integral(cp, grid.array, np.eye(dataset.graph.K))
    return TransitionProbabilitySeries(float(s), grid, mats)


def aj_state_occupation(dataset: MultiStateDataset, grid) -> OccupationSeries:
    """AJ state occupation ``pi(t) = pi(0)^T P(0, t)``, with ``pi(0)`` the
    empirical initial distribution."""
    grid = _as_grid(grid)
    cp = counting_process(dataset, until=grid.points[-1])
    probs = product_integral(cp, grid.array, initial_distribution(dataset))
    return OccupationSeries(grid, probs, 0.0)


def landmark_subset(dataset: MultiStateDataset, j: int, s: float) -> np.ndarray:
    """Positions of the subjects occupying state ``j`` at time ``s``."""
    return np.nonzero(dataset.states_at(s) == j)[0]


def aj_row(dataset: MultiStateDataset, j: int, s: float, grid) -> OccupationSeries:
    """Row ``j`` of the full-cohort AJ ``P(s, t)``."""
    grid = _as_grid(grid)
    if grid.points[0] <= s:
        raise GridBeforeOrigin(f"grid point {grid.points[0]} is not after origin {s}")
    cp = counting_process(dataset, after=s, until=grid.points[-1])
    e_j = np.zeros(dataset.graph.K)
    e_j[j - 1] = 1.0
    return OccupationSeries(grid, product_integral(cp, grid.array, e_j), float(s), j)


def lmaj_transition_probability(dataset: MultiStateDataset, j: int, s: float, grid) -> OccupationSeries:
    """Landmark AJ estimate of row ``j`` of ``P(s, t)``.

    Restricts the cohort to the subjects in state ``j`` at ``s`` and runs the
    AJ product integral from ``s`` on that subset.
    """
    members = landmark_subset(dataset, j, s)
    if members.size == 0:
        raise EmptyLandmark(f"no subject occupies state {j} at time {s}")
    return aj_row(dataset.subset(members), j, s, grid)


def aj_dynamic_sop(dataset: MultiStateDataset, s: float, grid) -> DynamicOccupation:
    """``pi(t | X(s) = j)`` from the full-cohort AJ, for every state ``j``
    occupied by someone at ``s``."""
    grid = _as_grid(grid)
    occupied = np.unique(dataset.states_at(s))
    occupied = occupied[occupied > 0]
    by_state = {int(j): aj_row(dataset, int(j), s, grid) for j in occupied}
    empty = tuple(k for k in dataset.graph.states if k not in by_state)
    return DynamicOccupation(float(s), by_state, empty)


def lmaj_dynamic_sop(dataset: MultiStateDataset, s: float, grid) -> DynamicOccupation:
    """Landmark AJ ``pi(t | X(s) = j)`` for every non-empty landmark state.

    States nobody occupies at ``s`` are listed in ``empty_states`` and
    logged, not raised.
    """
    grid = _as_grid(grid)
    if grid.points[0] <= s:
        raise GridBeforeOrigin(f"grid point {grid.points[0]} is not after landmark {s}")
    by_state, empty = {}, []
    for j in dataset.graph.states:
        try:
            by_state[j] = lmaj_transition_probability(dataset, j, s, grid)
        except EmptyLandmark:
            log.info("empty landmark population for state %d at s=%g", j, s)
            empty.append(j)
    return DynamicOccupation(float(s), by_state, tuple(empty))


# leave-one-out product integral -------------------------------------------


def leave_one_out_product(
    population: MultiStateDataset,
    after: float,
    grid,
    start: np.ndarray,
    loo_start: np.ndarray,
    scope: np.ndarray,
):
    """AJ product integral on ``population`` and on every leave-one-out
    cohort obtained by dropping one subject of ``scope``.

    Dropping subject ``i`` lowers ``Y_j(u)`` by one wherever ``i`` is at risk
    in ``j`` and removes ``i``'s own transitions from ``dN``.  Only row ``j``
    of the increment at ``u`` changes, and only when state ``j`` has events
    at ``u``, so every leave-one-out product is obtained from the full
    increment plus a rank-one row correction.

    Parameters
    ----------
    population : MultiStateDataset
    after : float
        Origin ``s``; only events in ``(s, grid[-1]]`` enter.
    grid : array_like
        Evaluation times.
    start : ndarray, shape (K,)
        Start vector for the full cohort.
    loo_start : ndarray, shape (n_scope, K)
        Start vector for each leave-one-out cohort.
    scope : ndarray of int
        Positions (into ``population``) of the subjects to leave out.

    Returns
    -------
    full : ndarray, shape (M, K)
    loo : ndarray, shape (n_scope, M, K)
    """
    grid = np.asarray(grid, dtype=float)
    M = grid.size
    K = population.graph.K
    scope = np.asarray(scope, dtype=np.int64)
    n_scope = scope.size
    cp = counting_process(population, after=after, until=grid[-1])
    inc = increments(cp)
    E = cp.times.size

    pos_of = np.full(population.n_subjects, -1, dtype=np.int64)
    pos_of[scope] = np.arange(n_scope)
    rec_pos = pos_of[population.subject]
    rel = (rec_pos >= 0) & (population.t_stop > after)
    r_pos = rec_pos[rel]
    r_from = population.from_state[rel]
    r_stop = population.t_stop[rel]

    # risk-set boundaries: at a shared time, stops are applied before starts
    b_time = np.concatenate([r_stop, population.t_start[rel]])
    b_kind = np.concatenate([np.zeros(r_pos.size, np.int64), np.ones(r_pos.size, np.int64)])
    b_pos = np.concatenate([r_pos, r_pos])
    b_state = np.concatenate([np.zeros(r_pos.size, np.int64), r_from])
    order = np.lexsort((b_kind, b_time))
    b_time, b_pos, b_state = b_time[order].tolist(), b_pos[order].tolist(), b_state[order].tolist()
    n_bound = len(b_time)

    own = (population.status[rel] == 1) & (r_stop <= grid[-1])
    own_e = np.searchsorted(cp.times, r_stop[own])
    own_order = np.argsort(own_e, kind="stable")
    own_e = own_e[own_order]
    own_pos = r_pos[own][own_order]
    own_from = r_from[own][own_order] - 1
    own_to = population.to_state[rel][own][own_order] - 1
    own_lo = np.searchsorted(own_e, np.arange(E), side="left")
    own_hi = np.searchsorted(own_e, np.arange(E), side="right")

    counts = np.searchsorted(cp.times, grid, side="right")
    full = np.empty((M, K))
    loo = np.empty((n_scope, M, K))
    v = np.array(start, dtype=float)
    V = np.array(loo_start, dtype=float).reshape(n_scope, K)
    risk = np.zeros(n_scope, dtype=np.int64)
    bp = 0
    m = 0
    for e in range(E):
        while m < M and counts[m] == e:
            full[m] = v
            loo[:, m] = V
            m += 1
        if m == M:
            break
        u = cp.times[e]
        while bp < n_bound and b_time[bp] < u:
            risk[b_pos[bp]] = b_state[bp]
            bp += 1
        step = inc[e]
        prev = V
        V = prev @ step
        v = v @ step
        dN = cp.events[e]
        generic = {}
        for j in np.nonzero(dN.sum(axis=1))[0]:
            row = _row_increment(int(cp.at_risk[e, j]) - 1, dN[j].astype(float), j)
            generic[j] = row
            idx = np.nonzero(risk == j + 1)[0]
            if idx.size:
                V[idx] += prev[idx, j][:, None] * (row - step[j])
        for r in range(own_lo[e], own_hi[e]):
            i, j, k = own_pos[r], own_from[r], own_to[r]
            dN_row = dN[j].astype(float)
            dN_row[k] -= 1.0
            row = _row_increment(int(cp.at_risk[e, j]) - 1, dN_row, j)
            V[i] += prev[i, j] * (row - generic[j])
    full[m:] = v
    loo[:, m:] = V[:, None, :]
    return full, loo
