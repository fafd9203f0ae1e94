"""Synthetic multi-state cohorts and the high-censoring settings.

Every subject gets its own random stream keyed by ``(seed, subject index)``,
so a subject's covariates and path do not depend on ``n`` or on the order
subjects are simulated in.

Transition intensities are

    lambda_jk(t | x, e) = base_jk * exp(clip(f_jk(x), -CLIP, CLIP)) * exp(gamma_jk * e)

with ``e`` the time the current state was entered.  ``f_jk`` is linear
(``beta_jk . x``) or nonlinear (``sin(beta_jk . x) + (alpha_jk . x)**2 / 4``).
Within a sojourn the intensity is constant, so sojourns are sampled exactly
as competing exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import CENSORED, TRANSITIONED, MultiStateDataset, TransitionGraph
from .errors import InsufficientUncensored, UnreachableCensoringRate

CLIP = 3.0
N_COVARIATES = 10

FORWARD3 = TransitionGraph(3, [(1, 2), (1, 3), (2, 3)])
REVERSIBLE4 = TransitionGraph(
    4, [(1, 2), (1, 3), (1, 4), (2, 1), (2, 3), (2, 4), (3, 1), (3, 2), (3, 4)]
)


@dataclass(frozen=True)
class IntensitySpec:
    """Transition intensities for one simulation family.

    ``baseline``, ``entry_effect`` have one entry per graph transition;
    ``beta`` and ``alpha`` are ``(Q, p)``.  ``alpha`` is only used by the
    nonlinear effect.
    """

    graph: TransitionGraph
    baseline: tuple
    effect: str = "none"
    beta: np.ndarray | None = None
    alpha: np.ndarray | None = None
    entry_effect: tuple | None = None
    n_covariates: int = N_COVARIATES
    tau: float | None = 5.0
    initial_state: int = 1

    def __post_init__(self):
        Q = self.graph.Q
        if len(self.baseline) != Q:
            raise ValueError("need one baseline rate per transition")
        if any(r < 0 for r in self.baseline):
            raise ValueError("baseline rates must be non-negative")
        if self.effect not in ("none", "linear", "nonlinear"):
            raise ValueError(f"unknown covariate effect {self.effect!r}")
        p = self.n_covariates
        for name in ("beta", "alpha"):
            v = getattr(self, name)
            v = np.zeros((Q, p)) if v is None else np.asarray(v, dtype=float)
            if v.shape != (Q, p):
                raise ValueError(f"{name} must have shape ({Q}, {p})")
            object.__setattr__(self, name, v)
        gamma = self.entry_effect or (0.0,) * Q
        if len(gamma) != Q:
            raise ValueError("need one entry-time effect per transition")
        object.__setattr__(self, "entry_effect", tuple(float(g) for g in gamma))

    @property
    def markov(self) -> bool:
        return not any(self.entry_effect)

    def log_multiplier(self, x: np.ndarray) -> np.ndarray:
        """``(..., Q)`` clipped log covariate multipliers."""
        if self.effect == "none":
            return np.zeros(x.shape[:-1] + (self.graph.Q,))
        if self.effect == "linear":
            lp = x @ self.beta.T
        else:
            lp = np.sin(x @ self.beta.T) + (x @ self.alpha.T) ** 2 / 4.0
        return np.clip(lp, -CLIP, CLIP)

    def rates(self, x: np.ndarray, entry_time: float) -> np.ndarray:
        """Per-transition intensities for one subject during one sojourn."""
        g = np.asarray(self.entry_effect)
        return np.asarray(self.baseline) * np.exp(self.log_multiplier(x) + g * entry_time)


def _coef(Q, spec_rows):
    out = np.zeros((Q, N_COVARIATES))
    for q, row in enumerate(spec_rows):
        for i, v in row.items():
            out[q, i] = v
    return out


# Markov families: 1->2, 1->3, 2->3.
_MARKOV_BASE = (0.40, 0.15, 0.35)
_MARKOV_LINEAR = _coef(3, [
    {0: 0.8, 1: -0.6, 2: 0.4},
    {1: 0.5, 3: -0.7, 4: 0.3},
    {0: -0.5, 5: 0.8, 6: -0.4},
])
_MARKOV_SIN = _coef(3, [
    {0: 1.2, 1: -0.8},
    {3: -1.0},
    {5: 1.2},
])
_MARKOV_QUAD = _coef(3, [
    {2: 2.0, 3: 1.6},
    {0: 1.8, 4: -1.8},
    {1: 2.0, 6: 1.6},
])

# Reversible non-Markov families:
# 1->2, 1->3, 1->4, 2->1, 2->3, 2->4, 3->1, 3->2, 3->4.
_NONMARKOV_BASE = (0.30, 0.20, 0.05, 0.20, 0.20, 0.10, 0.15, 0.15, 0.20)
_NONMARKOV_GAMMA = (0.0, 0.0, 0.0, 0.4, 0.4, 0.4, 0.4, 0.4, 0.4)
_NONMARKOV_LINEAR = _coef(9, [
    {0: 0.8, 1: -0.5},
    {2: 0.7, 3: 0.4},
    {4: 0.6},
    {0: -0.6, 5: 0.5},
    {1: 0.7, 6: -0.4},
    {2: 0.5, 7: 0.5},
    {3: -0.7, 8: 0.4},
    {4: 0.6, 9: -0.5},
    {0: 0.5, 5: 0.6},
])
_NONMARKOV_SIN = _coef(9, [
    {0: 1.2}, {2: -1.0}, {4: 1.0},
    {5: 1.2}, {1: -1.2}, {7: 1.0},
    {3: 1.0}, {9: -1.2}, {0: 1.0},
])
_NONMARKOV_QUAD = _coef(9, [
    {1: 2.0, 2: 1.6}, {0: 1.8, 3: -1.6}, {5: 1.8},
    {2: 1.8, 4: 1.6}, {3: 2.0}, {6: 1.8, 1: 1.2},
    {4: 1.8, 7: -1.4}, {8: 2.0}, {2: 1.6, 9: 1.6},
])

FAMILIES = {
    "markov-constant": IntensitySpec(FORWARD3, _MARKOV_BASE),
    "markov-linear": IntensitySpec(FORWARD3, _MARKOV_BASE, "linear", beta=_MARKOV_LINEAR),
    "markov-nonlinear": IntensitySpec(
        FORWARD3, _MARKOV_BASE, "nonlinear", beta=_MARKOV_SIN, alpha=_MARKOV_QUAD
    ),
    "nonmarkov-linear": IntensitySpec(
        REVERSIBLE4, _NONMARKOV_BASE, "linear", beta=_NONMARKOV_LINEAR, entry_effect=_NONMARKOV_GAMMA
    ),
    "nonmarkov-nonlinear": IntensitySpec(
        REVERSIBLE4,
        _NONMARKOV_BASE,
        "nonlinear",
        beta=_NONMARKOV_SIN,
        alpha=_NONMARKOV_QUAD,
        entry_effect=_NONMARKOV_GAMMA,
    ),
}


def family(name: str) -> IntensitySpec:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown simulation family {name!r}; choose from {sorted(FAMILIES)}") from None


def _subject_rng(seed: int, i: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(i), int(stream)])


def _simulate_path(spec: IntensitySpec, x: np.ndarray, rng: np.random.Generator, tau: float):
    """Return a list of ``(from, to, t_start, t_stop, status)`` tuples."""
    graph = spec.graph
    out = []
    state, t = spec.initial_state, 0.0
    outgoing = [[q for q, (a, _) in enumerate(graph.transitions) if a == k] for k in range(graph.K + 1)]
    while True:
        qs = outgoing[state]
        if not qs:
            return out
        rates = spec.rates(x, t)[qs]
        total = rates.sum()
        wait = rng.exponential(1.0 / total) if total > 0 else np.inf
        if t + wait >= tau:
            if np.isfinite(tau):
                out.append((state, state, t, tau, CENSORED))
                return out
            raise ValueError("path never absorbs; give a finite tau")
        nxt = graph.transitions[qs[rng.choice(len(qs), p=rates / total)]][1]
        out.append((state, nxt, t, t + wait, TRANSITIONED))
        state, t = nxt, t + wait


def _build(graph, ids, paths, X, horizon) -> MultiStateDataset:
    cols = [[] for _ in range(6)]
    for i, path in enumerate(paths):
        for rec in path:
            cols[0].append(i)
            for c, v in zip(cols[1:], rec):
                c.append(v)
    return MultiStateDataset(graph, ids, *cols, covariates=X, horizon=horizon)


def _truncate(path, c):
    """Observed part of ``path`` under censoring at time ``c``."""
    out = []
    for a, b, t0, t1, st in path:
        if t1 <= c:
            out.append((a, b, t0, t1, st))
            continue
        if t0 < c:
            out.append((a, a, t0, c, CENSORED))
        break
    return out


def _censor_fraction(paths):
    return np.mean([p[-1][4] == CENSORED for p in paths]) if paths else 0.0


def simulate_cohort(
    spec: IntensitySpec,
    n: int,
    tau: float | None = None,
    censoring_rate: float | None = None,
    seed: int = 0,
    first_index: int = 0,
    graph: TransitionGraph | None = None,
):
    """Simulate ``n`` subjects.

    Parameters
    ----------
    spec : IntensitySpec
    n : int
    tau : float, optional
        Administrative censoring time; defaults to ``spec.tau``.  ``inf``
        simulates every path to absorption.
    censoring_rate : float, optional
        Target fraction of censored subjects.  Independent exponential
        censoring is added and its rate tuned by bisection until the
        realised fraction is within 0.02 of the target.
    seed : int
    first_index : int
        Index of the first subject's random stream (ids are
        ``first_index .. first_index + n - 1``).

    Returns
    -------
    observed : MultiStateDataset
    truth : MultiStateDataset
        The same subjects followed up to ``tau`` (or absorption).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if graph is not None and graph != spec.graph:
        raise ValueError("graph does not match the intensity spec")
    tau = spec.tau if tau is None else tau
    tau = np.inf if tau is None else float(tau)
    ids = list(range(first_index, first_index + n))
    X = np.empty((n, spec.n_covariates))
    paths, unit_exp = [], np.empty(n)
    for row, i in enumerate(ids):
        rng = _subject_rng(seed, i)
        X[row] = rng.standard_normal(spec.n_covariates)
        paths.append(_simulate_path(spec, X[row], rng, tau))
        unit_exp[row] = _subject_rng(seed, i, 1).exponential()
    horizon = tau if np.isfinite(tau) else max(p[-1][3] for p in paths)
    truth = _build(spec.graph, ids, paths, X, horizon)

    if censoring_rate is None:
        return truth, truth
    base = _censor_fraction(paths)
    if censoring_rate <= base + 0.02:
        if abs(base - censoring_rate) <= 0.02:
            return truth, truth
        raise UnreachableCensoringRate(
            f"administrative censoring alone gives rate {base:.3f} > target {censoring_rate}"
        )

    def observed(mu):
        return [_truncate(p, u / mu) for p, u in zip(paths, unit_exp)]

    lo, hi = -12.0, 12.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        obs = observed(np.exp(mid))
        rate = _censor_fraction(obs)
        if abs(rate - censoring_rate) <= 0.02:
            return _build(spec.graph, ids, obs, X, horizon), truth
        if rate < censoring_rate:
            lo = mid
        else:
            hi = mid
    raise UnreachableCensoringRate(f"could not reach censoring rate {censoring_rate} with n={n}")


def _paths_of(dataset: MultiStateDataset):
    out = []
    for i in range(dataset.n_subjects):
        sl = dataset.subject_records(i)
        out.append(
            list(
                zip(
                    dataset.from_state[sl].tolist(),
                    dataset.to_state[sl].tolist(),
                    dataset.t_start[sl].tolist(),
                    dataset.t_stop[sl].tolist(),
                    dataset.status[sl].tolist(),
                )
            )
        )
    return out


def apply_incremental_censoring(
    base: MultiStateDataset,
    target_rate: float,
    spec: IntensitySpec,
    seed: int = 0,
    truth: MultiStateDataset | None = None,
):
    """Append newly simulated subjects, each censored at a uniform time
    before its absorption, until censored / total equals ``target_rate``
    (to within one subject).  Original subjects are untouched.

    Returns the censored dataset, and the matching truth when ``truth`` (the
    base's own truth) is given.
    """
    if target_rate <= 0:
        return base if truth is None else (base, truth)
    if not 0 < target_rate < 1:
        raise ValueError("target_rate must be in (0, 1)")
    n_cens = int(base.censored.sum())
    n_unc = base.n_subjects - n_cens
    m = int(round(target_rate * n_unc / (1.0 - target_rate))) - n_cens
    if m <= 0:
        return base if truth is None else (base, truth)
    start = max((int(i) for i in base.subject_ids if isinstance(i, (int, np.integer))), default=-1) + 1
    new_truth, _ = simulate_cohort(spec, m, tau=np.inf, seed=seed, first_index=start)
    paths = _paths_of(new_truth)
    cens = []
    for row, path in enumerate(paths):
        end = path[-1][3]
        c = _subject_rng(seed, start + row, 2).uniform(0.0, end)
        cens.append(_truncate(path, c))
    horizon = max(base.horizon, new_truth.horizon)
    observed = _build(
        base.graph,
        list(base.subject_ids) + list(new_truth.subject_ids),
        _paths_of(base) + cens,
        np.vstack([base.covariates, new_truth.covariates]),
        horizon,
    )
    if truth is None:
        return observed
    full_truth = _build(
        base.graph,
        list(truth.subject_ids) + list(new_truth.subject_ids),
        _paths_of(truth) + paths,
        np.vstack([truth.covariates, new_truth.covariates]),
        horizon,
    )
    return observed, full_truth


def apply_induced_censoring(base: MultiStateDataset, target_rate: float, seed: int = 0) -> MultiStateDataset:
    """Flip uniformly chosen uncensored subjects to censored until the
    censored fraction reaches ``target_rate`` (to within one subject).

    A flipped subject's final transitioned record becomes a censored record
    ending at the same time, and any later records are dropped.
    """
    if not 0 <= target_rate <= 1:
        raise ValueError("target_rate must be in [0, 1]")
    n = base.n_subjects
    need = int(round(target_rate * n)) - int(base.censored.sum())
    if need <= 0:
        return base
    candidates = np.nonzero(~base.censored & base.has_records)[0]
    if candidates.size < need:
        raise InsufficientUncensored(f"need {need} uncensored subjects, have {candidates.size}")
    rng = np.random.default_rng([int(seed), 3])
    flip = set(rng.choice(candidates, size=need, replace=False).tolist())
    paths = _paths_of(base)
    for i in flip:
        path = paths[i]
        last = max(r for r, rec in enumerate(path) if rec[4] == TRANSITIONED)
        a, _, t0, t1, _ = path[last]
        paths[i] = path[:last] + [(a, a, t0, t1, CENSORED)]
    return _build(base.graph, list(base.subject_ids), paths, base.covariates, base.horizon)
