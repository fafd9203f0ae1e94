"""Time-dependent Brier score and AUC, and their integrated versions.

Two ways of scoring against a reference dataset:

``true-state``
    The reference holds the true (uncensored up to the horizon) paths of
    simulated subjects; every subject has weight one.
``ipcw``
    The reference is the observed, censored data.  Subjects whose state at
    ``t`` is unknown are dropped and the rest are weighted by the inverse
    Kaplan-Meier probability of remaining uncensored, evaluated at ``t`` or
    at the absorption time, whichever comes first.

Weights are normalised to sum to one at each grid point, so factors that
are common to all subjects (such as conditioning on the landmark) cancel.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import MultiStateDataset
from .errors import NoEvaluableSubjects
from .estimators import TimeGrid

log = logging.getLogger(__name__)

MODES = ("true-state", "ipcw")


@dataclass(frozen=True)
class MetricSeries:
    """Per-target series on a grid.

    ``brier`` and ``auc`` are ``(T, M)`` with NaN at grid points that could
    not be scored.  ``integrated_*`` are trapezoid means over the scored
    points; ``avg_*`` average those over targets.
    """

    grid: TimeGrid
    targets: tuple
    brier: np.ndarray
    auc: np.ndarray
    integrated_brier: np.ndarray
    integrated_auc: np.ndarray
    weighting: str
    skipped: tuple = field(default=(), compare=False)

    @property
    def avg_brier(self) -> float:
        return _nanmean(self.integrated_brier)

    @property
    def avg_auc(self) -> float:
        return _nanmean(self.integrated_auc)

    @property
    def target_labels(self) -> list:
        return [target_label(t) for t in self.targets]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["target", "time", "brier", "auc"])
        for ti, lab in enumerate(self.target_labels):
            for m, t in enumerate(self.grid.points):
                w.writerow([lab, _fmt(t), _fmt(self.brier[ti, m]), _fmt(self.auc[ti, m])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, weighting: str = "true-state") -> "MetricSeries":
        rows = list(csv.DictReader(io.StringIO(text)))
        labels = list(dict.fromkeys(r["target"] for r in rows))
        times = list(dict.fromkeys(float(r["time"]) for r in rows))
        B = np.full((len(labels), len(times)), np.nan)
        A = np.full_like(B, np.nan)
        for r in rows:
            i, m = labels.index(r["target"]), times.index(float(r["time"]))
            B[i, m], A[i, m] = float(r["brier"]), float(r["auc"])
        grid = TimeGrid(tuple(times))
        targets = tuple(_parse_label(lab) for lab in labels)
        return cls(grid, targets, B, A, _integrate(B, grid), _integrate(A, grid), weighting)


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=float)
    x = x[~np.isnan(x)]
    return float(x.mean()) if x.size else float("nan")


def _fmt(x) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def target_label(t) -> str:
    if isinstance(t, tuple):
        return f"{t[0]}->{t[1]}"
    return f"S{t}"


def _parse_label(lab: str):
    if "->" in lab:
        j, k = lab.split("->")
        return (int(j), int(k))
    return int(lab.lstrip("S"))


def trapezoid_mean(values, times) -> float:
    """Trapezoid-rule average of ``values`` over ``times``, ignoring NaN
    points.  A single finite point is returned as is."""
    values = np.asarray(values, dtype=float)
    times = np.asarray(times, dtype=float)
    ok = ~np.isnan(values)
    v, t = values[ok], times[ok]
    if v.size == 0:
        return float("nan")
    if v.size == 1 or t[-1] == t[0]:
        return float(v.mean())
    return float(np.trapezoid(v, t) / (t[-1] - t[0]))


def _integrate(series, grid) -> np.ndarray:
    return np.array([trapezoid_mean(row, grid.array) for row in series])


# reference states and weights ---------------------------------------------


def censoring_survival(dataset: MultiStateDataset):
    """Kaplan-Meier estimate of the censoring survival function.

    Returns ``(times, G)`` with ``G[i]`` the value just after ``times[i]``.
    Censoring is the event; absorption censors the censoring time.
    """
    last = dataset.last_times
    cens = dataset.censored & dataset.has_records
    times, d = np.unique(last[cens], return_counts=True)
    if times.size == 0:
        return times.astype(float), np.ones(0)
    order = np.sort(last[dataset.has_records])
    at_risk = order.size - np.searchsorted(order, times, side="left")
    G = np.cumprod(1.0 - d / at_risk)
    return times, G


def _step(times, G, t, left: bool = False):
    """Evaluate the KM step function at ``t`` (left limit if ``left``)."""
    t = np.asarray(t, dtype=float)
    if G.size == 0:
        return np.ones(t.shape)
    idx = np.searchsorted(times, t, side="left" if left else "right")
    return np.where(idx > 0, G[np.maximum(idx - 1, 0)], 1.0)


def reference_states(reference: MultiStateDataset, subject_ids, grid: TimeGrid) -> np.ndarray:
    """``(n, M)`` states of the given subjects at the grid points (0 where
    unknown)."""
    pos = _positions(reference, subject_ids)
    return np.stack([reference.states_at(t)[pos] for t in grid.points], axis=1)


def _positions(reference, subject_ids) -> np.ndarray:
    if subject_ids is None:
        return np.arange(reference.n_subjects)
    lookup = {sid: i for i, sid in enumerate(reference.subject_ids)}
    try:
        return np.array([lookup[s] for s in subject_ids], dtype=np.int64)
    except KeyError as exc:
        from .errors import UnknownSubject

        raise UnknownSubject(f"subject {exc.args[0]!r} not in the reference data") from None


def reference_weights(reference: MultiStateDataset, subject_ids, grid: TimeGrid, mode: str) -> np.ndarray:
    """``(n, M)`` unnormalised weights; zero where the state is unknown."""
    if mode not in MODES:
        raise ValueError(f"unknown weighting {mode!r}; expected one of {MODES}")
    states = reference_states(reference, subject_ids, grid)
    known = states > 0
    if mode == "true-state":
        return known.astype(float)
    pos = _positions(reference, subject_ids)
    times, G = censoring_survival(reference)
    last = reference.last_times[pos]
    absorbed = reference.absorbed[pos]
    w = np.zeros(states.shape)
    for m, t in enumerate(grid.points):
        done = absorbed & (last <= t)
        g = np.where(done, _step(times, G, last, left=True), _step(times, G, np.full(last.shape, t)))
        with np.errstate(divide="ignore"):
            w[:, m] = np.where(known[:, m] & (g > 0), 1.0 / np.where(g > 0, g, 1.0), 0.0)
    return w


# scores -------------------------------------------------------------------


def weighted_brier(pred, label, w) -> float:
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if total <= 0:
        raise NoEvaluableSubjects("no subject with known state and positive weight")
    return float(np.sum(w * (label - pred) ** 2) / total)


def weighted_auc(pred, label, w) -> float:
    """Weighted probability that a positive outranks a negative; ties
    count one half.  NaN if either class has no weight."""
    pred = np.asarray(pred, dtype=float)
    label = np.asarray(label, dtype=bool)
    w = np.asarray(w, dtype=float)
    keep = w > 0
    pred, label, w = pred[keep], label[keep], w[keep]
    wp, wn = w[label].sum(), w[~label].sum()
    if wp <= 0 or wn <= 0:
        return float("nan")
    scores, inv = np.unique(pred, return_inverse=True)
    neg = np.bincount(inv, weights=w * ~label, minlength=scores.size)
    pos = np.bincount(inv, weights=w * label, minlength=scores.size)
    below = np.concatenate([[0.0], np.cumsum(neg)[:-1]])
    return float(np.sum(pos * (below + 0.5 * neg)) / (wp * wn))


def evaluate(
    predictions,
    reference: MultiStateDataset,
    subject_ids=None,
    landmark_states=None,
    mode: str = "true-state",
    brier: bool = True,
    auc: bool = True,
) -> MetricSeries:
    """Brier score and AUC series for every target of ``predictions``.

    Parameters
    ----------
    predictions : PredictionMatrix
        ``values`` is ``(n, T, M)``; targets are states (occupation tasks)
        or ``(j, k)`` pairs (transition task).
    reference : MultiStateDataset
        True paths (``mode="true-state"``) or censored observations
        (``mode="ipcw"``).
    subject_ids : sequence, optional
        Reference ids of the prediction rows; all reference subjects in
        order when omitted.
    landmark_states : array of int, optional
        State of each row at the landmark.  For ``(j, k)`` targets only
        rows with landmark state ``j`` are scored.
    """
    values = np.asarray(predictions.values, dtype=float)
    grid = predictions.grid
    targets = tuple(predictions.targets)
    n, T, M = values.shape
    states = reference_states(reference, subject_ids, grid)
    if states.shape[0] != n:
        raise ValueError(f"{n} prediction rows but {states.shape[0]} reference subjects")
    w_all = reference_weights(reference, subject_ids, grid, mode)
    B = np.full((T, M), np.nan)
    A = np.full((T, M), np.nan)
    skipped = []
    for ti, tgt in enumerate(targets):
        if isinstance(tgt, tuple):
            j, k = tgt
            if landmark_states is None:
                raise ValueError("landmark_states are required to score transition targets")
            rows = np.asarray(landmark_states) == j
        else:
            k = tgt
            rows = np.ones(n, dtype=bool)
        for m in range(M):
            w = w_all[rows, m]
            if w.sum() <= 0:
                skipped.append((target_label(tgt), grid.points[m], "NoEvaluableSubjects"))
                continue
            lab = (states[rows, m] == k).astype(float)
            p = values[rows, ti, m]
            if brier:
                B[ti, m] = weighted_brier(p, lab, w)
            if auc:
                A[ti, m] = weighted_auc(p, lab, w)
                if np.isnan(A[ti, m]):
                    skipped.append((target_label(tgt), grid.points[m], "single class"))
    if skipped:
        log.info("%d grid points skipped during evaluation (%s weighting)", len(skipped), mode)
    return MetricSeries(grid, targets, B, A, _integrate(B, grid), _integrate(A, grid), mode, tuple(skipped))


def brier_series(predictions, reference, subject_ids=None, landmark_states=None, mode="true-state"):
    return evaluate(predictions, reference, subject_ids, landmark_states, mode, brier=True, auc=False)


def auc_series(predictions, reference, subject_ids=None, landmark_states=None, mode="true-state"):
    return evaluate(predictions, reference, subject_ids, landmark_states, mode, brier=False, auc=True)


def summary_rows(model: str, series: MetricSeries) -> list:
    """Two table rows ``[model, metric, per-target..., Avg]`` for iBS and
    iAUC."""
    return [
        [model, "iBS", *series.integrated_brier.tolist(), series.avg_brier],
        [model, "iAUC", *series.integrated_auc.tolist(), series.avg_auc],
    ]
