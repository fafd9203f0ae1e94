import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspseudo.core import MultiStateDataset, TransitionRecord
from mspseudo.estimators import TimeGrid
from mspseudo.metrics import (
    MetricSeries,
    censoring_survival,
    evaluate,
    trapezoid_mean,
    weighted_auc,
    weighted_brier,
)
from mspseudo.model import PredictionMatrix

from conftest import ILLNESS_DEATH

R = TransitionRecord


def four_subjects():
    recs = [
        R(1, 1, 2, 0, 1, 1), R(1, 2, 2, 1, 5, 0),
        R(2, 1, 3, 0, 2, 1),
        R(3, 1, 1, 0, 5, 0),
        R(4, 1, 2, 0, 0.5, 1), R(4, 2, 3, 0.5, 1.5, 1),
    ]
    return MultiStateDataset.from_records(ILLNESS_DEATH, recs, horizon=5)


def brute_auc(pred, label):
    pos = [p for p, l in zip(pred, label) if l]
    neg = [p for p, l in zip(pred, label) if not l]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_hand_brier_table():
    ref = four_subjects()
    grid = TimeGrid((1.2, 3.0))
    vals = np.zeros((4, 3, 2))
    vals[:, 0, 0] = [0.2, 0.7, 0.9, 0.1]  # labels S1 at 1.2: 0 1 1 0
    vals[:, 0, 1] = [0.1, 0.0, 0.8, 0.3]  # labels S1 at 3.0: 0 0 1 0
    res = evaluate(PredictionMatrix(vals, "sop", grid, (1, 2, 3)), ref)
    assert res.brier[0, 0] == pytest.approx((0.04 + 0.09 + 0.01 + 0.01) / 4)
    assert res.brier[0, 1] == pytest.approx((0.01 + 0 + 0.04 + 0.09) / 4)
    assert res.integrated_brier[0] == pytest.approx((0.0375 + 0.035) / 2)


def test_auc_with_one_tie():
    pred = [0.9, 0.4, 0.4, 0.2, 0.7]
    label = [1, 1, 0, 0, 0]
    assert weighted_auc(pred, label, np.ones(5)) == pytest.approx(4.5 / 6)
    assert brute_auc(pred, label) == pytest.approx(4.5 / 6)


def test_trivial_scores():
    label = np.array([1, 0, 1, 1, 0])
    w = np.ones(5)
    assert weighted_auc(label.astype(float), label, w) == 1.0
    assert weighted_auc(np.full(5, 0.3), label, w) == 0.5
    assert weighted_brier(label.astype(float), label, w) == 0.0
    assert weighted_brier(np.full(5, 0.5), label, w) == 0.25
    assert np.isnan(weighted_auc(np.ones(3), np.ones(3), np.ones(3)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=2, max_size=15))
def test_auc_matches_pair_enumeration_and_is_rank_invariant(rows):
    pred = np.array([r[0] for r in rows], dtype=float) / 5
    label = np.array([r[1] for r in rows])
    if label.all() or not label.any():
        return
    a = weighted_auc(pred, label, np.ones(len(rows)))
    assert a == pytest.approx(brute_auc(pred, label))
    assert weighted_auc(np.exp(3 * pred) - 7, label, np.ones(len(rows))) == pytest.approx(a)


def test_prevalence_minimizes_constant_brier():
    rng = np.random.default_rng(0)
    label = rng.random(200) < 0.3
    w = np.ones(200)
    best = weighted_brier(np.full(200, label.mean()), label, w)
    for c in np.linspace(0, 1, 41):
        assert weighted_brier(np.full(200, c), label, w) >= best - 1e-15


def test_trapezoid_mean():
    t = np.array([0.0, 1.0, 2.0, 3.0])
    v = np.array([1.0, 3.0, 2.0, 4.0])
    # uniform grid: average of the interval midpoints
    assert trapezoid_mean(v, t) == pytest.approx(np.mean((v[1:] + v[:-1]) / 2))
    assert trapezoid_mean(np.full(4, 0.3), t) == pytest.approx(0.3)
    assert trapezoid_mean([np.nan, 2.0, np.nan, np.nan], t) == 2.0


def test_ipcw_hand_example():
    recs = [
        R("A", 1, 1, 0, 1, 0),
        R("B", 1, 3, 0, 2, 1),
        R("C", 1, 1, 0, 4, 0),
        R("D", 1, 2, 0, 0.5, 1), R("D", 2, 2, 0.5, 3, 0),
    ]
    ds = MultiStateDataset.from_records(ILLNESS_DEATH, recs, horizon=5)
    times, G = censoring_survival(ds)
    np.testing.assert_allclose(times, [1, 3, 4])
    np.testing.assert_allclose(G, [0.75, 0.375, 0.0])
    vals = np.zeros((4, 3, 1))
    vals[:, 0, 0] = [0.9, 0.2, 0.6, 0.5]
    res = evaluate(PredictionMatrix(vals, "sop", TimeGrid((3.5,)), (1, 2, 3)), ds, mode="ipcw")
    # A and D unknown at 3.5; B weight 1/G(2-) = 4/3, C weight 1/G(3.5) = 8/3
    assert res.brier[0, 0] == pytest.approx((4 / 3 * 0.04 + 8 / 3 * 0.16) / 4)


def test_ipcw_equals_true_state_without_censoring():
    from mspseudo.simulate import family, simulate_cohort

    _, truth = simulate_cohort(family("markov-linear"), 200, tau=np.inf, seed=1)
    rng = np.random.default_rng(0)
    grid = TimeGrid.linspace(0.5, 4, 5)
    pm = PredictionMatrix(rng.random((200, 3, 5)), "sop", grid, (1, 2, 3))
    a, b = evaluate(pm, truth), evaluate(pm, truth, mode="ipcw")
    np.testing.assert_allclose(a.brier, b.brier, atol=1e-12)
    np.testing.assert_allclose(a.auc, b.auc, atol=1e-12)


def test_transition_targets_use_landmark_members():
    ref = four_subjects()
    grid = TimeGrid((3.0,))
    vals = np.zeros((4, 3, 1))
    vals[:, 2, 0] = [0.4, 0.0, 0.0, 0.9]  # target 2->3, rows with state 2 at s: subjects 1 and 4
    pm = PredictionMatrix(vals, "tp", grid, ((1, 2), (1, 3), (2, 3)))
    res = evaluate(pm, ref, landmark_states=np.array([2, 1, 1, 2]))
    # subject 1 in 2 (label 0), subject 4 in 3 (label 1)
    assert res.brier[2, 0] == pytest.approx((0.16 + 0.01) / 2)
    assert res.auc[2, 0] == 1.0


def test_degenerate_points_are_skipped():
    ref = four_subjects()
    vals = np.full((4, 3, 2), 0.5)
    res = evaluate(PredictionMatrix(vals, "sop", TimeGrid((0.2, 3.0)), (1, 2, 3)), ref)
    assert np.isnan(res.auc[0, 0])  # everyone in state 1 at 0.2
    assert any(s[1] == 0.2 for s in res.skipped)
    assert res.integrated_auc[0] == res.auc[0, 1]


def test_series_csv_round_trip():
    ref = four_subjects()
    rng = np.random.default_rng(0)
    res = evaluate(PredictionMatrix(rng.random((4, 3, 2)), "sop", TimeGrid((1.2, 3.0)), (1, 2, 3)), ref)
    text = res.to_csv()
    assert text.splitlines()[0] == "target,time,brier,auc"
    back = MetricSeries.from_csv(text)
    np.testing.assert_array_equal(back.brier, res.brier)
    np.testing.assert_array_equal(np.isnan(back.auc), np.isnan(res.auc))
    assert back.targets == res.targets
