import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from mspseudo.core import MultiStateDataset, TransitionRecord
from mspseudo.errors import EmptyLandmark, GridBeforeOrigin
from mspseudo.estimators import (
    TimeGrid,
    aj_dynamic_sop,
    aj_row,
    aj_state_occupation,
    aj_transition_probability,
    default_grid,
    landmark_subset,
    lmaj_dynamic_sop,
    lmaj_transition_probability,
)
from mspseudo.simulate import family, simulate_cohort

from conftest import ILLNESS_DEATH, ILLNESS_DEATH_GRID, ILLNESS_DEATH_SOP


def test_aj_matches_hand_product_integral(illness_death):
    occ = aj_state_occupation(illness_death, ILLNESS_DEATH_GRID)
    np.testing.assert_allclose(occ.probabilities, ILLNESS_DEATH_SOP, atol=1e-12)


def test_aj_transition_matrix_hand_values(illness_death):
    tp = aj_transition_probability(illness_death, 1.5, TimeGrid((2.5, 3.5)))
    # from 1 at 1.5: risk set {B, C}, B dies at 2
    np.testing.assert_allclose(tp.row(1), [[0.5, 0, 0.5], [0.5, 0, 0.5]], atol=1e-12)
    # from 2 at 1.5: A alone, dies at 3
    np.testing.assert_allclose(tp.row(2), [[0, 1, 0], [0, 0, 1]], atol=1e-12)
    np.testing.assert_allclose(tp.row(3), [[0, 0, 1], [0, 0, 1]], atol=1e-12)


def test_grid_before_origin(illness_death):
    with pytest.raises(GridBeforeOrigin):
        aj_transition_probability(illness_death, 2.0, TimeGrid((1.0, 3.0)))


def test_uncensored_aj_is_empirical_fraction():
    observed, truth = simulate_cohort(family("markov-linear"), 300, tau=np.inf, seed=5)
    grid = TimeGrid.linspace(0.1, 6.0, 25)
    occ = aj_state_occupation(truth, grid).probabilities
    for m, t in enumerate(grid.points):
        states = truth.states_at(t)
        assert np.all(states > 0)
        frac = np.bincount(states, minlength=4)[1:] / states.size
        np.testing.assert_allclose(occ[m], frac, atol=1e-12)


def test_outputs_are_stochastic(small_cohort):
    ds, _ = small_cohort
    grid = default_grid(ds, 15, after=1.0)
    occ = aj_state_occupation(ds, grid).probabilities
    np.testing.assert_allclose(occ.sum(axis=1), 1.0, atol=1e-10)
    assert occ.min() >= -1e-12
    tp = aj_transition_probability(ds, 1.0, grid).matrices
    np.testing.assert_allclose(tp.sum(axis=2), 1.0, atol=1e-10)
    for dyn in (aj_dynamic_sop(ds, 1.0, grid), lmaj_dynamic_sop(ds, 1.0, grid)):
        for occ_j in dyn.by_state.values():
            np.testing.assert_allclose(occ_j.probabilities.sum(axis=1), 1.0, atol=1e-10)


def test_lmaj_is_aj_on_landmark_subset(small_cohort):
    ds, _ = small_cohort
    s = 1.0
    grid = default_grid(ds, 10, after=s)
    for j in (1, 2, 3):
        members = landmark_subset(ds, j, s)
        direct = aj_row(ds.subset(members), j, s, grid).probabilities
        np.testing.assert_allclose(lmaj_transition_probability(ds, j, s, grid).probabilities, direct, atol=1e-14)


def test_lmaj_equals_aj_when_everyone_is_in_j(illness_death):
    grid = TimeGrid((1.5, 2.5, 3.5))
    np.testing.assert_allclose(
        lmaj_transition_probability(illness_death, 1, 0.5, grid).probabilities,
        aj_row(illness_death, 1, 0.5, grid).probabilities,
        atol=1e-14,
    )


def test_empty_landmark(illness_death):
    with pytest.raises(EmptyLandmark):
        lmaj_transition_probability(illness_death, 2, 0.5, TimeGrid((1.0,)))
    dyn = lmaj_dynamic_sop(illness_death, 0.5, TimeGrid((1.0, 2.0)))
    assert set(dyn.empty_states) == {2, 3}


def test_aj_sop_matches_matrix_exponential():
    spec = family("markov-constant")
    _, truth = simulate_cohort(spec, 5000, seed=1)
    Q = np.zeros((3, 3))
    for (j, k), rate in zip(spec.graph.transitions, spec.baseline):
        Q[j - 1, k - 1] = rate
    Q -= np.diag(Q.sum(axis=1))
    grid = TimeGrid.linspace(0.1, 4.9, 40)
    est = aj_state_occupation(truth, grid).probabilities
    exact = np.array([expm(Q * t)[0] for t in grid.points])
    assert np.max(np.abs(est - exact)) <= 0.02


def test_time_grid_parse():
    g = TimeGrid.parse("0:10:30")
    assert g.M == 30 and g.points[0] == 0 and g.points[-1] == 10
    with pytest.raises(ValueError):
        TimeGrid((1.0, 1.0))
    with pytest.raises(ValueError):
        TimeGrid.parse("0:10")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_product_integral_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    records = []
    for i in range(rng.integers(2, 12)):
        t1 = float(rng.uniform(0.1, 3))
        if rng.random() < 0.4:
            records.append(TransitionRecord(i, 1, 1, 0.0, t1, 0))
            continue
        to = int(rng.choice([2, 3]))
        records.append(TransitionRecord(i, 1, to, 0.0, t1, 1))
        if to == 2:
            t2 = t1 + float(rng.uniform(0.1, 2))
            records.append(TransitionRecord(i, 2, 3 if rng.random() < 0.6 else 2, t1, t2, int(rng.random() < 0.6)))
    ds = MultiStateDataset.from_records(ILLNESS_DEATH, records)
    grid = TimeGrid.linspace(0.05, 5.0, 12)
    tp = aj_transition_probability(ds, 0.0, grid).matrices
    np.testing.assert_allclose(tp.sum(axis=2), 1.0, atol=1e-10)
    assert tp.min() >= -1e-12
