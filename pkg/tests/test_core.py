import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mspseudo.core import (
    MultiStateDataset,
    TransitionGraph,
    TransitionRecord,
    counting_process,
    event_timeline,
    infer_graph,
    state_at,
    validate_dataset,
)
from mspseudo.errors import GraphError, UnknownSubject, ValidationError

from conftest import ILLNESS_DEATH, illness_death_records


def test_graph_basics():
    g = ILLNESS_DEATH
    assert g.K == 3 and g.Q == 3
    assert g.is_absorbing(3) and not g.is_absorbing(1)
    assert g.outgoing(1) == [(1, 2), (1, 3)]
    assert g.allowed[2, 3] and not g.allowed[3, 1]
    assert TransitionGraph.from_dict(g.to_dict()) == g


def test_graph_rejects_bad_transitions():
    with pytest.raises((GraphError, ValueError)):
        TransitionGraph(2, [(1, 1)])
    with pytest.raises((GraphError, ValueError)):
        TransitionGraph(2, [(1, 3)])


def test_infer_graph():
    g = infer_graph([1, 2, 1], [2, 3, 1], [1, 1, 0])
    assert set(g.transitions) == {(1, 2), (2, 3)}
    assert g.is_absorbing(3)


def test_valid_fixture_passes(illness_death):
    assert validate_dataset(illness_death) is illness_death


def _codes(records, graph=ILLNESS_DEATH, cov=None):
    ds = MultiStateDataset.from_records(graph, records, cov)
    with pytest.raises(ValidationError) as err:
        validate_dataset(ds)
    return err.value.codes


def test_validation_codes():
    R = TransitionRecord
    assert "IllegalTransition" in _codes([R(1, 2, 1, 0, 1, 1)])
    assert "IllegalTransition" in _codes([R(1, 1, 3, 0, 1, 1), R(1, 3, 1, 1, 2, 0)])
    assert "InvalidTime" in _codes([R(1, 1, 2, 2, 1, 1)])
    assert "InvalidStatus" in _codes([R(1, 1, 2, 0, 1, 7)])
    assert "CensoredNotLast" in _codes([R(1, 1, 1, 0, 1, 0), R(1, 1, 2, 1, 2, 1)])
    assert "NonChainingPath" in _codes([R(1, 1, 2, 0, 1, 1), R(1, 1, 3, 1, 2, 1)])
    assert "NonChainingPath" in _codes([R(1, 1, 2, 0, 1, 1), R(1, 2, 3, 1.5, 2, 1)])
    assert "OverlappingIntervals" in _codes([R(1, 1, 2, 0, 1, 1), R(1, 2, 3, 0.5, 2, 1)])
    assert "MissingCovariates" in _codes([R(1, 1, 2, 0, 1, 1), R(2, 1, 2, 0, 1, 1)], cov={1: [0.0]})


def test_validation_collects_all_issues():
    R = TransitionRecord
    ds = MultiStateDataset.from_records(ILLNESS_DEATH, [R(1, 2, 1, 0, 1, 1), R(2, 1, 2, 3, 1, 1)])
    with pytest.raises(ValidationError) as err:
        validate_dataset(ds)
    assert {i.subject_id for i in err.value.issues} == {1, 2}


def test_states_at(illness_death):
    ds = illness_death
    np.testing.assert_array_equal(ds.states_at(0.5), [1, 1, 1])
    np.testing.assert_array_equal(ds.states_at(1.0), [2, 1, 1])
    np.testing.assert_array_equal(ds.states_at(2.5), [2, 3, 1])
    np.testing.assert_array_equal(ds.states_at(3.5), [3, 3, 0])
    assert state_at(ds, "C", 3.0) is None
    assert state_at(ds, "A", 10.0) == 3
    with pytest.raises(UnknownSubject):
        state_at(ds, "Z", 1.0)


def test_subject_summaries(illness_death):
    ds = illness_death
    np.testing.assert_array_equal(ds.final_states, [3, 3, 1])
    np.testing.assert_array_equal(ds.censored, [False, False, True])
    np.testing.assert_array_equal(ds.absorbed, [True, True, False])
    assert ds.censoring_rate() == pytest.approx(1 / 3)


def test_counting_process_hand_values(illness_death):
    cp = counting_process(illness_death)
    np.testing.assert_array_equal(cp.times, [1, 2, 3])
    np.testing.assert_array_equal(cp.at_risk, [[3, 0, 0], [2, 1, 0], [0, 1, 0]])
    assert cp.events[0, 0, 1] == 1 and cp.events[1, 0, 2] == 1 and cp.events[2, 1, 2] == 1
    assert cp.events.sum() == 3
    snaps = event_timeline(illness_death)
    assert [s.time for s in snaps] == [1.0, 2.0, 3.0]
    assert snaps[1].event_counts == (0, 1, 0)


def test_censored_subject_at_risk_at_its_censoring_time():
    R = TransitionRecord
    ds = MultiStateDataset.from_records(ILLNESS_DEATH, [R(1, 1, 2, 0, 2, 1), R(2, 1, 1, 0, 2, 0)])
    cp = counting_process(ds)
    assert cp.at_risk[0, 0] == 2


def test_subset_and_drop(illness_death):
    sub = illness_death.drop(0)
    assert sub.subject_ids == ("B", "C")
    assert sub.n_records == 2
    np.testing.assert_array_equal(sub.covariates, illness_death.covariates[1:])


@st.composite
def paths(draw):
    n = draw(st.integers(1, 8))
    records = []
    for i in range(n):
        t, state = 0.0, 1
        for _ in range(draw(st.integers(1, 3))):
            dt = draw(st.floats(0.1, 2.0))
            nxt = {1: [2, 3], 2: [3]}[state]
            if draw(st.booleans()) and state != 3:
                to = draw(st.sampled_from(nxt))
                records.append(TransitionRecord(i, state, to, t, t + dt, 1))
                t, state = t + dt, to
                if state == 3:
                    break
            else:
                records.append(TransitionRecord(i, state, state, t, t + dt, 0))
                break
        else:
            if state != 3:
                records.append(TransitionRecord(i, state, state, t, t + 0.5, 0))
    return records


@settings(max_examples=60, deadline=None)
@given(paths())
def test_generated_paths_validate_and_states_are_consistent(records):
    ds = validate_dataset(MultiStateDataset.from_records(ILLNESS_DEATH, records))
    for t in (0.0, 0.7, 1.9, 5.0):
        states = ds.states_at(t)
        for i, sid in enumerate(ds.subject_ids):
            s = state_at(ds, sid, t)
            assert states[i] == (0 if s is None else s)
