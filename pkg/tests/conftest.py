import numpy as np
import pytest

from mspseudo.core import MultiStateDataset, TransitionGraph, TransitionRecord

ILLNESS_DEATH = TransitionGraph(3, [(1, 2), (1, 3), (2, 3)])


def illness_death_records():
    """A: 1->2 at 1, 2->3 at 3.  B: 1->3 at 2.  C: censored in 1 at 2.5."""
    return [
        TransitionRecord("A", 1, 2, 0.0, 1.0, 1),
        TransitionRecord("A", 2, 3, 1.0, 3.0, 1),
        TransitionRecord("B", 1, 3, 0.0, 2.0, 1),
        TransitionRecord("C", 1, 1, 0.0, 2.5, 0),
    ]


@pytest.fixture
def illness_death():
    cov = {"A": [0.5, 1.0], "B": [-1.0, 0.0], "C": [0.0, 2.0]}
    return MultiStateDataset.from_records(ILLNESS_DEATH, illness_death_records(), cov, horizon=4.0)


# hand-computed AJ occupation at 0.5, 1.5, 2.5, 3.5
ILLNESS_DEATH_GRID = (0.5, 1.5, 2.5, 3.5)
ILLNESS_DEATH_SOP = np.array(
    [
        [1, 0, 0],
        [2 / 3, 1 / 3, 0],
        [1 / 3, 1 / 3, 1 / 3],
        [1 / 3, 0, 2 / 3],
    ]
)
# hand-computed pseudo values 3*theta - 2*theta(-i), shape (subject, time, state)
ILLNESS_DEATH_PSEUDO = np.array(
    [
        [[1, 0, 0], [0, 1, 0], [0, 1, 0], [0, 0, 1]],
        [[1, 0, 0], [1, 0, 0], [0, 0, 1], [0, 0, 1]],
        [[1, 0, 0], [1, 0, 0], [1, 0, 0], [1, 0, 0]],
    ],
    dtype=float,
)


@pytest.fixture
def small_cohort():
    from mspseudo.simulate import family, simulate_cohort

    observed, truth = simulate_cohort(family("nonmarkov-linear"), 150, censoring_rate=0.5, seed=3)
    return observed, truth
