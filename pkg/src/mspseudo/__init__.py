"""Pseudo-value regression for multi-state survival analysis."""

from .core import MultiStateDataset, TransitionGraph, TransitionRecord, validate_dataset
from .errors import MSAError
from .estimators import (
    TimeGrid,
    aj_dynamic_sop,
    aj_state_occupation,
    aj_transition_probability,
    lmaj_dynamic_sop,
    lmaj_transition_probability,
)
from .markov_tests import TestResult, ca_global_test, logrank_transition_test
from .metrics import MetricSeries, auc_series, brier_series, evaluate
from .model import NetworkSpec, PredictionMatrix, TrainConfig, predict, train_linear_pseudo, train_mspseudo
from .pseudo import PseudoValueTable, derive_pseudo_values

__version__ = "0.1.0"
