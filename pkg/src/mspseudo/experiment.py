"""Configured experiments: data, cross-validation, evaluation, outputs.

A config is a JSON object; :data:`DEFAULTS` lists every field.  The data
come either from a simulation family or from CSV files.  Pseudo values are
derived inside each training fold, so held-out subjects never enter a
jackknife.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io as msio
from .core import MultiStateDataset, validate_dataset
from .errors import ConfigError, EmptyLandmark, FoldTooSmall, MSAError, NonFiniteLoss
from .estimators import (
    TimeGrid,
    aj_row,
    aj_state_occupation,
    default_grid,
    lmaj_transition_probability,
)
from .metrics import MetricSeries, evaluate, target_label
from .model import (
    NetworkSpec,
    PredictionMatrix,
    TrainConfig,
    predict,
    train_linear_pseudo,
    train_mspseudo,
)
from .pseudo import TASKS, derive_pseudo_values
from .simulate import apply_incremental_censoring, apply_induced_censoring, family, simulate_cohort

log = logging.getLogger(__name__)

DEFAULTS = {
    "name": "experiment",
    "data": {
        "family": None,
        "n": 2000,
        "seed": 0,
        "tau": None,
        "censoring_rate": None,
        "records": None,
        "covariates": None,
        "graph": None,
    },
    "censoring": {"setting": "none", "rate": None},
    "task": "sop",
    "s": None,
    "grid": None,
    "grid_points": 20,
    "epsilon": 1,
    "alpha": 0.05,
    "test_choice": None,
    "n_permutations": 500,
    "model": {"hidden_layers": [64, 64], "activation": "relu", "dropout_rate": 0.1},
    "train": {"learning_rate": 1e-3, "batch_size": 256, "max_epochs": 10000, "patience": 100},
    "hyperparameters": [],
    "cv": {"folds": 5, "runs": 1},
    "evaluation": None,
    "seed": 0,
    "out": None,
}

# fields that cannot change results
_NOT_HASHED = ("out",)


class ExperimentError(MSAError):
    """A pipeline failure, tagged with the stage it happened in."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


def _merge(defaults, given, path=""):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise ConfigError(f"unknown config field {path + key!r}")
        if isinstance(defaults[key], dict) and key not in ("model", "train"):
            if not isinstance(value, dict):
                raise ConfigError(f"config field {path + key!r} must be an object")
            out[key] = _merge(defaults[key], value, path + key + ".")
        elif key in ("model", "train"):
            out[key] = {**defaults[key], **value}
        else:
            out[key] = value
    return out


def normalize_config(raw: dict, base_dir=None) -> dict:
    """Fill defaults and check task-dependent and file fields.

    Raises
    ------
    ConfigError
        Naming the offending field.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    if cfg["task"] not in TASKS:
        raise ConfigError(f"field 'task' must be one of {TASKS}, got {cfg['task']!r}")
    if cfg["task"] in ("dynamic-sop", "tp") and cfg["s"] is None:
        raise ConfigError(f"field 's' is required for task {cfg['task']!r}")
    data = cfg["data"]
    if (data["family"] is None) == (data["records"] is None):
        raise ConfigError("exactly one of 'data.family' and 'data.records' must be given")
    if data["records"] is not None:
        if data["covariates"] is None:
            raise ConfigError("field 'data.covariates' is required for file data")
        for key in ("records", "covariates", "graph"):
            if data[key] is None:
                continue
            p = Path(data[key])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            if not p.exists():
                raise ConfigError(f"file for 'data.{key}' not found: {p}")
            data[key] = str(p)
    else:
        family(data["family"])
    setting = cfg["censoring"]["setting"]
    if setting not in ("none", "incremental", "induced"):
        raise ConfigError(f"field 'censoring.setting' must be none, incremental or induced, got {setting!r}")
    if setting != "none":
        rate = cfg["censoring"]["rate"]
        if rate is None or not 0 < rate < 1:
            raise ConfigError("field 'censoring.rate' must be in (0, 1)")
        if data["family"] is None and setting == "incremental":
            raise ConfigError("incremental censoring needs 'data.family' to simulate new subjects")
    if cfg["evaluation"] is None:
        cfg["evaluation"] = "true-state" if data["family"] else "ipcw"
    if cfg["evaluation"] not in ("true-state", "ipcw"):
        raise ConfigError("field 'evaluation' must be 'true-state' or 'ipcw'")
    if cfg["evaluation"] == "true-state" and data["family"] is None:
        raise ConfigError("field 'evaluation': true-state scoring needs simulated data")
    if cfg["cv"]["folds"] < 2:
        raise ConfigError("field 'cv.folds' must be >= 2")
    if cfg["cv"]["runs"] < 1:
        raise ConfigError("field 'cv.runs' must be >= 1")
    try:
        TrainConfig(**cfg["train"])
        for over in cfg["hyperparameters"] or [{}]:
            _cell_spec(cfg, over, 1, 1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model/train settings: {exc}") from None
    return cfg


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return normalize_config(raw, Path(path).parent)


def config_hash(cfg: dict) -> str:
    """sha256 of the canonical JSON of the normalised config."""
    body = {k: v for k, v in cfg.items() if k not in _NOT_HASHED}
    text = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# data -----------------------------------------------------------------------


@dataclass
class ExperimentData:
    observed: MultiStateDataset
    reference: MultiStateDataset


def load_data(cfg: dict) -> ExperimentData:
    data = cfg["data"]
    setting = cfg["censoring"]["setting"]
    rate = cfg["censoring"]["rate"]
    if data["family"] is not None:
        spec = family(data["family"])
        seed = data["seed"]
        if setting == "incremental":
            n_base = int(round(data["n"] * (1 - rate)))
            base, truth = simulate_cohort(spec, n_base, tau=np.inf, seed=seed)
            observed, truth = apply_incremental_censoring(base, rate, spec, seed, truth)
        elif setting == "induced":
            truth, _ = simulate_cohort(spec, data["n"], tau=np.inf, seed=seed)
            observed = apply_induced_censoring(truth, rate, seed)
        else:
            observed, truth = simulate_cohort(
                spec, data["n"], tau=data["tau"], censoring_rate=data["censoring_rate"], seed=seed
            )
        return ExperimentData(observed, truth)
    graph = msio.read_graph(data["graph"]) if data["graph"] else None
    observed = msio.read_records(data["records"], graph, covariates=data["covariates"])
    validate_dataset(observed)
    if setting == "induced":
        observed = apply_induced_censoring(observed, rate, data["seed"])
    return ExperimentData(observed, observed)


def experiment_grid(cfg: dict, observed: MultiStateDataset) -> TimeGrid:
    after = float(cfg["s"]) if cfg["task"] != "sop" else 0.0
    if cfg["grid"] is not None:
        grid = TimeGrid.parse(cfg["grid"]) if isinstance(cfg["grid"], str) else TimeGrid(tuple(cfg["grid"]))
        if cfg["task"] != "sop" and grid.points[0] <= after:
            raise ConfigError(f"field 'grid' must start after s={after}")
        return grid
    return default_grid(observed, cfg["grid_points"], after=after)


# cross-validation -------------------------------------------------------------


def fold_assignment(n: int, k: int, strata=None, seed: int = 0, run: int = 0) -> np.ndarray:
    """Fold label ``0..k-1`` per subject, balanced within each stratum."""
    rng = np.random.default_rng([int(seed), int(run), 11])
    strata = np.zeros(n, dtype=np.int64) if strata is None else np.asarray(strata)
    folds = np.empty(n, dtype=np.int64)
    offset = 0
    for level in np.unique(strata):
        idx = rng.permutation(np.nonzero(strata == level)[0])
        folds[idx] = (np.arange(idx.size) + offset) % k
        offset += idx.size
    return folds


def _cell_spec(cfg, over, in_dim, out_dim):
    model = {**cfg["model"], **{k: v for k, v in over.items() if k in cfg["model"]}}
    train = {**cfg["train"], **{k: v for k, v in over.items() if k in cfg["train"]}}
    unknown = set(over) - set(cfg["model"]) - set(cfg["train"])
    if unknown:
        raise ValueError(f"unknown hyperparameter(s) {sorted(unknown)}")
    return NetworkSpec(in_dim, out_dim, **model), train


@dataclass
class FoldResult:
    run: int
    fold: int
    series: dict  # model name -> MetricSeries
    errors: dict  # model name -> message
    decisions: list
    checkpoints: dict = field(default_factory=dict)


def _eligible(task, states_s, graph):
    if task == "sop":
        return np.ones(states_s.size, dtype=bool)
    ok = states_s > 0
    if task == "tp":
        has_out = np.array([False] + [bool(graph.outgoing(k)) for k in graph.states])
        ok &= has_out[states_s]
    return ok


def _reference_predictions(train, task, grid, s, states_te, estimator):
    """Population curves from the training fold, one row per test subject."""
    graph = train.graph
    if task == "sop":
        probs = aj_state_occupation(train, grid).probabilities.T
        return np.repeat(probs[None], states_te.size, axis=0), graph.states
    rows = {}
    for j in np.unique(states_te):
        j = int(j)
        try:
            if estimator == "AJ":
                rows[j] = aj_row(train, j, s, grid).probabilities.T
            else:
                rows[j] = lmaj_transition_probability(train, j, s, grid).probabilities.T
        except EmptyLandmark:
            rows[j] = aj_row(train, j, s, grid).probabilities.T
    full = np.stack([rows[int(j)] for j in states_te])
    if task == "dynamic-sop":
        return full, graph.states
    vals = np.stack([full[:, k - 1] for j, k in graph.transitions], axis=1)
    return vals, graph.transitions


def _run_fold(cfg, data, grid, folds, run, fold, seed_base):
    observed = data.observed
    task = cfg["task"]
    s = float(cfg["s"]) if cfg["s"] is not None else None
    graph = observed.graph
    test = folds == fold
    train = observed.subset(~test)
    if train.n_subjects < graph.K or test.sum() < graph.K:
        raise FoldTooSmall(f"fold {fold} of run {run} has fewer than K={graph.K} subjects")
    cell_seed = int(seed_base + 7919 * run + 104729 * fold)

    table = derive_pseudo_values(
        train,
        task,
        grid,
        s=s,
        epsilon=cfg["epsilon"],
        test_choice=cfg["test_choice"],
        alpha=cfg["alpha"],
        seed=cell_seed,
        n_permutations=cfg["n_permutations"],
    )
    pos = np.array([train.index_of(i) for i in table.subject_ids], dtype=np.int64)
    X_tr = train.covariates[pos]
    strata = train.final_states[pos]

    te_idx = np.nonzero(test)[0]
    states_s = observed.states_at(s) if s is not None else np.zeros(observed.n_subjects, dtype=np.int64)
    te_idx = te_idx[_eligible(task, states_s[te_idx], graph)]
    te_ids = [observed.subject_ids[i] for i in te_idx]
    X_te = observed.covariates[te_idx]
    lm_te = states_s[te_idx] if task != "sop" else None
    K = graph.K
    mode = cfg["evaluation"]

    series, errors, checkpoints = {}, {}, {}

    def score(name, pm):
        series[name] = evaluate(pm, data.reference, te_ids, lm_te, mode)

    configs = cfg["hyperparameters"] or [{}]
    n_out = table.values.shape[1] * grid.M
    in_dim = X_tr.shape[1] + (K if task != "sop" else 0)
    for c, over in enumerate(configs):
        name = "msPseudo" if len(configs) == 1 else f"msPseudo[{c}]"
        spec, train_kw = _cell_spec(cfg, over, in_dim, n_out)
        spec = replace(spec, seed=cell_seed)
        tc = TrainConfig(**train_kw, seed=cell_seed)
        try:
            model, _ = train_mspseudo(X_tr, table, spec, tc, strata=strata, num_states=K)
        except NonFiniteLoss as exc:
            errors[name] = f"NonFiniteLoss: {exc}"
            continue
        score(name, predict(model, X_te, lm_te))
        checkpoints[name] = model.to_dict()

    tc = TrainConfig(**cfg["train"], seed=cell_seed)
    try:
        lin, _ = train_linear_pseudo(X_tr, table, tc, strata=strata, num_states=K)
        score("LinearPseudo", predict(lin, X_te, lm_te))
        checkpoints["LinearPseudo"] = lin.to_dict()
    except NonFiniteLoss as exc:
        errors["LinearPseudo"] = f"NonFiniteLoss: {exc}"

    estimators = ["AJ"] if task == "sop" else ["AJ", "LMAJ"]
    for est in estimators:
        vals, targets = _reference_predictions(train, task, grid, s, lm_te if lm_te is not None else te_idx, est)
        score(est, PredictionMatrix(vals, task, grid, tuple(targets)))

    decisions = [dict(d, run=run, fold=fold) for d in table.decisions]
    return FoldResult(run, fold, series, errors, decisions, checkpoints)


@dataclass
class CVResult:
    folds: list
    configs: list
    best: int | None
    config_scores: list  # per config: dict(mean/std iBS, iAUC, errors)

    def models(self) -> list:
        names = []
        for fr in self.folds:
            for name in fr.series:
                if name not in names:
                    names.append(name)
        return names


def _stats(values):
    v = np.array([x for x in values if np.isfinite(x)])
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def cross_validate(cfg: dict, data: ExperimentData, grid: TimeGrid, threads: int = 1) -> CVResult:
    """``runs x folds`` cross-validation of every hyperparameter config.

    Results are collected in (run, fold) order, whatever the number of
    threads.
    """
    observed = data.observed
    k, runs = cfg["cv"]["folds"], cfg["cv"]["runs"]
    if observed.n_subjects < k * observed.graph.K:
        raise FoldTooSmall(f"{observed.n_subjects} subjects cannot fill {k} folds of at least K={observed.graph.K}")
    jobs = []
    for run in range(runs):
        folds = fold_assignment(observed.n_subjects, k, observed.final_states, cfg["seed"], run)
        for fold in range(k):
            jobs.append((folds, run, fold))

    def work(job):
        folds, run, fold = job
        return _run_fold(cfg, data, grid, folds, run, fold, cfg["seed"])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]

    configs = cfg["hyperparameters"] or [{}]
    scores = []
    for c in range(len(configs)):
        name = "msPseudo" if len(configs) == 1 else f"msPseudo[{c}]"
        ibs = [fr.series[name].avg_brier for fr in results if name in fr.series]
        iauc = [fr.series[name].avg_auc for fr in results if name in fr.series]
        errs = [fr.errors[name] for fr in results if name in fr.errors]
        m_ibs, s_ibs = _stats(ibs)
        m_auc, s_auc = _stats(iauc)
        scores.append(
            {"config": c, "mean_ibs": m_ibs, "std_ibs": s_ibs, "mean_iauc": m_auc, "std_iauc": s_auc, "errors": errs}
        )
    finite = [sc for sc in scores if not sc["errors"] and np.isfinite(sc["mean_ibs"])]
    best = min(finite, key=lambda sc: (sc["mean_ibs"], sc["config"]))["config"] if finite else None
    return CVResult(results, configs, best, scores)


# aggregation and outputs ------------------------------------------------------


def mean_series(series_list) -> MetricSeries:
    first = series_list[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN columns stay NaN
        B, A, ib, ia = (
            np.nanmean(np.stack([getattr(s, a) for s in series_list]), axis=0)
            for a in ("brier", "auc", "integrated_brier", "integrated_auc")
        )
    return MetricSeries(first.grid, first.targets, B, A, ib, ia, first.weighting)


def summarize(cv: CVResult) -> dict:
    """Model name -> fold-averaged :class:`MetricSeries`.  With a
    hyperparameter grid, ``msPseudo`` is the selected configuration."""
    out = {}
    names = cv.models()
    for name in names:
        out[name] = mean_series([fr.series[name] for fr in cv.folds if name in fr.series])
    if len(cv.configs) > 1 and cv.best is not None:
        out = {("msPseudo" if n == f"msPseudo[{cv.best}]" else n): v for n, v in out.items()}
    order = ["msPseudo", "LinearPseudo", "AJ", "LMAJ"]
    return {n: out[n] for n in sorted(out, key=lambda n: (order.index(n) if n in order else 4, n))}


def _fmt(x):
    return msio.fmt(x)


def run_experiment(cfg: dict, out_dir=None, threads: int = 1) -> dict:
    """Run the whole pipeline and write its outputs.

    Returns the manifest.  On failure the manifest (with the failed stage)
    is still written before :class:`ExperimentError` is raised.
    """
    out = Path(out_dir or cfg["out"] or f"results/{cfg['name']}")
    out.mkdir(parents=True, exist_ok=True)
    stages = {}
    manifest = {
        "name": cfg["name"],
        "config_hash": config_hash(cfg),
        "config": {k: v for k, v in cfg.items() if k not in _NOT_HASHED},
        "seeds": {
            "experiment": cfg["seed"],
            "data": cfg["data"]["seed"],
            "fold_assignment": [[cfg["seed"], r, 11] for r in range(cfg["cv"]["runs"])],
            "cell": "seed + 7919*run + 104729*fold",
        },
        "stages": stages,
    }

    def stage(name, fn):
        try:
            result = fn()
        except MSAError as exc:
            stages[name] = f"failed: {type(exc).__name__}: {exc}"
            _finish(out, manifest, False)
            raise ExperimentError(name, exc) from exc
        stages[name] = "ok"
        return result

    data = stage("data", lambda: load_data(cfg))
    grid = stage("grid", lambda: experiment_grid(cfg, data.observed))
    cv = stage("cross-validation", lambda: cross_validate(cfg, data, grid, threads))
    summary = stage("evaluate", lambda: summarize(cv))
    stage("write", lambda: _write_outputs(out, cfg, grid, cv, summary))
    manifest["selected_config"] = cv.best
    manifest["outputs"] = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file() and p.name != "manifest.json")
    _finish(out, manifest, True)
    return manifest


def _finish(out, manifest, ok):
    manifest["status"] = "success" if ok else "failed"
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_outputs(out: Path, cfg, grid, cv: CVResult, summary: dict):
    first = next(iter(summary.values()))
    labels = [target_label(t) for t in first.targets]
    rows = []
    for name, ser in summary.items():
        rows.append([name, "iBS", *map(_fmt, ser.integrated_brier), _fmt(ser.avg_brier)])
        rows.append([name, "iAUC", *map(_fmt, ser.integrated_auc), _fmt(ser.avg_auc)])
    msio.write_rows(out / "summary.csv", ["model", "metric", *labels, "Avg"], rows)

    series_dir = out / "series"
    series_dir.mkdir(exist_ok=True)
    for name, ser in summary.items():
        (series_dir / f"{name}.csv").write_text(ser.to_csv())

    cv_rows = [
        [sc["config"], json.dumps(cv.configs[sc["config"]], sort_keys=True), _fmt(sc["mean_ibs"]),
         _fmt(sc["std_ibs"]), _fmt(sc["mean_iauc"]), _fmt(sc["std_iauc"]), "; ".join(sc["errors"])]
        for sc in cv.config_scores
    ]
    msio.write_rows(
        out / "cv.csv", ["config", "hyperparameters", "mean_ibs", "std_ibs", "mean_iauc", "std_iauc", "errors"], cv_rows
    )

    folds = []
    for fr in cv.folds:
        row = {"run": fr.run, "fold": fr.fold, "errors": fr.errors}
        row["integrated"] = {
            n: {"iBS": s.integrated_brier.tolist(), "iAUC": s.integrated_auc.tolist()} for n, s in fr.series.items()
        }
        folds.append(row)
    (out / "folds.json").write_text(json.dumps(folds, indent=1, sort_keys=True, default=_json_default) + "\n")

    decisions = [d for fr in cv.folds for d in fr.decisions]
    (out / "decisions.json").write_text(json.dumps(decisions, indent=1, sort_keys=True, default=_json_default) + "\n")

    ck = out / "checkpoints"
    ck.mkdir(exist_ok=True)
    for fr in cv.folds:
        for name, state in fr.checkpoints.items():
            path = ck / f"{name}_run{fr.run}_fold{fr.fold}.json"
            path.write_text(json.dumps(state) + "\n")
    (out / "grid.json").write_text(json.dumps(list(grid.points)) + "\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (tuple, set)):
        return list(o)
    return str(o)
