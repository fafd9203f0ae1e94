"""Feedforward pseudo-value regression (msPseudo) and its linear baseline.

The network maps covariates to ``targets x M`` probabilities through
independent sigmoid outputs and is fitted to pseudo values by (masked) mean
squared error with Adam.  ``LinearPseudo`` is the same model without hidden
layers.  Everything is float64 numpy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import NonFiniteLoss, ShapeMismatch
from .estimators import TimeGrid

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mspseudo-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int
    output_dim: int
    hidden_layers: tuple = (64, 64)
    activation: str = "relu"
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_layers", tuple(int(h) for h in self.hidden_layers))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if any(h < 1 for h in self.hidden_layers):
            raise ValueError("hidden layer widths must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 10000
    patience: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    validation_fraction: float = 0.2
    standardize: bool = True
    n_shards: int = 1

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.batch_size < 1 or self.n_shards < 1:
            raise ValueError("batch_size and n_shards must be >= 1")


class MLP:
    """Dense network with sigmoid outputs.

    ``params`` alternates weight matrices and bias vectors:
    ``[W1, b1, ..., WL, bL]``.
    """

    def __init__(self, spec: NetworkSpec, params=None):
        self.spec = spec
        if params is None:
            rng = np.random.default_rng(spec.seed)
            params = []
            dims = [spec.input_dim, *spec.hidden_layers, spec.output_dim]
            for layer, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
                hidden = layer < len(dims) - 2
                if hidden and spec.activation == "relu":
                    limit = np.sqrt(6.0 / fan_in)
                else:
                    limit = np.sqrt(6.0 / (fan_in + fan_out))
                params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
                params.append(np.zeros(fan_out))
        self.params = [np.array(p, dtype=np.float64) for p in params]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def _act(self, z):
        return np.maximum(z, 0.0) if self.spec.activation == "relu" else np.tanh(z)

    def _act_grad(self, z, a):
        return (z > 0).astype(float) if self.spec.activation == "relu" else 1.0 - a * a

    def forward(self, X, rng=None):
        """Return outputs and the cache needed by :meth:`backward`.

        Dropout is applied to hidden activations only when ``rng`` is given.
        """
        a = np.asarray(X, dtype=np.float64)
        cache = []
        rate = self.spec.dropout_rate
        for layer in range(self.n_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            z = a @ W + b
            if layer == self.n_layers - 1:
                out = expit(z)
                cache.append((a, z, out, None))
                return out, cache
            h = self._act(z)
            keep = None
            if rng is not None and rate > 0:
                keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
                h_out = h * keep
            else:
                h_out = h
            cache.append((a, z, h, keep))
            a = h_out

    def predict(self, X):
        return self.forward(X)[0]

    def backward(self, cache, d_out):
        """Gradients of a loss with ``dL/d(output) = d_out``."""
        grads = [None] * len(self.params)
        a, z, out, _ = cache[-1]
        delta = d_out * out * (1.0 - out)
        for layer in range(self.n_layers - 1, -1, -1):
            a, z, h, keep = cache[layer]
            if layer != self.n_layers - 1:
                delta = delta * (keep if keep is not None else 1.0) * self._act_grad(z, h)
            grads[2 * layer] = a.T @ delta
            grads[2 * layer + 1] = delta.sum(axis=0)
            if layer:
                delta = delta @ self.params[2 * layer].T
        return grads


def masked_mse(pred, target, mask=None):
    """Mean of squared errors over the cells where ``mask`` is True."""
    diff = pred - target
    if mask is None:
        return float(np.mean(diff * diff))
    count = mask.sum()
    return float(np.sum(diff * diff * mask) / count) if count else 0.0


def loss_and_grad(net: MLP, X, Y, mask=None, rng=None, n_shards: int = 1):
    """Masked MSE and its gradient.  With ``n_shards > 1`` the batch is
    split, per-shard gradients are computed separately and summed in shard
    order."""
    if mask is None:
        mask = np.ones(Y.shape, dtype=bool)
    total = mask.sum()
    if total == 0:
        return 0.0, [np.zeros_like(p) for p in net.params]
    loss = 0.0
    grads = [np.zeros_like(p) for p in net.params]
    for idx in np.array_split(np.arange(X.shape[0]), n_shards):
        if idx.size == 0:
            continue
        out, cache = net.forward(X[idx], rng)
        m = mask[idx]
        diff = (out - Y[idx]) * m
        loss += float(np.sum(diff * diff))
        for g, part in zip(grads, net.backward(cache, 2.0 * diff / total)):
            g += part
    return loss / total, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainHistory:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    best_epoch: int = 0
    best_loss: float = float("inf")
    stopped_early: bool = False


@dataclass(frozen=True)
class PredictionMatrix:
    """``values[i, t, m]`` in ``[0, 1]`` for subject ``i``, target ``t`` and
    grid point ``m``."""

    values: np.ndarray
    task: str
    grid: TimeGrid
    targets: tuple


class PseudoModel:
    """Trained network plus the input preprocessing and output layout."""

    def __init__(
        self,
        net: MLP,
        task: str,
        grid: TimeGrid,
        targets: tuple,
        num_states: int,
        x_mean=None,
        x_scale=None,
        landmark_features: bool = False,
    ):
        self.net = net
        self.task = task
        self.grid = grid
        self.targets = tuple(targets)
        self.num_states = int(num_states)
        p = net.spec.input_dim - (num_states if landmark_features else 0)
        self.x_mean = np.zeros(p) if x_mean is None else np.asarray(x_mean, dtype=float)
        self.x_scale = np.ones(p) if x_scale is None else np.asarray(x_scale, dtype=float)
        self.landmark_features = landmark_features

    @property
    def spec(self) -> NetworkSpec:
        return self.net.spec

    def design(self, covariates, landmark_states=None) -> np.ndarray:
        X = np.asarray(covariates, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.x_mean.size:
            raise ShapeMismatch(f"expected {self.x_mean.size} covariates, got shape {X.shape}")
        X = (X - self.x_mean) / self.x_scale
        if self.landmark_features:
            if landmark_states is None:
                raise ShapeMismatch("landmark states are required for this model")
            X = np.hstack([X, one_hot(landmark_states, self.num_states)])
        return X

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "task": self.task,
            "grid": list(self.grid.points),
            "targets": [list(t) if isinstance(t, tuple) else t for t in self.targets],
            "num_states": self.num_states,
            "landmark_features": self.landmark_features,
            "spec": asdict(self.spec),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "weights": [p.tolist() for p in self.net.params],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PseudoModel":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise ValueError("not a model checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')}")
        spec = NetworkSpec(**data["spec"])
        net = MLP(spec, [np.array(w, dtype=float) for w in data["weights"]])
        targets = tuple(tuple(t) if isinstance(t, list) else t for t in data["targets"])
        return cls(
            net,
            data["task"],
            TimeGrid(tuple(data["grid"])),
            targets,
            data["num_states"],
            data["x_mean"],
            data["x_scale"],
            data["landmark_features"],
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "PseudoModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def one_hot(states, K) -> np.ndarray:
    states = np.asarray(states, dtype=np.int64)
    out = np.zeros((states.size, K))
    ok = states > 0
    out[np.nonzero(ok)[0], states[ok] - 1] = 1.0
    return out


def stratified_split(n: int, fraction: float, strata=None, seed: int = 0) -> np.ndarray:
    """Boolean mask selecting about ``fraction`` of ``0..n-1`` from every
    stratum."""
    rng = np.random.default_rng([int(seed), 7])
    val = np.zeros(n, dtype=bool)
    if fraction <= 0 or n < 2:
        return val
    strata = np.zeros(n, dtype=np.int64) if strata is None else np.asarray(strata)
    for level in np.unique(strata):
        idx = np.nonzero(strata == level)[0]
        take = int(round(fraction * idx.size))
        if take:
            val[rng.permutation(idx)[:take]] = True
    if val.all():
        val[rng.integers(n)] = False
    return val


def _table_arrays(pseudo):
    """``(Y, mask, task, grid, targets, landmark_states)`` from a table or
    a bare array."""
    if hasattr(pseudo, "membership"):
        Y, mask = pseudo.flat()
        return Y, mask, pseudo.task, pseudo.grid, pseudo.targets, pseudo.landmark_states
    Y = np.asarray(pseudo, dtype=float)
    if Y.ndim == 3:
        n, T, M = Y.shape
        Y = Y.reshape(n, T * M)
    else:
        T, M = Y.shape[1], 1
    mask = ~np.isnan(Y)
    return np.nan_to_num(Y), mask, "custom", TimeGrid(tuple(range(1, M + 1))), tuple(range(T)), None


def train_mspseudo(
    covariates,
    pseudo,
    spec: NetworkSpec | None = None,
    cfg: TrainConfig | None = None,
    split=None,
    strata=None,
    num_states: int | None = None,
    landmark_features: bool | None = None,
):
    """Fit the network to pseudo values.

    Parameters
    ----------
    covariates : ndarray, shape (n, p)
        Rows aligned with the pseudo-value subjects.
    pseudo : PseudoValueTable or ndarray
        Targets; NaN cells (or cells outside the table's membership) are
        left out of the loss.
    spec : NetworkSpec, optional
        ``input_dim``/``output_dim`` are filled in from the data when they
        disagree with it being ``0``-like defaults; pass ``None`` for the
        default architecture.
    cfg : TrainConfig
    split : ndarray of bool, optional
        Validation mask for early stopping; by default a stratified
        ``cfg.validation_fraction`` split over ``strata``.

    Returns
    -------
    model : PseudoModel
    history : TrainHistory
    """
    cfg = cfg or TrainConfig()
    Y, mask, task, grid, targets, lm_states = _table_arrays(pseudo)
    X_raw = np.asarray(covariates, dtype=float)
    if X_raw.ndim != 2 or X_raw.shape[0] != Y.shape[0]:
        raise ShapeMismatch(f"covariates {X_raw.shape} do not align with {Y.shape[0]} pseudo-value rows")
    landmark_features, K = _landmark_layout(pseudo, landmark_features, num_states)

    if cfg.standardize:
        x_mean = X_raw.mean(axis=0)
        x_scale = X_raw.std(axis=0)
        x_scale[x_scale == 0] = 1.0
    else:
        x_mean = x_scale = None
    extra = K if landmark_features else 0
    in_dim = X_raw.shape[1] + extra
    if spec is None:
        spec = NetworkSpec(in_dim, Y.shape[1])
    elif spec.input_dim != in_dim or spec.output_dim != Y.shape[1]:
        raise ShapeMismatch(
            f"network expects {spec.input_dim}->{spec.output_dim}, data gives {in_dim}->{Y.shape[1]}"
        )
    net = MLP(spec)
    model = PseudoModel(net, task, grid, targets, K, x_mean, x_scale, landmark_features)
    X = model.design(X_raw, lm_states if landmark_features else None)

    # start the output bias at the logit of the mean target
    col_mean = np.clip(np.sum(Y * mask, 0) / np.maximum(mask.sum(0), 1), 1e-3, 1 - 1e-3)
    net.params[-1][:] = np.log(col_mean / (1 - col_mean))

    n = X.shape[0]
    if split is None:
        split = stratified_split(n, cfg.validation_fraction, strata, cfg.seed)
    split = np.asarray(split, dtype=bool)
    tr = np.nonzero(~split)[0]
    va = np.nonzero(split)[0]
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps_adam)
    hist = TrainHistory()
    best = [p.copy() for p in net.params]
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
        _fit(net, opt, X, Y, mask, tr, va, cfg, rng, hist, best)
    for p, b in zip(net.params, best):
        p[...] = b
    log.debug("trained %s: best epoch %d, loss %.5f", spec.hidden_layers, hist.best_epoch, hist.best_loss)
    return model, hist


def _fit(net, opt, X, Y, mask, tr, va, cfg, rng, hist, best):
    stale = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = tr[rng.permutation(tr.size)]
        for start in range(0, order.size, cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grad(net, X[b], Y[b], mask[b], rng, cfg.n_shards)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLoss(epoch, cfg.learning_rate)
            opt.step(grads)
        train_loss = masked_mse(net.predict(X[tr]), Y[tr], mask[tr])
        if not np.isfinite(train_loss):
            raise NonFiniteLoss(epoch, cfg.learning_rate)
        hist.train.append(train_loss)
        monitored = train_loss
        if va.size:
            monitored = masked_mse(net.predict(X[va]), Y[va], mask[va])
            hist.validation.append(monitored)
        if monitored < hist.best_loss:
            hist.best_loss, hist.best_epoch = monitored, epoch
            for b, p in zip(best, net.params):
                b[...] = p
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                hist.stopped_early = True
                break


def _landmark_layout(pseudo, landmark_features=None, num_states=None):
    """Whether the landmark-state one-hot is appended to the inputs, and
    its width."""
    task = getattr(pseudo, "task", "custom")
    if landmark_features is None:
        landmark_features = task in ("dynamic-sop", "tp")
    if num_states is None:
        num_states = 1
        if landmark_features:
            num_states = int(np.max(pseudo.landmark_states, initial=1))
            if task == "dynamic-sop":
                num_states = max(num_states, len(pseudo.targets))
    return landmark_features, int(num_states)


def train_linear_pseudo(covariates, pseudo, cfg: TrainConfig | None = None, **kwargs):
    """Sigmoid-of-affine baseline: :func:`train_mspseudo` with no hidden
    layers and no dropout."""
    Y, *_ = _table_arrays(pseudo)
    lm, K = _landmark_layout(pseudo, kwargs.get("landmark_features"), kwargs.get("num_states"))
    kwargs.update(landmark_features=lm, num_states=K)
    in_dim = np.asarray(covariates).shape[1] + (K if lm else 0)
    spec = NetworkSpec(in_dim, Y.shape[1], hidden_layers=(), dropout_rate=0.0, seed=(cfg or TrainConfig()).seed)
    return train_mspseudo(covariates, pseudo, spec, cfg, **kwargs)


def predict(model: PseudoModel, covariates, landmark_states=None, renormalize: bool = False) -> PredictionMatrix:
    """Deterministic forward pass (dropout off).

    ``renormalize`` rescales state-occupation predictions to sum to one at
    each grid point; off by default.
    """
    X = model.design(covariates, landmark_states)
    out = model.net.predict(X)
    T, M = len(model.targets), model.grid.M
    values = out.reshape(out.shape[0], T, M)
    if renormalize and model.task in ("sop", "dynamic-sop"):
        values = values / values.sum(axis=1, keepdims=True)
    return PredictionMatrix(values, model.task, model.grid, model.targets)


def with_defaults(spec_fields: dict | None, input_dim: int, output_dim: int) -> NetworkSpec:
    fields = dict(spec_fields or {})
    fields.update(input_dim=input_dim, output_dim=output_dim)
    return NetworkSpec(**fields)


__all__ = [
    "Adam",
    "MLP",
    "NetworkSpec",
    "PredictionMatrix",
    "PseudoModel",
    "TrainConfig",
    "TrainHistory",
    "loss_and_grad",
    "masked_mse",
    "predict",
    "replace",
    "stratified_split",
    "train_linear_pseudo",
    "train_mspseudo",
]
