"""Fully-connected regressor trained by mini-batch gradient descent.

Layers are affine maps ``h @ W.T + b`` with W shaped (out, in); hidden
layers apply tanh or ReLU, the scalar output layer is linear. The loss is
MSE + l2 * (sum of squared weights), biases excluded.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from app.errors import (
    DatasetError,
    DimensionMismatchError,
    DivergenceError,
    ModelError,
    ModelFormatError,
    ModelVersionError,
)
from app.schemas import Activation, Hyperparams, Optimizer
from app.services.dataset import Dataset, StandardizationStats

logger = logging.getLogger(__name__)

MODEL_MAGIC = "ETCHVM-MODEL"
MODEL_VERSION = "v1"


@dataclass(frozen=True, eq=False)
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: Activation
    standardization: StandardizationStats

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or dims[-1] != 1:
            raise DimensionMismatchError(f"layer dims must end in a single output, got {dims}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise DimensionMismatchError("one weight matrix and bias vector per layer transition")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise DimensionMismatchError(f"layer {k} parameters do not match dims {dims[k]}->{dims[k + 1]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ModelError(f"layer {k} has non-finite parameters")
        if self.standardization.dim != dims[0]:
            raise DimensionMismatchError("standardization length differs from the input dimension")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(np.array(W, dtype=float) for W in self.weights))
        object.__setattr__(self, "biases", tuple(np.array(b, dtype=float) for b in self.biases))

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def params(self) -> list[np.ndarray]:
        return [p.copy() for pair in zip(self.weights, self.biases) for p in pair]

    def with_params(self, params: Sequence[np.ndarray]) -> "MlpModel":
        return MlpModel(
            layer_dims=self.layer_dims,
            weights=tuple(params[0::2]),
            biases=tuple(params[1::2]),
            activation=self.activation,
            standardization=self.standardization,
        )

    def sum_squared_weights(self) -> float:
        return float(sum(np.sum(W * W) for W in self.weights))


@dataclass(frozen=True)
class TrainingCurve:
    train_loss: tuple[float, ...]
    val_loss: tuple[float, ...]
    stopped_epoch: int
    restored_epoch: int
    monitor: str = "val"


@dataclass
class Gradients:
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)

    def flat(self) -> list[np.ndarray]:
        return [g for pair in zip(self.weights, self.biases) for g in pair]


def _act(name: Activation, z: np.ndarray) -> np.ndarray:
    if name == Activation.TANH:
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _act_grad(name: Activation, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == Activation.TANH:
        return 1.0 - a * a
    return (z > 0).astype(float)


def init_model(
    input_dim: int,
    hp: Hyperparams,
    standardization: Optional[StandardizationStats] = None,
) -> MlpModel:
    """Fan-in scaled uniform weights U(-sqrt(3/fan_in), sqrt(3/fan_in)), zero biases."""
    if input_dim < 1:
        raise DimensionMismatchError("input_dim must be >= 1")
    dims = (input_dim, *hp.hidden_layers, 1)
    rng = np.random.default_rng(hp.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpModel(
        layer_dims=dims,
        weights=tuple(weights),
        biases=tuple(biases),
        activation=hp.activation,
        standardization=standardization or StandardizationStats.identity(input_dim),
    )


def _forward_all(model: MlpModel, X: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Pre-activations and activations for every layer; activations[0] is the input."""
    activations = [X]
    pre = []
    last = len(model.weights) - 1
    h = X
    for k, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        pre.append(z)
        h = z if k == last else _act(model.activation, z)
        activations.append(h)
    return pre, activations


def predict_batch(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Predictions for already standardized rows."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.input_dim:
        raise DimensionMismatchError(f"model expects {model.input_dim} features, got {X.shape[1]}")
    _, activations = _forward_all(model, X)
    return activations[-1][:, 0]


def forward(model: MlpModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.input_dim,):
        raise DimensionMismatchError(f"model expects {model.input_dim} features, got shape {x.shape}")
    return float(predict_batch(model, x[None, :])[0])


def predict_raw(model: MlpModel, X_raw: np.ndarray) -> np.ndarray:
    """Predictions for raw feature rows, applying the stored standardization first."""
    return predict_batch(model, model.standardization.transform(np.atleast_2d(X_raw)))


def loss_and_grad(
    model: MlpModel,
    batch: tuple[np.ndarray, np.ndarray],
    l2: float = 0.0,
) -> tuple[float, Gradients]:
    X, y = batch
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    if n == 0:
        raise DatasetError("loss of an empty batch")
    pre, activations = _forward_all(model, X)
    resid = activations[-1][:, 0] - y
    loss = float(resid @ resid) / n + l2 * model.sum_squared_weights()

    grads = Gradients(weights=[None] * len(model.weights), biases=[None] * len(model.biases))
    delta = (2.0 / n) * resid[:, None]  # dL/dz of the output layer
    for k in range(len(model.weights) - 1, -1, -1):
        grads.weights[k] = delta.T @ activations[k] + 2.0 * l2 * model.weights[k]
        grads.biases[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k]) * _act_grad(model.activation, pre[k - 1], activations[k])
    return loss, grads


def effective_learning_rate(lr: float, decay: float, step: int) -> float:
    """Inverse-time decay over update steps."""
    return lr / (1.0 + decay * step)


def mse_of(model: MlpModel, ds: Dataset) -> float:
    if ds.is_empty:
        return math.nan
    resid = predict_batch(model, ds.X()) - ds.y()
    return float(resid @ resid) / len(resid)


class _Adam:
    def __init__(self, params: list[np.ndarray], hp: Hyperparams):
        self.b1, self.b2, self.eps = hp.adam_beta1, hp.adam_beta2, hp.adam_epsilon
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float, t: int) -> None:
        c1 = 1.0 - self.b1 ** (t + 1)
        c2 = 1.0 - self.b2 ** (t + 1)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(
    model: MlpModel,
    train_set: Dataset,
    val_set: Optional[Dataset],
    hp: Hyperparams,
) -> tuple[MlpModel, TrainingCurve]:
    """Train with seeded per-epoch shuffles, early stopping and best-epoch restoration.

    With an empty validation set the training MSE is monitored instead. Training
    stops after es_patience consecutive epochs without an improvement larger than
    es_min_delta over the best loss so far (the untrained model included);
    es_patience=0 stops at the first such epoch.
    """
    if train_set.is_empty:
        raise DatasetError("cannot train on an empty training set")
    if val_set is not None and val_set.has_synthetic():
        raise DatasetError("validation set contains synthetic examples")
    if train_set.feature_dim != model.input_dim:
        raise DimensionMismatchError(f"model expects {model.input_dim} features, training set has {train_set.feature_dim}")

    # shuffles depend only on (seed, epoch), never on the order the caller passed
    ordered = train_set.canonical()
    X, y = ordered.X(), ordered.y()
    n = X.shape[0]
    has_val = val_set is not None and not val_set.is_empty
    monitor = "val" if has_val else "train"

    params = model.params()
    current = _unchecked(model, params)
    adam = _Adam(params, hp) if hp.optimizer == Optimizer.ADAM else None
    step = 0

    train_curve: list[float] = []
    val_curve: list[float] = []
    best_value = math.inf
    best_params = [p.copy() for p in params]
    best_epoch = 0
    # improvement is measured against the untrained model, so epoch 1 can already count as a miss
    patience_ref = mse_of(current, val_set) if has_val else float(np.mean((predict_batch(current, X) - y) ** 2))
    if not math.isfinite(patience_ref):
        patience_ref = math.inf
    wait = 0
    stopped = hp.epochs

    for epoch in range(1, hp.epochs + 1):
        order = np.random.default_rng([hp.seed, epoch]).permutation(n)
        for start in range(0, n, hp.batch_size):
            idx = order[start:start + hp.batch_size]
            loss, grads = loss_and_grad(current, (X[idx], y[idx]), hp.l2)
            if not math.isfinite(loss):
                raise DivergenceError("training loss is not finite", epoch=epoch)
            lr = effective_learning_rate(hp.learning_rate, hp.decay, step)
            flat = grads.flat()
            if adam is not None:
                adam.step(params, flat, lr, step)
            else:
                for p, g in zip(params, flat):
                    p -= lr * g
            step += 1

        if not all(np.all(np.isfinite(p)) for p in params):
            raise DivergenceError("parameters became non-finite", epoch=epoch)
        train_mse = float(np.mean((predict_batch(current, X) - y) ** 2))
        val_mse = mse_of(current, val_set) if has_val else math.nan
        if not math.isfinite(train_mse) or (has_val and not math.isfinite(val_mse)):
            raise DivergenceError("epoch loss is not finite", epoch=epoch)
        train_curve.append(train_mse)
        val_curve.append(val_mse)

        value = val_mse if has_val else train_mse
        if value < best_value:
            best_value = value
            best_params = [p.copy() for p in params]
            best_epoch = epoch
        if value < patience_ref - hp.es_min_delta:
            patience_ref = value
            wait = 0
        else:
            wait += 1
        logger.debug(
            "Epoch finished",
            extra={"epoch": epoch, "train_loss": train_mse, "val_loss": val_mse, "wait": wait},
        )
        # patience only runs down on epochs that fail to improve; 0 stops at the first such epoch
        if wait and wait >= hp.es_patience:
            stopped = epoch
            break

    restored = model.with_params(best_params)
    curve = TrainingCurve(
        train_loss=tuple(train_curve),
        val_loss=tuple(val_curve),
        stopped_epoch=stopped,
        restored_epoch=best_epoch,
        monitor=monitor,
    )
    logger.info(
        "Training finished",
        extra={"epoch": stopped, "restored_epoch": best_epoch, "monitor": monitor, "best_loss": best_value},
    )
    return restored, curve


def _unchecked(model: MlpModel, params: list[np.ndarray]) -> MlpModel:
    """Model view over live parameter arrays, skipping validation inside the update loop."""
    clone = object.__new__(MlpModel)
    object.__setattr__(clone, "layer_dims", model.layer_dims)
    object.__setattr__(clone, "weights", tuple(params[0::2]))
    object.__setattr__(clone, "biases", tuple(params[1::2]))
    object.__setattr__(clone, "activation", model.activation)
    object.__setattr__(clone, "standardization", model.standardization)
    return clone


# --- checkpoint ---


def _fmt(values: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))


def save_model(model: MlpModel, path: Union[str, Path]) -> None:
    stats = model.standardization
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"activation {model.activation.value}",
        "dims " + " ".join(str(d) for d in model.layer_dims),
        "fitted_on " + " ".join(stats.fitted_on),
        "mu " + _fmt(stats.mu),
        "sigma " + _fmt(stats.sigma),
    ]
    for W, b in zip(model.weights, model.biases):
        lines.extend(_fmt(row) for row in W)
        lines.append(_fmt(b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _floats(line: str, expected: int, what: str, path: Path) -> np.ndarray:
    try:
        values = np.array([float(tok) for tok in line.split()], dtype=float)
    except ValueError:
        raise ModelFormatError(f"{path}: non-numeric value in {what}") from None
    if values.shape[0] != expected:
        raise ModelFormatError(f"{path}: {what} has {values.shape[0]} values, declared dims require {expected}")
    return values


def _field(line: str, name: str, path: Path) -> str:
    key, _, rest = line.partition(" ")
    if key != name:
        raise ModelFormatError(f"{path}: expected '{name}' line, got {line[:40]!r}")
    return rest.strip()


def load_model(path: Union[str, Path]) -> MlpModel:
    path = Path(path)
    if not path.is_file():
        raise ModelFormatError(f"{path}: model file not found")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ModelFormatError(f"{path}: empty model file")
    magic, _, version = lines[0].partition(" ")
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not a model checkpoint")
    if version.strip() != MODEL_VERSION:
        raise ModelVersionError(f"{path}: unsupported checkpoint version {version.strip()!r}")
    if len(lines) < 6:
        raise ModelFormatError(f"{path}: truncated header")

    try:
        activation = Activation(_field(lines[1], "activation", path))
    except ValueError:
        raise ModelFormatError(f"{path}: unknown activation") from None
    try:
        dims = [int(tok) for tok in _field(lines[2], "dims", path).split()]
    except ValueError:
        raise ModelFormatError(f"{path}: malformed dims line") from None
    if len(dims) < 2 or dims[-1] != 1 or any(d < 1 for d in dims):
        raise ModelFormatError(f"{path}: invalid layer dims {dims}")
    fitted_on = tuple(_field(lines[3], "fitted_on", path).split())
    mu = _floats(_field(lines[4], "mu", path), dims[0], "mu", path)
    sigma = _floats(_field(lines[5], "sigma", path), dims[0], "sigma", path)

    expected = 6 + sum(d_out + 1 for d_out in dims[1:])
    body = lines[6:]
    if len(lines) < expected:
        raise ModelFormatError(f"{path}: truncated, expected {expected} lines, found {len(lines)}")
    if len(lines) > expected and any(l.strip() for l in lines[expected:]):
        raise ModelFormatError(f"{path}: trailing data after {expected} lines; declared dims do not match")

    weights, biases = [], []
    pos = 0
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        rows = [_floats(body[pos + r], d_in, f"layer {k} weight row {r}", path) for r in range(d_out)]
        pos += d_out
        weights.append(np.vstack(rows))
        biases.append(_floats(body[pos], d_out, f"layer {k} bias", path))
        pos += 1
    try:
        return MlpModel(
            layer_dims=tuple(dims),
            weights=tuple(weights),
            biases=tuple(biases),
            activation=activation,
            standardization=StandardizationStats(mu=mu, sigma=sigma, fitted_on=fitted_on),
        )
    except (DimensionMismatchError, ModelError, DatasetError) as e:
        raise ModelFormatError(f"{path}: {e}") from e
