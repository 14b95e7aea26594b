"""Feed-forward multiclass classifier over feature vectors.

Plain numpy MLP: ReLU hidden layers, softmax output, weighted cross-entropy
loss, hand-written backpropagation, and mini-batch gradient descent with
momentum. Everything is deterministic for a fixed seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    DatasetIoError,
    FaultClass,
    PmDiagError,
    atomic_write_text,
    sha256_of_obj,
)

DEFAULT_LAYER_DIMS = (128, 64, 32, 5)
CLASS_NAMES = tuple(c.name for c in FaultClass)

# Probability floor: keeps softmax entries strictly inside (0, 1) under
# extreme logits and guards ln(0) in the loss.
PROB_FLOOR = 1e-12


class DimensionMismatchError(PmDiagError):
    """Input length does not match the model's input layer."""


class DegenerateDataError(PmDiagError):
    """Training data holds fewer than two classes."""


class EmptyClassError(PmDiagError):
    """A present class has a zero sample count."""


@dataclass
class MlpModel:
    """Layer dimensions plus per-layer weight matrices and bias vectors.

    weights[l] has shape (fan_in, fan_out); forward/predict are pure, but
    training updates parameters in place, so share models read-only.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    class_names: tuple[str, ...] = CLASS_NAMES

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        self.layer_dims = dims
        if len(dims) < 2:
            raise ValueError("need at least input and output layers")
        if dims[-1] != len(self.class_names):
            raise ValueError("output dim must equal the number of classes")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValueError("need one weight matrix and bias per layer transition")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[l], dims[l + 1]) or b.shape != (dims[l + 1],):
                raise ValueError(f"layer {l} parameter shape mismatch")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {l} has non-finite parameters")

    def parameter_count(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    class_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        object.__setattr__(self, "class_weights", tuple(float(w) for w in self.class_weights))
        if len(self.class_weights) != len(CLASS_NAMES):
            raise ValueError("class_weights must have one entry per class")
        if any(w <= 0 for w in self.class_weights):
            raise ValueError("class_weights must all be positive")

    def to_obj(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "class_weights": list(self.class_weights),
        }


@dataclass
class Gradients:
    """Same structure as the model parameters."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]


@dataclass
class TrainResult:
    model: MlpModel
    epoch_losses: list[float]


def class_weights(counts: "dict[FaultClass, int]") -> "dict[FaultClass, float]":
    """Inverse-frequency weights, normalized so their data-weighted mean is 1.

    w_c = N / (K * n_c) with N the total count and K the number of present
    classes. Classes absent from `counts` are excluded from training.
    """
    if not counts:
        raise EmptyClassError("no classes present")
    for cls, n in counts.items():
        if n <= 0:
            raise EmptyClassError(f"class {cls.name} has count {n}")
    total = sum(counts.values())
    k = len(counts)
    return {cls: total / (k * n) for cls, n in counts.items()}


def weight_vector(weights: "dict[FaultClass, float]") -> tuple[float, ...]:
    """Dense per-class weight tuple; absent classes get a placeholder 1.0."""
    return tuple(float(weights.get(cls, 1.0)) for cls in FaultClass)


def init_params(layer_dims=DEFAULT_LAYER_DIMS, seed: int = 0) -> MlpModel:
    """Uniform(-s, s) weights with s = sqrt(6 / fan_in); zero biases."""
    rng = np.random.default_rng(seed)
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        s = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-s, s, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(layer_dims=dims, weights=weights, biases=biases)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z) + PROB_FLOOR
    return e / e.sum(axis=-1, keepdims=True)


def _forward_batch(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Probabilities plus post-activation caches for backprop."""
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise DimensionMismatchError(
            f"input width {x.shape[-1]} != layer_dims[0] {model.layer_dims[0]}"
        )
    activations = [x]
    a = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        if l < last:
            a = np.maximum(z, 0.0)
            activations.append(a)
        else:
            return _softmax(z), activations
    raise AssertionError("unreachable")


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Class probability vector for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != model.layer_dims[0]:
        raise DimensionMismatchError(
            f"input length {x.size} != layer_dims[0] {model.layer_dims[0]}"
        )
    probs, _ = _forward_batch(model, x[None, :])
    return probs[0]


def _batch_arrays(batch) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(batch) == 0:
        raise ValueError("batch must be nonempty")
    xs, ys, ws = zip(*batch)
    x = np.asarray(np.stack([np.asarray(v, dtype=np.float64) for v in xs]))
    y = np.asarray([int(v) for v in ys], dtype=np.int64)
    w = np.asarray([float(v) for v in ws], dtype=np.float64)
    return x, y, w


def _loss_arrays(model: MlpModel, x, y, w) -> float:
    probs, _ = _forward_batch(model, x)
    p_true = probs[np.arange(len(y)), y]
    return float(np.mean(w * -np.log(np.maximum(p_true, PROB_FLOOR))))


def loss(model: MlpModel, batch) -> float:
    """Mean over the batch of -weight * ln(p_label), p clamped at 1e-12."""
    x, y, w = _batch_arrays(batch)
    return _loss_arrays(model, x, y, w)


def _grad_arrays(model: MlpModel, x, y, w) -> Gradients:
    n = len(y)
    probs, activations = _forward_batch(model, x)
    p_true = probs[np.arange(n), y]
    # items with clamped probability contribute a locally constant loss
    eff_w = np.where(p_true > PROB_FLOOR, w, 0.0)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta *= (eff_w / n)[:, None]

    grad_w = [np.empty(0)] * len(model.weights)
    grad_b = [np.empty(0)] * len(model.biases)
    for l in range(len(model.weights) - 1, -1, -1):
        grad_w[l] = activations[l].T @ delta
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ model.weights[l].T) * (activations[l] > 0.0)
    return Gradients(weights=grad_w, biases=grad_b)


def grad(model: MlpModel, batch) -> Gradients:
    """Analytic gradient of `loss` with respect to every weight and bias."""
    x, y, w = _batch_arrays(batch)
    return _grad_arrays(model, x, y, w)


def train(features, cfg: TrainConfig, layer_dims=DEFAULT_LAYER_DIMS) -> TrainResult:
    """Mini-batch momentum SGD over labelled feature vectors.

    `features` is a sequence of (FeatureVector, FaultClass) pairs. The epoch
    shuffle is seeded, so results are bit-reproducible for a fixed config.
    The learning rate decays linearly from cfg.learning_rate to zero across
    the epochs, so the final model settles instead of bouncing on gradient
    noise. The per-epoch log records the full-dataset loss after each epoch.
    """
    if not features:
        raise DegenerateDataError("no training data")
    labels = {label for _, label in features}
    if len(labels) < 2:
        raise DegenerateDataError("training data holds a single class")
    x = np.stack([np.asarray(fv.values, dtype=np.float64) for fv, _ in features])
    if x.shape[1] != layer_dims[0]:
        raise DimensionMismatchError(
            f"feature length {x.shape[1]} != layer_dims[0] {layer_dims[0]}"
        )
    y = np.asarray([int(label) for _, label in features], dtype=np.int64)
    cw = np.asarray(cfg.class_weights, dtype=np.float64)
    w = cw[y]

    mdl = init_params(layer_dims, cfg.seed)
    velocity_w = [np.zeros_like(m) for m in mdl.weights]
    velocity_b = [np.zeros_like(b) for b in mdl.biases]
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))

    n = len(y)
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * (1.0 - epoch / cfg.epochs)
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            g = _grad_arrays(mdl, x[idx], y[idx], w[idx])
            for l in range(len(mdl.weights)):
                velocity_w[l] = cfg.momentum * velocity_w[l] - lr * g.weights[l]
                velocity_b[l] = cfg.momentum * velocity_b[l] - lr * g.biases[l]
                mdl.weights[l] += velocity_w[l]
                mdl.biases[l] += velocity_b[l]
        epoch_losses.append(_loss_arrays(mdl, x, y, w))
    return TrainResult(model=mdl, epoch_losses=epoch_losses)


def argmax_class(probs: np.ndarray) -> FaultClass:
    """Most probable class; exact ties go to the lowest class code."""
    return FaultClass(int(np.argmax(probs)))


def predict(model: MlpModel, x: np.ndarray) -> tuple[FaultClass, np.ndarray]:
    probs = forward(model, x)
    return argmax_class(probs), probs


def predict_batch(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(argmax codes, probabilities) for a stack of feature vectors."""
    probs, _ = _forward_batch(model, np.asarray(x, dtype=np.float64))
    return probs.argmax(axis=1), probs


def model_digest(model: MlpModel) -> str:
    """Stable content digest binding a conformal predictor to its model."""
    return sha256_of_obj(
        {
            "layer_dims": list(model.layer_dims),
            "weights": [w.tolist() for w in model.weights],
            "biases": [b.tolist() for b in model.biases],
            "class_names": list(model.class_names),
        }
    )


def save_model(
    model: MlpModel,
    path: str | Path,
    train_config: TrainConfig | None = None,
    provenance: str | None = None,
) -> None:
    obj = {
        "layer_dims": list(model.layer_dims),
        "weights": [w.tolist() for w in model.weights],
        "biases": [b.tolist() for b in model.biases],
        "class_names": list(model.class_names),
        "train_config": train_config.to_obj() if train_config is not None else None,
        "provenance": provenance,
    }
    atomic_write_text(path, json.dumps(obj, sort_keys=True))


def load_model(path: str | Path) -> MlpModel:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetIoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIoError(f"{path} is not valid JSON: {exc.msg}") from None
    try:
        return MlpModel(
            layer_dims=tuple(obj["layer_dims"]),
            weights=[np.asarray(w, dtype=np.float64) for w in obj["weights"]],
            biases=[np.asarray(b, dtype=np.float64) for b in obj["biases"]],
            class_names=tuple(obj["class_names"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIoError(f"{path} is not a valid model file: {exc}") from None
