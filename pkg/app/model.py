"""
Trainable probabilistic classifiers, losses, and predictive entropy.

Two model kinds are supported: multinomial logistic regression and an MLP with
one ReLU hidden layer. Both train with Adam and early stopping; everything that
consumes a model only relies on `predict_proba`.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Optional, Protocol, Tuple, Union

import numpy as np

from app.core import Dataset, RngSpec
from app.errors import DomainError, SchemaError, ShapeError, TrainingError

logger = logging.getLogger(__name__)

PROBA_CLAMP = 1e-12


class ModelKind(str, Enum):
    LOGISTIC_REGRESSION = "logistic_regression"
    MLP = "mlp_1hidden"


class LossKind(str, Enum):
    CROSS_ENTROPY = "cross_entropy"
    ZERO_ONE = "zero_one"


MODEL_ALIASES = {
    "logreg": ModelKind.LOGISTIC_REGRESSION,
    "logistic_regression": ModelKind.LOGISTIC_REGRESSION,
    "mlp": ModelKind.MLP,
    "mlp_1hidden": ModelKind.MLP,
}


def model_kind(name: Union[str, ModelKind]) -> ModelKind:
    if isinstance(name, ModelKind):
        return name
    try:
        return MODEL_ALIASES[name]
    except KeyError:
        raise DomainError(f"Unknown model kind: {name}")


class ProbabilisticModel(Protocol):
    """Anything that maps feature rows onto class probability rows."""

    n_classes: int
    input_dim: int

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        ...


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for `train`; epochs=0 returns the initialization."""

    hidden_units: int = 32
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        positive = {
            "hidden_units": self.hidden_units,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "eps": self.eps,
            "patience": self.patience,
        }
        for name, value in positive.items():
            if not value > 0:
                raise DomainError(f"TrainConfig.{name} must be positive, got {value}")
        if self.epochs < 0:
            raise DomainError(f"TrainConfig.epochs must be >= 0, got {self.epochs}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise DomainError("Adam betas must lie in (0, 1)")
        if not 0 <= self.validation_fraction < 1:
            raise DomainError(f"validation_fraction must lie in [0, 1), got {self.validation_fraction}")


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


@dataclass
class TrainedModel:
    """Parameters of a fitted classifier plus its training history."""

    kind: ModelKind
    params: Dict[str, np.ndarray]
    n_classes: int
    input_dim: int
    history: Dict[str, float] = field(default_factory=dict)

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim:
            raise ShapeError(f"Model expects {self.input_dim} features, got {x.shape[-1]}")
        if self.kind == ModelKind.LOGISTIC_REGRESSION:
            return x @ self.params["W"] + self.params["b"]
        hidden = np.maximum(x @ self.params["W1"] + self.params["b1"], 0.0)
        return hidden @ self.params["W2"] + self.params["b2"]

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        """Softmax probabilities for a row [d] or a matrix [n, d]."""
        return softmax(self.logits(x))

    def loss_and_gradients(self, x: np.ndarray, y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
        """
        Mean cross-entropy and its analytic gradient for every parameter.

        Args:
            x: Feature matrix [n, d]
            y: Class ids [n]

        Returns:
            (loss, gradients keyed like `params`)
        """
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n = x.shape[0]
        onehot = np.zeros((n, self.n_classes))
        onehot[np.arange(n), y] = 1.0

        if self.kind == ModelKind.LOGISTIC_REGRESSION:
            logits = x @ self.params["W"] + self.params["b"]
            loss = -float(np.mean(log_softmax(logits)[np.arange(n), y]))
            dlogits = (softmax(logits) - onehot) / n
            return loss, {"W": x.T @ dlogits, "b": dlogits.sum(axis=0)}

        pre = x @ self.params["W1"] + self.params["b1"]
        hidden = np.maximum(pre, 0.0)
        logits = hidden @ self.params["W2"] + self.params["b2"]
        loss = -float(np.mean(log_softmax(logits)[np.arange(n), y]))
        dlogits = (softmax(logits) - onehot) / n
        dhidden = (dlogits @ self.params["W2"].T) * (pre > 0)
        return loss, {
            "W1": x.T @ dhidden,
            "b1": dhidden.sum(axis=0),
            "W2": hidden.T @ dlogits,
            "b2": dlogits.sum(axis=0),
        }

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind.value,
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "parameters": {name: value.tolist() for name, value in self.params.items()},
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, payload: Dict) -> "TrainedModel":
        try:
            kind = ModelKind(payload["kind"])
            params = {name: np.asarray(value, dtype=np.float64) for name, value in payload["parameters"].items()}
            model = cls(
                kind=kind,
                params=params,
                n_classes=int(payload["n_classes"]),
                input_dim=int(payload["input_dim"]),
                history=dict(payload.get("history", {})),
            )
        except (KeyError, ValueError) as e:
            raise SchemaError(f"Invalid model file: {e}")
        expected = {"W", "b"} if kind == ModelKind.LOGISTIC_REGRESSION else {"W1", "b1", "W2", "b2"}
        if set(params) != expected:
            raise SchemaError(f"Model of kind {kind.value} needs parameters {sorted(expected)}")
        return model


def init_model(kind: Union[str, ModelKind], input_dim: int, n_classes: int,
               config: TrainConfig) -> TrainedModel:
    """Zero output layer; He-normal hidden weights for the MLP."""
    kind = model_kind(kind)
    if kind == ModelKind.LOGISTIC_REGRESSION:
        params = {"W": np.zeros((input_dim, n_classes)), "b": np.zeros(n_classes)}
    else:
        rng = RngSpec(config.seed).stream("model.init")
        h = config.hidden_units
        params = {
            "W1": rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, h)),
            "b1": np.zeros(h),
            "W2": np.zeros((h, n_classes)),
            "b2": np.zeros(n_classes),
        }
    return TrainedModel(kind=kind, params=params, n_classes=n_classes, input_dim=input_dim)


def _mean_ce(model: TrainedModel, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(losses(LossKind.CROSS_ENTROPY, model.predict_proba(x), y)))


def train(kind: Union[str, ModelKind], data: Dataset, config: Optional[TrainConfig] = None,
          n_classes: Optional[int] = None) -> TrainedModel:
    """
    Fit a classifier with Adam, mini-batches, and early stopping.

    Args:
        kind: Model kind (or alias "logreg" / "mlp")
        data: Labeled training data without missing values
        config: Hyperparameters; the seed makes training deterministic
        n_classes: Class count; defaults to the count implied by the labels

    Returns:
        TrainedModel holding the parameters with the best validation loss
    """
    config = config or TrainConfig()
    if not data.has_labels:
        raise TrainingError("Training data has no labels")
    if data.has_missing:
        raise TrainingError("Training data contains missing values; impute first")
    classes = np.unique(data.labels)
    if classes.size < 2:
        raise TrainingError(f"Training data holds a single class ({int(classes[0])})")
    n_classes = max(n_classes or 0, data.n_classes)

    model = init_model(kind, data.d, n_classes, config)
    x, y = np.asarray(data.features), np.asarray(data.labels)
    rng = RngSpec(config.seed).stream("model.train")

    # Hold out a validation split for early stopping
    order = rng.permutation(data.n)
    n_val = int(round(config.validation_fraction * data.n))
    if n_val >= data.n:
        n_val = 0
    val_idx, train_idx = order[:n_val], order[n_val:]
    x_train, y_train = x[train_idx], y[train_idx]
    x_val, y_val = (x[val_idx], y[val_idx]) if n_val > 0 else (x_train, y_train)

    m = {name: np.zeros_like(p) for name, p in model.params.items()}
    v = {name: np.zeros_like(p) for name, p in model.params.items()}
    step = 0
    best_val = _mean_ce(model, x_val, y_val)
    best_params = {name: p.copy() for name, p in model.params.items()}
    stale = 0
    epochs_run = 0

    for epoch in range(config.epochs):
        perm = rng.permutation(x_train.shape[0])
        for start in range(0, perm.size, config.batch_size):
            batch = perm[start:start + config.batch_size]
            _, grads = model.loss_and_gradients(x_train[batch], y_train[batch])
            step += 1
            for name, grad in grads.items():
                m[name] = config.beta1 * m[name] + (1 - config.beta1) * grad
                v[name] = config.beta2 * v[name] + (1 - config.beta2) * grad ** 2
                m_hat = m[name] / (1 - config.beta1 ** step)
                v_hat = v[name] / (1 - config.beta2 ** step)
                model.params[name] = model.params[name] - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
        epochs_run = epoch + 1

        val_loss = _mean_ce(model, x_val, y_val)
        if val_loss < best_val:
            best_val = val_loss
            best_params = {name: p.copy() for name, p in model.params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.debug(f"Early stopping after epoch {epochs_run} (best validation loss {best_val:.6f})")
                break

    model.params = best_params
    model.history = {
        "train_loss": _mean_ce(model, x_train, y_train),
        "validation_loss": _mean_ce(model, x_val, y_val),
        "train_accuracy": float(np.mean(np.argmax(model.predict_proba(x), axis=1) == y)),
        "epochs_run": epochs_run,
    }
    logger.info(
        f"✓ Trained {model.kind.value} on {data.n} samples: "
        f"train loss {model.history['train_loss']:.4f}, validation loss {model.history['validation_loss']:.4f}"
    )
    return model


def predict_proba(model: ProbabilisticModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities for one row or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ShapeError(f"Model expects {model.input_dim} features, got {x.shape[-1]}")
    return model.predict_proba(x)


def losses(kind: Union[str, LossKind], p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Per-row loss of probability rows against class ids.

    Args:
        kind: cross_entropy (natural log, probabilities clamped at 1e-12) or zero_one
        p: Probabilities [..., C]
        y: Class ids [...]

    Returns:
        Loss values [...]
    """
    kind = LossKind(kind)
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = p.shape[-1]
    if np.any(y < 0) or np.any(y >= n_classes):
        raise DomainError(f"Class id out of range 0..{n_classes - 1}")
    picked = np.take_along_axis(p, y[..., None], axis=-1)[..., 0]
    if kind == LossKind.CROSS_ENTROPY:
        return -np.log(np.clip(picked, PROBA_CLAMP, 1.0))
    return (np.argmax(p, axis=-1) != y).astype(np.float64)


def loss(kind: Union[str, LossKind], p: np.ndarray, y: int) -> float:
    """Loss of a single probability vector against class `y`."""
    return float(losses(kind, np.asarray(p)[None, :], np.asarray([y]))[0])


def entropy(p: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats over the last axis, with 0·ln 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    safe = np.where(p > 0, p, 1.0)
    return -np.sum(np.where(p > 0, p * np.log(safe), 0.0), axis=-1)


def save_model(model: TrainedModel, path: Union[str, Path]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(model.to_dict(), f, indent=2)


def load_model(path: Union[str, Path]) -> TrainedModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except FileNotFoundError:
        raise FileNotFoundError(f"File not found: {path}")
    except json.JSONDecodeError as e:
        raise SchemaError(f"Invalid JSON in {path}: {e}")
    return TrainedModel.from_dict(payload)
