"""Desk-scale differentiable classifiers over flat parameter vectors.

Two classifiers (softmax regression and a one-hidden-layer tanh network) plus
a ``quadratic`` surrogate whose per-sample loss is ``0.5 * ||w - x||^2``. The
surrogate has smoothness 1 and data variability 1 exactly, which makes it the
test bed for the convergence-bound diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .numkit import DTYPE

KINDS = ("softmax_linear", "mlp1", "quadratic")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int = 2
    hidden_dim: int = 0
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.kind != "quadratic" and self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kind == "mlp1":
            if self.hidden_dim < 1:
                raise ValueError("mlp1 needs hidden_dim >= 1")
            if self.activation != "tanh":
                raise ValueError("mlp1 supports only the tanh activation")

    @property
    def param_count(self) -> int:
        d, C, H = self.input_dim, self.num_classes, self.hidden_dim
        if self.kind == "softmax_linear":
            return (d + 1) * C
        if self.kind == "mlp1":
            return (d + 1) * H + (H + 1) * C
        return d

    @property
    def is_classifier(self) -> bool:
        return self.kind != "quadratic"


def param_count(spec: ModelSpec) -> int:
    return spec.param_count


@dataclass(frozen=True)
class Batch:
    """Features ``(n, d)`` and integer labels ``(n,)``.

    ``index`` holds each row's position in the parent dataset. When present,
    losses and gradients accumulate in ascending-index order, so a reshuffled
    batch gives bit-identical results.
    """

    features: np.ndarray
    labels: np.ndarray
    index: np.ndarray | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=DTYPE)
        if X.ndim == 1:
            X = X.reshape(1, -1)
        y = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if X.shape[0] == 0:
            raise ValueError("batch is empty")
        if X.shape[0] != y.shape[0]:
            raise ValueError(f"batch has {X.shape[0]} feature rows but {y.shape[0]} labels")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.index is not None:
            idx = np.asarray(self.index, dtype=np.int64).reshape(-1)
            if idx.shape[0] != y.shape[0]:
                raise ValueError("batch index length differs from batch size")
            object.__setattr__(self, "index", idx)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def ordered(self) -> "Batch":
        if self.index is None or np.all(self.index[:-1] <= self.index[1:]):
            return self
        order = np.argsort(self.index, kind="stable")
        return Batch(self.features[order], self.labels[order], self.index[order])


def _check(spec: ModelSpec, w: np.ndarray, batch: Batch) -> Batch:
    if w.shape != (spec.param_count,):
        raise ValueError(f"parameter vector has shape {w.shape}, model expects ({spec.param_count},)")
    if batch.features.shape[1] != spec.input_dim:
        raise ValueError(
            f"batch features have dimension {batch.features.shape[1]}, model expects {spec.input_dim}"
        )
    if spec.is_classifier and (batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes):
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    return batch.ordered()


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform draws on [-0.05, 0.05]."""
    return rng.uniform(-0.05, 0.05, size=spec.param_count)


def logits(spec: ModelSpec, w: np.ndarray, features: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(features, dtype=DTYPE)
    if spec.kind == "softmax_linear":
        return kernels.linear_logits(w, X, spec.num_classes)
    if spec.kind == "mlp1":
        return kernels.mlp_logits(w, X, spec.hidden_dim, spec.num_classes)
    raise ValueError("the quadratic surrogate has no logits")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grad(
    spec: ModelSpec,
    w: np.ndarray,
    batch: Batch,
    soft_targets: np.ndarray | None = None,
    kl: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean loss over ``batch`` and its gradient.

    With ``soft_targets`` (rows of class probabilities aligned with the
    ordered batch) the loss gains ``kl * KL(soft_targets || softmax(logits))``.
    """
    batch = _check(spec, w, batch)
    if spec.kind == "quadratic":
        diff = w[None, :] - batch.features
        return 0.5 * float(np.mean(np.sum(diff * diff, axis=1))), diff.mean(axis=0)
    q = None if soft_targets is None or kl == 0.0 else np.ascontiguousarray(soft_targets, dtype=DTYPE)
    if spec.kind == "softmax_linear":
        return kernels.linear_loss_grad(w, batch.features, batch.labels, spec.num_classes, q, float(kl))
    return kernels.mlp_loss_grad(
        w, batch.features, batch.labels, spec.hidden_dim, spec.num_classes, q, float(kl)
    )


def loss(spec: ModelSpec, w: np.ndarray, batch: Batch) -> float:
    return loss_and_grad(spec, w, batch)[0]


def grad(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    return loss_and_grad(spec, w, batch)[1]


def per_sample_grads(spec: ModelSpec, w: np.ndarray, batch: Batch) -> np.ndarray:
    """Row ``i`` is the gradient of the loss on sample ``i`` alone."""
    batch = _check(spec, w, batch)
    out = np.empty((len(batch), spec.param_count))
    for i in range(len(batch)):
        out[i] = loss_and_grad(spec, w, Batch(batch.features[i : i + 1], batch.labels[i : i + 1]))[1]
    return out


def predict(spec: ModelSpec, w: np.ndarray, features: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(logits(spec, w, features), axis=1)


def accuracy(spec: ModelSpec, w: np.ndarray, dataset) -> float:
    """Fraction of samples whose arg-max class equals the label.

    ``dataset`` is anything with ``features`` and ``labels`` arrays.
    """
    if not spec.is_classifier:
        raise ValueError("accuracy is undefined for the quadratic surrogate")
    labels = np.asarray(dataset.labels)
    if labels.size == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    return float(np.mean(predict(spec, w, dataset.features) == labels))
