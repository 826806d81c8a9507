"""Training objectives: cross-entropy, softened KL divergence, and their mix.

The KL term treats the teacher logits as constants, so its gradient with
respect to the teacher is identically zero. No temperature-squared rescaling
is applied anywhere: the distillation objective is a single loss term, so the
factor would only rescale the learning rate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, MissingLabelsError
from .tensor import Tensor, add, add_scalar, log_softmax, mean, mul, mul_scalar, sum_

PROB_FLOOR = 1e-12


class Mode(str, enum.Enum):
    CE_ONLY = "ce"
    KL_ONLY = "kl"
    MIXED = "mixed"


@dataclass(frozen=True)
class ObjectiveSpec:
    """Objective selector: pure cross-entropy, pure distillation, or a blend."""

    mode: Mode
    lam: float = 0.0
    rho: float = 4.0

    def __post_init__(self):
        if self.rho <= 0:
            raise ConfigError(f"temperature must be positive, got {self.rho}")
        if self.mode == Mode.CE_ONLY and self.lam != 0.0:
            raise ConfigError("cross-entropy-only objective requires lambda = 0")
        if self.mode == Mode.KL_ONLY and self.lam != 1.0:
            raise ConfigError("distillation-only objective requires lambda = 1")
        if self.mode == Mode.MIXED and not 0.0 < self.lam < 1.0:
            raise ConfigError(f"mixed objective requires 0 < lambda < 1, got {self.lam}")

    @classmethod
    def from_lambda(cls, lam: float, rho: float = 4.0) -> "ObjectiveSpec":
        if lam == 0.0:
            return cls(Mode.CE_ONLY, 0.0, rho)
        if lam == 1.0:
            return cls(Mode.KL_ONLY, 1.0, rho)
        return cls(Mode.MIXED, lam, rho)


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_rows:
        raise DimensionError(f"labels must be a vector of length {n_rows}, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(
            f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]"
        )
    return labels


def ce_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of the true class."""
    if logits.data.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got shape {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros((n, c), dtype=logits.data.dtype)
    onehot[np.arange(n), labels] = 1.0
    picked = sum_(mul(logp, Tensor(onehot)), axis=1)
    return mul_scalar(mean(picked), -1.0)


def kl_loss(teacher_logits, student_logits: Tensor, rho: float) -> Tensor:
    """Mean KL(teacher || student) between temperature-softened distributions.

    The teacher side is detached: only the student logits receive gradient.
    """
    if rho <= 0:
        raise ConfigError(f"temperature must be positive, got {rho}")
    h_t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if h_t.shape != student_logits.shape:
        raise DimensionError(f"teacher logits {h_t.shape} and student logits {student_logits.shape} differ")
    if h_t.ndim != 2:
        raise DimensionError(f"logits must be [batch, classes], got shape {h_t.shape}")

    dtype = student_logits.data.dtype
    scaled = h_t.astype(dtype) / dtype.type(rho)
    shifted = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p_t = np.maximum(e / e.sum(axis=1, keepdims=True), dtype.type(PROB_FLOOR))
    entropy_term = float((p_t * np.log(p_t)).sum(axis=1).mean())

    log_p_s = log_softmax(mul_scalar(student_logits, 1.0 / rho), axis=1)
    cross = mean(sum_(mul(Tensor(p_t.astype(dtype)), log_p_s), axis=1))
    return add_scalar(mul_scalar(cross, -1.0), entropy_term)


def total_loss(teacher_logits, student_logits: Tensor, labels, spec: ObjectiveSpec) -> Tensor:
    """(1 - lambda) * CE + lambda * KL per the objective spec.

    The endpoint modes return the corresponding single loss unchanged; the
    distillation-only mode never reads the labels.
    """
    if spec.mode == Mode.KL_ONLY:
        if teacher_logits is None:
            raise ConfigError("distillation objective needs teacher logits")
        return kl_loss(teacher_logits, student_logits, spec.rho)
    if labels is None:
        raise MissingLabelsError(f"objective mode '{spec.mode.value}' needs ground-truth labels")
    ce = ce_loss(student_logits, labels)
    if spec.mode == Mode.CE_ONLY:
        return ce
    if teacher_logits is None:
        raise ConfigError("mixed objective needs teacher logits")
    kl = kl_loss(teacher_logits, student_logits, spec.rho)
    return add(mul_scalar(ce, 1.0 - spec.lam), mul_scalar(kl, spec.lam))
