"""Loss functions for weighted distillation.

Per-sample terms are kept as (n, 1) column tensors so the per-sample weights
multiply in before the batch mean. Teacher quantities are always constants;
gradients flow only through the student (and the hint projector).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ensemble import WeightPair
from .models import ModelParams, Prediction


@dataclass
class LossBreakdown:
    """Batch-mean components (unweighted, for logging) and the weighted total."""
    ce: float
    kd_van: float
    kd_aux: float
    total: Tensor


def one_hot(labels, class_count: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= class_count):
        raise ValueError(f"label out of range for {class_count} classes")
    out = np.zeros((labels.size, class_count))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _rowsum(x: Tensor) -> Tensor:
    return ad.matmul(x, Tensor(np.ones((x.shape[1], 1))))


def cross_entropy(logits, label: int) -> Tensor:
    """Negative log probability of the true class for a single sample."""
    logits = ad.as_tensor(logits)
    if logits.ndim != 1:
        raise ad.ShapeError(f"cross-entropy: expected 1-D logits, got {logits.shape}")
    c = logits.shape[0]
    if not 0 <= int(label) < c:
        raise ValueError(f"cross-entropy: label {label} out of range for {c} classes")
    probs = ad.reshape(ad.softmax(logits), (1, c))
    return ad.reshape(per_sample_cross_entropy(probs, [int(label)]), ())


def per_sample_cross_entropy(probs: Tensor, labels) -> Tensor:
    """-log p[label] per row; (n, C) probabilities -> (n, 1)."""
    oh = Tensor(one_hot(labels, probs.shape[1]))
    return ad.scale(_rowsum(ad.mul(oh, ad.log(probs))), -1.0)


def _temper(p: np.ndarray, temperature: float) -> np.ndarray:
    if temperature == 1.0:
        return p
    z = np.log(np.maximum(p, ad.LOG_FLOOR)) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _validate_probs(name: str, p: np.ndarray) -> None:
    if p.min() < -1e-12 or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError(f"kd-vanilla: {name} is not a valid distribution")


def per_sample_kd(teacher_probs: np.ndarray, student_probs: Tensor, temperature: float = 1.0) -> Tensor:
    """KL(teacher || student) per row at the given temperature; (n, C) -> (n, 1).

    The teacher side is constant; the temperature rescales both distributions
    through a softmax of their log-probabilities.
    """
    if temperature <= 0:
        raise ValueError("kd-vanilla: temperature must be positive")
    pt = _temper(np.asarray(teacher_probs, dtype=np.float64), temperature)
    _validate_probs("teacher probabilities", pt)
    _validate_probs("student probabilities", np.asarray(student_probs.data))
    if temperature == 1.0:
        ps_t = student_probs
    else:
        ps_t = ad.softmax(ad.scale(ad.log(student_probs), 1.0 / temperature))
    # sum_c pt * (log pt - log ps); first term is a per-row constant
    const = (pt * np.log(np.maximum(pt, ad.LOG_FLOOR))).sum(axis=1, keepdims=True)
    cross = _rowsum(ad.mul(Tensor(pt), ad.log(ps_t)))
    return ad.sub(Tensor(const), cross)


def kd_vanilla(p_t, p_s, temperature: float = 1.0) -> Tensor:
    """Scalar KL divergence for a single pair of distributions."""
    p_s = ad.as_tensor(p_s)
    if p_s.ndim == 1:
        p_s = ad.reshape(p_s, (1, p_s.shape[0]))
    p_t = np.atleast_2d(np.asarray(p_t, dtype=np.float64))
    return ad.reshape(per_sample_kd(p_t, p_s, temperature), ())


def per_sample_hint(student_feature: Tensor, teacher_feature: np.ndarray, projector) -> Tensor:
    """MSE between projected student feature and (constant) teacher feature, per row."""
    if isinstance(projector, ModelParams):
        projector = projector.constants()
    proj = ad.add_bias(ad.matmul(student_feature, projector["pw"]), projector["pb"])
    ft = np.asarray(teacher_feature, dtype=np.float64)
    if proj.shape != ft.shape:
        raise ad.ShapeError(f"hint-loss: projected shape {proj.shape} vs teacher {ft.shape}")
    sq = ad.square(ad.sub(proj, Tensor(ft)))
    return ad.scale(_rowsum(sq), 1.0 / ft.shape[1])


def hint_loss(student_feature, teacher_feature, projector) -> Tensor:
    """Batch-mean feature-matching loss."""
    f_s = ad.as_tensor(student_feature)
    if f_s.ndim == 1:
        f_s = ad.reshape(f_s, (1, f_s.shape[0]))
    f_t = np.atleast_2d(np.asarray(teacher_feature, dtype=np.float64))
    return ad.reduce_mean(per_sample_hint(f_s, f_t, projector))


def combined_loss(
    student: Prediction,
    teacher_probs: np.ndarray,
    teacher_features: np.ndarray,
    labels,
    weights: WeightPair,
    projector,
    temperature: float = 1.0,
) -> LossBreakdown:
    """Batch mean of ce + beta*kd_van + gamma*kd_aux with per-sample weights.

    ``weights.beta`` / ``weights.gamma`` are (n, 1) tensors aligned with the
    batch; constants for the static baseline, meta-net outputs otherwise.
    """
    n = student.probs.shape[0]
    beta, gamma = ad.as_tensor(weights.beta), ad.as_tensor(weights.gamma)
    if beta.shape != (n, 1) or gamma.shape != (n, 1):
        raise ad.ShapeError(f"combined-loss: weights misaligned with batch of {n}")
    ce = per_sample_cross_entropy(student.probs, labels)
    kd = per_sample_kd(teacher_probs, student.probs, temperature)
    aux = per_sample_hint(student.feature, teacher_features, projector)
    total = ad.reduce_mean(ad.add(ce, ad.add(ad.mul(beta, kd), ad.mul(gamma, aux))))
    return LossBreakdown(
        ce=float(ce.data.mean()),
        kd_van=float(kd.data.mean()),
        kd_aux=float(aux.data.mean()),
        total=total,
    )


def meta_loss(probs: Tensor, labels, target: str = "scalar") -> Tensor | None:
    """MSE of the pseudo student against ground truth over the error subset.

    ``scalar`` mode penalizes (p[label] - 1)^2; ``onehot`` mode is the MSE
    against the full one-hot vector. Returns None on an empty subset, which
    signals the caller to skip the meta update.
    """
    if probs.shape[0] == 0 or np.asarray(labels).size == 0:
        return None
    oh = Tensor(one_hot(labels, probs.shape[1]))
    if target == "scalar":
        p_true = _rowsum(ad.mul(probs, oh))
        return ad.reduce_mean(ad.square(ad.sub(p_true, Tensor(1.0))))
    if target == "onehot":
        return ad.reduce_mean(ad.square(ad.sub(probs, oh)))
    raise ValueError(f"meta-loss: unknown target mode {target!r}")
