"""Bilevel training steps.

Inner loop: a pseudo student is built by one differentiable SGD step on the
weighted distillation loss, evaluated on the held-out meta-set, and the meta
loss on its misclassified subset is differentiated back through the update
into the meta-net (the hypergradient).

Outer loop: one SGD-with-momentum step on student + projector using weights
produced by the frozen meta-net, optionally passed through the ensembler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .ensemble import (
    EnsembleConfig,
    WeightPair,
    WeightStore,
    ensemble,
    uncertainty_batch,
    uncertainty_to_weight,
)
from .losses import LossBreakdown, combined_loss, meta_loss
from .models import MetaNetConfig, ModelParams, classifier_forward, meta_forward
from .optim import SGD, Adam

MODES = ("static", "un-dy", "mwn", "hkd")


@dataclass(frozen=True)
class InnerLoopConfig:
    """Inner-loop cadence and meta-net optimizer settings."""
    interval: int = 100
    meta_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    pseudo_lr: float | None = None  # None: reuse the outer learning rate

    def __post_init__(self) -> None:
        if self.interval < 1:
            raise ValueError("interval must be >= 1")
        if self.meta_lr <= 0:
            raise ValueError("meta_lr must be positive")


@dataclass
class Batch:
    """A training mini-batch plus the cached (frozen) teacher outputs."""
    features: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    teacher_probs: np.ndarray
    teacher_features: np.ndarray


@dataclass
class TeacherCache:
    """Teacher predictions for a whole dataset, computed once."""
    probs: np.ndarray
    features: np.ndarray

    @classmethod
    def build(cls, teacher: ModelParams, teacher_spec, features: np.ndarray,
              chunk: int = 512) -> "TeacherCache":
        probs, feats = [], []
        with ad.no_grad():
            consts = teacher.constants()
            for start in range(0, len(features), chunk):
                pred = classifier_forward(consts, teacher_spec, features[start:start + chunk])
                probs.append(pred.probs.data)
                feats.append(pred.feature.data)
        return cls(np.concatenate(probs), np.concatenate(feats))

    def batch(self, dataset, index) -> Batch:
        return Batch(
            features=dataset.flat_features()[index],
            labels=dataset.labels[index],
            ids=dataset.ids[index],
            teacher_probs=self.probs[index],
            teacher_features=self.features[index],
        )


# ---------------------------------------------------------------------------
# Inner loop
# ---------------------------------------------------------------------------

def pseudo_update(
    student_leaves: dict[str, Tensor],
    student_spec,
    batch: Batch,
    metanet_leaves: dict[str, Tensor],
    metanet_cfg: MetaNetConfig,
    projector,
    lr: float,
    temperature: float = 1.0,
) -> tuple[dict[str, Tensor], WeightPair, LossBreakdown]:
    """One differentiable SGD step on the weighted loss.

    The returned parameter expressions stay differentiable w.r.t. the meta-net
    leaves; the weights are the raw meta-net outputs (no ensembling inside the
    inner loop).
    """
    if lr < 0:
        raise ValueError("pseudo-update: lr must be >= 0")
    pred = classifier_forward(student_leaves, student_spec, batch.features)
    weights = meta_forward(metanet_leaves, pred.probs, batch.teacher_probs, metanet_cfg)
    breakdown = combined_loss(
        pred, batch.teacher_probs, batch.teacher_features, batch.labels,
        weights, projector, temperature,
    )
    names = list(student_leaves)
    grads = ad.grad(breakdown.total, [student_leaves[n] for n in names], create_graph=True)
    pseudo = {
        n: ad.sub(student_leaves[n], ad.scale(g, lr)) for n, g in zip(names, grads)
    }
    return pseudo, weights, breakdown


def select_error_subset(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Indices of meta-samples the pseudo student misclassifies.

    np.argmax breaks ties toward the lowest class index.
    """
    predicted = np.argmax(np.asarray(probs), axis=1)
    return np.nonzero(predicted != np.asarray(labels))[0]


def meta_hypergradient(
    student: ModelParams,
    metanet: ModelParams,
    projector: ModelParams,
    batch: Batch,
    meta_features: np.ndarray,
    meta_labels: np.ndarray,
    student_spec,
    metanet_cfg: MetaNetConfig,
    lr: float,
    temperature: float = 1.0,
    meta_target: str = "scalar",
):
    """Gradient of the meta loss w.r.t. meta-net parameters, through the
    pseudo update. Returns (grads-or-None, meta loss value, error subset size).
    """
    with Tape():
        s_leaves = student.leaves()
        m_leaves = metanet.leaves()
        pseudo, _, _ = pseudo_update(
            s_leaves, student_spec, batch, m_leaves, metanet_cfg,
            projector.constants(), lr, temperature,
        )
        meta_pred = classifier_forward(pseudo, student_spec, meta_features)
        subset = select_error_subset(meta_pred.probs.data, meta_labels)
        if subset.size == 0:
            return None, 0.0, 0
        loss = meta_loss(
            ad.gather_rows(meta_pred.probs, subset), meta_labels[subset], meta_target
        )
        names = list(m_leaves)
        grads = ad.grad(loss, [m_leaves[n] for n in names])
    return {n: g.data for n, g in zip(names, grads)}, float(loss.data), int(subset.size)


def meta_step(
    student: ModelParams,
    metanet: ModelParams,
    projector: ModelParams,
    meta_opt: Adam,
    batch: Batch,
    meta_features: np.ndarray,
    meta_labels: np.ndarray,
    student_spec,
    metanet_cfg: MetaNetConfig,
    lr: float,
    temperature: float = 1.0,
    meta_target: str = "scalar",
) -> dict:
    """One meta-net update; skipped (not an error) when the pseudo student
    classifies the whole meta-set correctly. Never touches the student."""
    grads, loss_value, subset_size = meta_hypergradient(
        student, metanet, projector, batch, meta_features, meta_labels,
        student_spec, metanet_cfg, lr, temperature, meta_target,
    )
    if grads is None:
        return {"skipped": True, "meta_loss": None, "error_subset_size": 0}
    meta_opt.step(grads)
    return {"skipped": False, "meta_loss": loss_value, "error_subset_size": subset_size}


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------

def fresh_weights(
    mode: str,
    student_probs: np.ndarray,
    teacher_probs: np.ndarray,
    metanet: ModelParams,
    metanet_cfg: MetaNetConfig,
    ens_cfg: EnsembleConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Raw per-sample (beta, gamma) columns for the given training mode."""
    n = student_probs.shape[0]
    if mode == "static":
        ones = np.ones((n, 1))
        return ones, ones.copy()
    if mode == "un-dy":
        u = uncertainty_batch(student_probs, normalize=True)
        w = np.array([uncertainty_to_weight(x, metanet_cfg.search_range) for x in u])
        col = w[:, None]
        return col, col.copy()
    if mode in ("mwn", "hkd"):
        with ad.no_grad():
            pair = meta_forward(metanet.constants(), Tensor(student_probs),
                                Tensor(teacher_probs), metanet_cfg)
        return pair.beta.data, pair.gamma.data
    raise ValueError(f"unknown mode {mode!r}")


def apply_ensembling(
    store: WeightStore,
    ids: np.ndarray,
    beta: np.ndarray,
    gamma: np.ndarray,
    u: np.ndarray,
    ens_cfg: EnsembleConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample EMA gate; timestep is the sample's visit count."""
    out_b = np.empty_like(beta)
    out_g = np.empty_like(gamma)
    for i, sid in enumerate(ids):
        prev = store.get(int(sid))
        t = prev[1] + 1 if prev is not None else 1
        pair = ensemble(store, int(sid), WeightPair(beta[i, 0], gamma[i, 0]),
                        float(u[i]), t, ens_cfg)
        out_b[i, 0] = pair.beta
        out_g[i, 0] = pair.gamma
    return out_b, out_g


def outer_step(
    student: ModelParams,
    projector: ModelParams,
    metanet: ModelParams,
    student_spec,
    metanet_cfg: MetaNetConfig,
    store: WeightStore,
    ens_cfg: EnsembleConfig,
    mode: str,
    batch: Batch,
    student_opt: SGD,
    projector_opt: SGD,
    temperature: float = 1.0,
) -> tuple[LossBreakdown, dict]:
    """One SGD step on student + projector with per-sample weighted loss.

    The meta-net is frozen here: weights are computed without recording and
    enter the loss as constants, so no gradient reaches the meta-net.
    """
    with Tape():
        s_leaves = student.leaves()
        p_leaves = projector.leaves()
        pred = classifier_forward(s_leaves, student_spec, batch.features)
        probs = pred.probs.data

        # uncertainty from the pre-update student, used by the gate and logged
        u = uncertainty_batch(probs, normalize=ens_cfg.normalize_entropy)
        beta, gamma = fresh_weights(mode, probs, batch.teacher_probs,
                                    metanet, metanet_cfg, ens_cfg)
        if mode == "hkd":
            beta, gamma = apply_ensembling(store, batch.ids, beta, gamma, u, ens_cfg)

        breakdown = combined_loss(
            pred, batch.teacher_probs, batch.teacher_features, batch.labels,
            WeightPair(Tensor(beta), Tensor(gamma)), p_leaves, temperature,
        )
        s_names, p_names = list(s_leaves), list(p_leaves)
        grads = ad.grad(
            breakdown.total,
            [s_leaves[n] for n in s_names] + [p_leaves[n] for n in p_names],
        )
    student_opt.step({n: g.data for n, g in zip(s_names, grads[: len(s_names)])})
    projector_opt.step({n: g.data for n, g in zip(p_names, grads[len(s_names):])})

    stats = {
        "beta_mean": float(beta.mean()),
        "beta_std": float(beta.std()),
        "gamma_mean": float(gamma.mean()),
        "gamma_std": float(gamma.std()),
        "frac_low_uncertainty": float((u < ens_cfg.uncertainty_threshold).mean()),
    }
    return breakdown, stats
