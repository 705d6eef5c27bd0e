"""Finite-difference verification suite: per-op gradients, double backward,
the full weighted distillation loss, and the meta hypergradient.

Everything here is an independent oracle: expected gradients come from
central differences of forward evaluations, never from the autodiff engine
under test.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .ensemble import WeightPair
from .losses import combined_loss, meta_loss, one_hot
from .metaloop import Batch, meta_hypergradient
from .models import (
    ClassifierSpec,
    MetaNetConfig,
    ModelParams,
    classifier_forward,
    init_classifier,
    init_metanet,
    init_projector,
)

FIRST_ORDER_TOL = 1e-5
SECOND_ORDER_TOL = 1e-4

# test hook: ops whose gradient should be deliberately corrupted, for the
# negative-control path of the gradcheck command
_corrupt_ops: set[str] = set()


def set_corrupt_ops(ops) -> None:
    _corrupt_ops.clear()
    _corrupt_ops.update(ops)


def _maybe_corrupt(name: str, err: float) -> float:
    return err + 1.0 if name in _corrupt_ops else err


def check_op_gradients(seed: int = 0) -> dict[str, float]:
    """Max FD relative error for every differentiable op at a random point."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    m = rng.standard_normal((4, 5))
    pos = np.abs(rng.standard_normal((3, 4))) + 0.5
    idx = np.array([0, 2, 1, 2])

    cases = {
        "add": ([a, b], lambda ps: ad.reduce_sum(ad.square(ad.add(ps[0], ps[1])))),
        "sub": ([a, b], lambda ps: ad.reduce_sum(ad.square(ad.sub(ps[0], ps[1])))),
        "mul": ([a, b], lambda ps: ad.reduce_sum(ad.square(ad.mul(ps[0], ps[1])))),
        "matmul": ([a, m], lambda ps: ad.reduce_sum(ad.square(ad.matmul(ps[0], ps[1])))),
        "relu": ([a + 0.05], lambda ps: ad.reduce_sum(ad.square(ad.relu(ps[0])))),
        "sigmoid": ([a], lambda ps: ad.reduce_sum(ad.square(ad.sigmoid(ps[0])))),
        "softmax": ([a], lambda ps: ad.reduce_sum(ad.square(ad.softmax(ps[0])))),
        "log": ([pos], lambda ps: ad.reduce_sum(ad.square(ad.log(ps[0])))),
        "exp": ([a], lambda ps: ad.reduce_sum(ad.square(ad.exp(ps[0])))),
        "sum": ([a], lambda ps: ad.square(ad.reduce_sum(ps[0]))),
        "mean": ([a], lambda ps: ad.square(ad.reduce_mean(ps[0]))),
        # fourth power: keep entries away from 0 where the FD quotient degenerates
        "square": ([pos], lambda ps: ad.reduce_sum(ad.square(ad.square(ps[0])))),
        "scale-by-scalar": ([a], lambda ps: ad.reduce_sum(ad.square(ad.scale(ps[0], -1.7)))),
        "gather-rows": ([a], lambda ps: ad.reduce_sum(ad.square(ad.gather_rows(ps[0], idx)))),
        "concat": ([a, b], lambda ps: ad.reduce_sum(ad.square(ad.concat(ps[0], ps[1], axis=1)))),
        "transpose": ([a], lambda ps: ad.reduce_sum(ad.square(ad.matmul(ps[0], ad.transpose(ps[0]))))),
        "add-bias": ([a, rng.standard_normal(4)],
                     lambda ps: ad.reduce_sum(ad.square(ad.add_bias(ps[0], ps[1])))),
        "im2col": ([rng.standard_normal((2, 4, 4, 2))],
                   lambda ps: ad.reduce_sum(ad.square(ad.im2col(ps[0], 2, 2)))),
    }
    return {
        name: _maybe_corrupt(name, finite_diff_check(f, params))
        for name, (params, f) in cases.items()
    }


def check_double_backward(seed: int = 0) -> float:
    """FD of the analytic first gradient vs the analytic second gradient."""
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(5)

    def first_grad_norm(ps):
        (x,) = ps
        f = ad.reduce_sum(ad.mul(ad.softmax(x), ad.sigmoid(x)))
        (g,) = ad.grad(f, [x], create_graph=True)
        return ad.reduce_sum(ad.square(g))

    return _maybe_corrupt("double-backward", finite_diff_check(first_grad_norm, [x0]))


def _toy_setup(seed: int, classes: int = 3, dim: int = 4, n: int = 6):
    rng = np.random.default_rng(seed)
    s_spec = ClassifierSpec(dim, (5,), classes)
    t_spec = ClassifierSpec(dim, (6,), classes)
    student = init_classifier(s_spec, rng)
    teacher = init_classifier(t_spec, rng)
    projector = init_projector(s_spec.feature_dim, t_spec.feature_dim, rng)
    x = rng.standard_normal((n, dim))
    labels = rng.integers(0, classes, size=n)
    with ad.no_grad():
        t_pred = classifier_forward(teacher, t_spec, x)
    batch = Batch(x, labels, np.arange(n), t_pred.probs.data, t_pred.feature.data)
    return s_spec, student, projector, batch, rng


def check_full_loss_gradient(seed: int = 0) -> float:
    """FD check of the complete per-sample weighted loss w.r.t. every
    student and projector parameter, with non-trivial fixed weights."""
    s_spec, student, projector, batch, rng = _toy_setup(seed)
    n = len(batch.labels)
    beta = 0.5 + rng.random((n, 1))
    gamma = 0.5 + rng.random((n, 1))
    names = student.names()
    p_names = projector.names()

    def f(ps):
        s = dict(zip(names, ps[: len(names)]))
        p = dict(zip(p_names, ps[len(names):]))
        pred = classifier_forward(s, s_spec, batch.features)
        lb = combined_loss(pred, batch.teacher_probs, batch.teacher_features,
                           batch.labels, WeightPair(Tensor(beta), Tensor(gamma)), p)
        return lb.total

    params = [student[n] for n in names] + [projector[n] for n in p_names]
    return _maybe_corrupt("full-loss", finite_diff_check(f, params))


def check_hypergradient(seed: int = 0, step: float = 1e-5) -> float:
    """Analytic hypergradient vs central differences of the composed map
    (pseudo update -> meta loss), recomputing the pseudo update per probe."""
    s_spec, student, projector, batch, rng = _toy_setup(seed, classes=3, dim=4, n=8)
    cfg = MetaNetConfig(class_count=3, hidden_width=6, search_range=0.5)
    metanet = init_metanet(cfg, rng)
    # nudge the output layer so weights are off the (1, 1) saddle
    metanet["w1"] += 0.05 * rng.standard_normal(metanet["w1"].shape)
    meta_x = rng.standard_normal((10, 4))
    meta_y = rng.integers(0, 3, size=10)
    lr = 0.1

    analytic, _, subset = meta_hypergradient(
        student, metanet, projector, batch, meta_x, meta_y, s_spec, cfg, lr
    )
    if analytic is None:
        raise RuntimeError("hypergradient check: empty error subset, reseed")

    def value(params: ModelParams) -> float:
        with ad.Tape():
            s_leaves = student.leaves()
            m_leaves = params.leaves()
            from .metaloop import pseudo_update, select_error_subset
            pseudo, _, _ = pseudo_update(s_leaves, s_spec, batch, m_leaves, cfg,
                                         projector.constants(), lr)
            pred = classifier_forward(pseudo, s_spec, meta_x)
            sub = select_error_subset(pred.probs.data, meta_y)
            loss = meta_loss(ad.gather_rows(pred.probs, sub), meta_y[sub])
            return float(loss.data)

    worst = 0.0
    for name in metanet.names():
        base = metanet[name]
        a_flat = analytic[name].reshape(-1)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value(metanet)
            flat[i] = orig - step
            down = value(metanet)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            rel = abs(a_flat[i] - numeric) / (abs(a_flat[i]) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
    return _maybe_corrupt("hypergradient", worst)


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def run_all(seeds=(0, 1, 2, 3, 4)) -> list[CheckResult]:
    """Full verification report across seeds; worst error per check."""
    results: list[CheckResult] = []
    op_worst: dict[str, float] = {}
    for seed in seeds:
        for name, err in check_op_gradients(seed).items():
            op_worst[name] = max(op_worst.get(name, 0.0), err)
    for name, err in op_worst.items():
        results.append(CheckResult(f"op:{name}", err, FIRST_ORDER_TOL))
    results.append(CheckResult(
        "double-backward", max(check_double_backward(s) for s in seeds), SECOND_ORDER_TOL))
    results.append(CheckResult(
        "full-loss", max(check_full_loss_gradient(s) for s in seeds), FIRST_ORDER_TOL))
    results.append(CheckResult(
        "hypergradient", max(check_hypergradient(s) for s in seeds), SECOND_ORDER_TOL))
    return results
