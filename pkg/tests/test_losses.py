import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkdistill import autodiff as ad
from hkdistill.autodiff import Tensor
from hkdistill.ensemble import WeightPair
from hkdistill.losses import (
    combined_loss,
    cross_entropy,
    hint_loss,
    kd_vanilla,
    meta_loss,
    per_sample_cross_entropy,
    per_sample_hint,
    per_sample_kd,
)
from hkdistill.models import ClassifierSpec, classifier_forward, init_classifier, init_projector


def test_cross_entropy_uniform_is_log_c():
    logits = Tensor(np.zeros(4))
    assert float(cross_entropy(logits, 2).data) == pytest.approx(np.log(4.0))


def test_cross_entropy_perfect_prediction():
    probs = np.array([[0.0, 1.0]])
    out = per_sample_cross_entropy(Tensor(probs), [1])
    assert out.data.item() == pytest.approx(0.0)


def test_cross_entropy_known_value():
    # C=2, p=[0.9, 0.1], label=1 -> -ln 0.1 (value from a direct scalar evaluation)
    out = per_sample_cross_entropy(Tensor(np.array([[0.9, 0.1]])), [1])
    assert out.data.item() == pytest.approx(2.302585092994046, rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(Tensor(np.zeros(3)), 3)


def test_kd_identity_is_zero():
    p = np.array([0.2, 0.5, 0.3])
    assert float(kd_vanilla(p, Tensor(p)).data) == pytest.approx(0.0, abs=1e-12)


def test_kd_known_value():
    # KL([1,0] || [0.5,0.5]) = ln 2, computed independently
    val = kd_vanilla(np.array([1.0, 0.0]), Tensor(np.array([0.5, 0.5])))
    assert float(val.data) == pytest.approx(np.log(2.0), rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), tau=st.floats(0.5, 4.0))
def test_kd_nonnegative_and_zero_on_identity(seed, tau):
    rng = np.random.default_rng(seed)
    p = rng.random(4) + 1e-3
    p /= p.sum()
    q = rng.random(4) + 1e-3
    q /= q.sum()
    assert float(kd_vanilla(p, Tensor(q), tau).data) >= -1e-12
    assert float(kd_vanilla(p, Tensor(p), tau).data) == pytest.approx(0.0, abs=1e-9)


def test_kd_rejects_invalid_distribution():
    with pytest.raises(ValueError):
        kd_vanilla(np.array([0.9, 0.3]), Tensor(np.array([0.5, 0.5])))
    with pytest.raises(ValueError):
        kd_vanilla(np.array([0.5, 0.5]), Tensor(np.array([0.5, 0.5])), temperature=0.0)


def _projector(rng, d_s, d_t):
    return init_projector(d_s, d_t, rng)


def test_hint_loss_exact_match_is_zero():
    rng = np.random.default_rng(0)
    proj = _projector(rng, 3, 5)
    f_s = rng.standard_normal((2, 3))
    f_t = f_s @ proj["pw"] + proj["pb"]
    assert float(hint_loss(f_s, f_t, proj).data) == pytest.approx(0.0, abs=1e-20)


def test_hint_loss_constant_offset():
    rng = np.random.default_rng(1)
    proj = _projector(rng, 3, 5)
    f_s = rng.standard_normal((2, 3))
    delta = 0.37
    f_t = f_s @ proj["pw"] + proj["pb"] + delta
    assert float(hint_loss(f_s, f_t, proj).data) == pytest.approx(delta**2)


def test_hint_loss_nonnegative_and_dim_mismatch():
    rng = np.random.default_rng(2)
    proj = _projector(rng, 3, 5)
    assert float(hint_loss(rng.standard_normal((2, 3)),
                           rng.standard_normal((2, 5)), proj).data) >= 0.0
    with pytest.raises(ad.ShapeError):
        hint_loss(rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), proj)


def _toy_batch(seed=0, n=6, c=3, dim=4):
    rng = np.random.default_rng(seed)
    spec = ClassifierSpec(dim, (5,), c)
    student = init_classifier(spec, rng)
    proj = _projector(rng, 5, 5)
    x = rng.standard_normal((n, dim))
    labels = rng.integers(0, c, size=n)
    t_probs = rng.random((n, c)) + 0.1
    t_probs /= t_probs.sum(axis=1, keepdims=True)
    t_feats = rng.standard_normal((n, 5))
    pred = classifier_forward(student, spec, x)
    return pred, t_probs, t_feats, labels, proj, n


def test_combined_loss_all_ones_matches_static_reference():
    pred, t_probs, t_feats, labels, proj, n = _toy_batch()
    ones = WeightPair(Tensor(np.ones((n, 1))), Tensor(np.ones((n, 1))))
    lb = combined_loss(pred, t_probs, t_feats, labels, ones, proj)
    # independent static reference: plain sum of the three mean terms
    ce = per_sample_cross_entropy(pred.probs, labels).data
    kd = per_sample_kd(t_probs, pred.probs).data
    aux = per_sample_hint(pred.feature, t_feats, proj).data
    ref = (ce + kd + aux).mean()
    assert float(lb.total.data) == ref  # bitwise


def test_combined_loss_zero_weights_leaves_only_ce():
    pred, t_probs, t_feats, labels, proj, n = _toy_batch()
    zeros = WeightPair(Tensor(np.zeros((n, 1))), Tensor(np.zeros((n, 1))))
    lb = combined_loss(pred, t_probs, t_feats, labels, zeros, proj)
    ce = per_sample_cross_entropy(pred.probs, labels).data.mean()
    assert float(lb.total.data) == pytest.approx(float(ce), rel=1e-15)


def test_combined_loss_gamma_linearity():
    pred, t_probs, t_feats, labels, proj, n = _toy_batch()
    beta = np.ones((n, 1))
    gamma = np.ones((n, 1))
    lb0 = combined_loss(pred, t_probs, t_feats, labels,
                        WeightPair(Tensor(beta), Tensor(gamma)), proj)
    gamma2 = gamma.copy()
    gamma2[2, 0] = 2.0
    lb1 = combined_loss(pred, t_probs, t_feats, labels,
                        WeightPair(Tensor(beta), Tensor(gamma2)), proj)
    aux2 = float(per_sample_hint(pred.feature, t_feats, proj).data[2, 0])
    assert float(lb1.total.data) - float(lb0.total.data) == pytest.approx(aux2 / n, rel=1e-9)


def test_combined_loss_misaligned_weights():
    pred, t_probs, t_feats, labels, proj, n = _toy_batch()
    bad = WeightPair(Tensor(np.ones((n + 1, 1))), Tensor(np.ones((n, 1))))
    with pytest.raises(ad.ShapeError):
        combined_loss(pred, t_probs, t_feats, labels, bad, proj)


def test_combined_loss_gradients_pass_finite_diff():
    from hkdistill.verify import check_full_loss_gradient

    for seed in range(3):
        assert check_full_loss_gradient(seed) < 1e-5


def test_meta_loss_perfect_prediction():
    probs = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    out = meta_loss(probs, [0, 1])
    assert float(out.data) == pytest.approx(0.0)


def test_meta_loss_known_value():
    # single sample with p[label] = 0.3 -> (0.3 - 1)^2 = 0.49
    out = meta_loss(Tensor(np.array([[0.3, 0.7]])), [0])
    assert float(out.data) == pytest.approx(0.49, rel=1e-12)


def test_meta_loss_bounded_and_empty():
    rng = np.random.default_rng(0)
    probs = rng.random((5, 3)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    out = meta_loss(Tensor(probs), rng.integers(0, 3, size=5))
    assert 0.0 <= float(out.data) <= 1.0
    assert meta_loss(Tensor(np.zeros((0, 3))), np.array([], dtype=int)) is None


def test_meta_loss_monotone_in_true_class_probability():
    values = []
    for p in (0.1, 0.4, 0.7, 0.95):
        probs = Tensor(np.array([[p, 1.0 - p]]))
        values.append(float(meta_loss(probs, [0]).data))
    assert values == sorted(values, reverse=True)


def test_meta_loss_onehot_mode():
    out = meta_loss(Tensor(np.array([[0.3, 0.7]])), [0], target="onehot")
    assert float(out.data) == pytest.approx(((0.3 - 1) ** 2 + 0.7**2) / 2)
    with pytest.raises(ValueError):
        meta_loss(Tensor(np.array([[0.3, 0.7]])), [0], target="nope")
