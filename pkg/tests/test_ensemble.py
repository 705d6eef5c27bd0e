import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hkdistill.ensemble import (
    EnsembleConfig,
    WeightPair,
    WeightStore,
    ensemble,
    uncertainty,
    uncertainty_batch,
    uncertainty_to_weight,
)

CFG = EnsembleConfig(epsilon=0.5, uncertainty_threshold=0.6, normalize_entropy=True)


def test_uncertainty_one_hot_is_zero():
    assert uncertainty(np.array([0.0, 1.0, 0.0])) == pytest.approx(0.0)


def test_uncertainty_uniform():
    p = np.full(5, 0.2)
    assert uncertainty(p, normalize=False) == pytest.approx(np.log(5))
    assert uncertainty(p, normalize=True) == pytest.approx(1.0)


def test_uncertainty_known_value():
    # H([0.7, 0.3]) / ln 2, value from a direct scalar evaluation
    assert uncertainty(np.array([0.7, 0.3])) == pytest.approx(0.8812908992306927, rel=1e-9)


def test_uncertainty_rejects_invalid():
    with pytest.raises(ValueError):
        uncertainty(np.array([0.7, 0.7]))


def test_uncertainty_batch_matches_scalar():
    rng = np.random.default_rng(0)
    probs = rng.random((6, 4)) + 1e-3
    probs /= probs.sum(axis=1, keepdims=True)
    batch = uncertainty_batch(probs)
    for i in range(6):
        assert batch[i] == pytest.approx(uncertainty(probs[i]))


def test_ensemble_low_uncertainty_blends():
    store = WeightStore()
    store.put(7, WeightPair(1.2, 0.9), 1)
    out = ensemble(store, 7, WeightPair(0.8, 1.1), u=0.3, t=2, config=CFG)
    assert (out.beta, out.gamma) == (1.0, 1.0)


def test_ensemble_high_uncertainty_returns_fresh():
    store = WeightStore()
    store.put(7, WeightPair(1.2, 0.9), 1)
    out = ensemble(store, 7, WeightPair(0.8, 1.1), u=0.7, t=2, config=CFG)
    assert (out.beta, out.gamma) == (0.8, 1.1)


def test_ensemble_first_seen_uses_fresh_and_stores():
    store = WeightStore()
    out = ensemble(store, 3, WeightPair(1.3, 0.7), u=0.1, t=1, config=CFG)
    assert (out.beta, out.gamma) == (1.3, 0.7)
    pair, t = store.get(3)
    assert (pair.beta, pair.gamma, t) == (1.3, 0.7, 1)


def test_ensemble_writes_result_back():
    store = WeightStore()
    store.put(1, WeightPair(1.2, 1.2), 1)
    ensemble(store, 1, WeightPair(0.8, 0.8), u=0.0, t=2, config=CFG)
    pair, t = store.get(1)
    assert pair.beta == pytest.approx(1.0) and t == 2


def test_ensemble_epsilon_edges():
    id_cfg = EnsembleConfig(epsilon=0.0, uncertainty_threshold=0.6)
    keep_cfg = EnsembleConfig(epsilon=1.0, uncertainty_threshold=0.6)
    store = WeightStore()
    store.put(0, WeightPair(1.4, 0.6), 1)
    out = ensemble(store, 0, WeightPair(0.9, 1.1), u=0.0, t=2, config=id_cfg)
    assert (out.beta, out.gamma) == (0.9, 1.1)
    store2 = WeightStore()
    store2.put(0, WeightPair(1.4, 0.6), 1)
    out = ensemble(store2, 0, WeightPair(0.9, 1.1), u=0.0, t=2, config=keep_cfg)
    assert (out.beta, out.gamma) == (1.4, 0.6)


def test_ensemble_geometric_convergence():
    store = WeightStore()
    store.put(0, WeightPair(1.5, 0.5), 1)
    target = WeightPair(1.0, 1.0)
    gap = 0.5
    for t in range(2, 10):
        out = ensemble(store, 0, target, u=0.0, t=t, config=CFG)
        new_gap = abs(out.beta - 1.0)
        assert new_gap == pytest.approx(gap * CFG.epsilon)
        gap = new_gap


def test_ensemble_monotone_timestep_contract():
    store = WeightStore()
    ensemble(store, 0, WeightPair(1.0, 1.0), u=0.0, t=5, config=CFG)
    with pytest.raises(ValueError):
        ensemble(store, 0, WeightPair(1.0, 1.0), u=0.0, t=5, config=CFG)


def test_store_size_bounded_by_distinct_ids():
    store = WeightStore()
    for t in range(1, 4):
        for sid in (0, 1, 2):
            ensemble(store, sid, WeightPair(1.0, 1.0), u=0.9, t=t, config=CFG)
    assert len(store) == 3


def test_store_array_roundtrip():
    store = WeightStore()
    store.put(4, WeightPair(1.25, 0.75), 3)
    store.put(1, WeightPair(0.5, 1.5), 2)
    restored = WeightStore.from_arrays(store.to_arrays())
    assert len(restored) == 2
    pair, t = restored.get(4)
    assert (pair.beta, pair.gamma, t) == (1.25, 0.75, 3)


@settings(max_examples=200, deadline=None)
@given(
    prev_b=st.floats(0.5, 1.5), prev_g=st.floats(0.5, 1.5),
    fresh_b=st.floats(0.5, 1.5), fresh_g=st.floats(0.5, 1.5),
    u=st.floats(0.0, 1.0), eps=st.floats(0.0, 1.0),
    have_history=st.booleans(),
)
def test_ensemble_matches_hand_formula(prev_b, prev_g, fresh_b, fresh_g, u, eps, have_history):
    cfg = EnsembleConfig(epsilon=eps, uncertainty_threshold=0.6)
    store = WeightStore()
    if have_history:
        store.put(0, WeightPair(prev_b, prev_g), 1)
    out = ensemble(store, 0, WeightPair(fresh_b, fresh_g), u=u, t=2, config=cfg)
    if u >= 0.6 or not have_history:
        expect_b, expect_g = fresh_b, fresh_g
    else:
        expect_b = eps * prev_b + (1 - eps) * fresh_b
        expect_g = eps * prev_g + (1 - eps) * fresh_g
    assert abs(out.beta - expect_b) <= 1e-15
    assert abs(out.gamma - expect_g) <= 1e-15
    assert 0.5 - 1e-15 <= out.beta <= 1.5 + 1e-15
    assert 0.5 - 1e-15 <= out.gamma <= 1.5 + 1e-15


def test_uncertainty_to_weight_map():
    assert uncertainty_to_weight(0.0, 0.5) == pytest.approx(0.5)
    assert uncertainty_to_weight(1.0, 0.5) == pytest.approx(1.5)
    assert uncertainty_to_weight(0.5, 0.5) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        EnsembleConfig(epsilon=1.5)
    with pytest.raises(ValueError):
        EnsembleConfig(uncertainty_threshold=-0.1)
