"""Uncertainty-gated temporal ensembling of per-sample loss weights.

Each sample carries a (beta, gamma) pair. When the student is confident about
a sample (low prediction entropy), the fresh pair is blended with the pair
stored at the sample's previous visit; otherwise the fresh pair is used as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class WeightPair:
    """Per-sample loss-weight coefficients (vanilla-KD weight, hint weight)."""
    beta: object
    gamma: object


@dataclass(frozen=True)
class EnsembleConfig:
    epsilon: float = 0.5
    uncertainty_threshold: float = 0.6
    normalize_entropy: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.uncertainty_threshold < 0.0:
            raise ValueError("uncertainty_threshold must be >= 0")


def _check_distribution(p: np.ndarray) -> None:
    if p.ndim != 1 or p.min() < -1e-12 or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError("uncertainty: input is not a probability distribution")


def uncertainty(p, normalize: bool = True) -> float:
    """Shannon entropy of a class distribution; optionally divided by log C."""
    p = np.asarray(getattr(p, "data", p), dtype=np.float64)
    _check_distribution(p)
    q = np.maximum(p, 1e-12)
    h = float(-(p * np.log(q)).sum())
    if normalize:
        h /= np.log(len(p))
    return h


def uncertainty_batch(probs: np.ndarray, normalize: bool = True) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    q = np.maximum(probs, 1e-12)
    h = -(probs * np.log(q)).sum(axis=1)
    if normalize:
        h = h / np.log(probs.shape[1])
    return h


def uncertainty_to_weight(u_norm: float, search_range: float) -> float:
    """Direct uncertainty-to-weight map used by the non-meta dynamic baseline."""
    return 1.0 - search_range + 2.0 * search_range * float(u_norm)


class WeightStore:
    """Previous-visit weight pair per sample id, with a monotone timestep."""

    def __init__(self) -> None:
        self._entries: dict[int, tuple[float, float, int]] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, sample_id: int) -> tuple[WeightPair, int] | None:
        e = self._entries.get(int(sample_id))
        if e is None:
            return None
        return WeightPair(e[0], e[1]), e[2]

    def put(self, sample_id: int, pair: WeightPair, t: int) -> None:
        sid = int(sample_id)
        prev = self._entries.get(sid)
        if prev is not None and t <= prev[2]:
            raise ValueError(
                f"weight store: timestep {t} not after stored {prev[2]} for sample {sid}"
            )
        self._entries[sid] = (float(pair.beta), float(pair.gamma), int(t))

    def to_arrays(self) -> dict[str, np.ndarray]:
        ids = sorted(self._entries)
        return {
            "ids": np.array(ids, dtype=np.float64),
            "beta": np.array([self._entries[i][0] for i in ids]),
            "gamma": np.array([self._entries[i][1] for i in ids]),
            "t": np.array([self._entries[i][2] for i in ids], dtype=np.float64),
        }

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "WeightStore":
        store = cls()
        for sid, b, g, t in zip(arrays["ids"], arrays["beta"], arrays["gamma"], arrays["t"]):
            store._entries[int(sid)] = (float(b), float(g), int(t))
        return store


def ensemble(
    store: WeightStore,
    sample_id: int,
    fresh: WeightPair,
    u: float,
    t: int,
    config: EnsembleConfig,
) -> WeightPair:
    """Blend the fresh pair with the sample's history when uncertainty is low.

    The returned pair is always written back to the store at timestep t, so
    the next visit ensembles against what was actually applied.
    """
    prev = store.get(sample_id)
    if u >= config.uncertainty_threshold or prev is None:
        out = WeightPair(float(fresh.beta), float(fresh.gamma))
    else:
        prev_pair, _ = prev
        e = config.epsilon
        out = WeightPair(
            e * prev_pair.beta + (1.0 - e) * float(fresh.beta),
            e * prev_pair.gamma + (1.0 - e) * float(fresh.gamma),
        )
    store.put(sample_id, out, t)
    return out
