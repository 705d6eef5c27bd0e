"""Compact differentiable models: classifiers, hint projector, meta-weight net.

Parameters live in plain ``ModelParams`` (name -> float64 array). Each training
step wraps them into tape leaves via ``ModelParams.leaves()``; forward passes
consume mappings of name -> Tensor so the same code runs for real parameters
and for pseudo-student parameters that are themselves tape expressions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ensemble import WeightPair


@dataclass(frozen=True)
class ClassifierSpec:
    """MLP classifier: input -> hidden stack (relu) -> logits.

    ``feature_tap`` selects which hidden activation is exposed as the
    intermediate representation used by the hint loss.
    """
    input_dim: int
    hidden_dims: tuple[int, ...]
    class_count: int
    feature_tap: int = -1

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if not self.hidden_dims:
            raise ValueError("at least one hidden layer is required")
        tap = self.feature_tap % len(self.hidden_dims)
        if not 0 <= tap < len(self.hidden_dims):
            raise ValueError("feature_tap out of range")

    @property
    def tap(self) -> int:
        return self.feature_tap % len(self.hidden_dims)

    @property
    def feature_dim(self) -> int:
        return self.hidden_dims[self.tap]


@dataclass(frozen=True)
class ConvClassifierSpec:
    """Small CNN for image inputs: two valid 3x3 convs, flatten, MLP head."""
    height: int
    width: int
    channels: int
    conv_channels: tuple[int, int]
    head_hidden: int
    class_count: int
    kernel: int = 3

    def __post_init__(self) -> None:
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")

    @property
    def feature_dim(self) -> int:
        oh = self.height - 2 * (self.kernel - 1)
        ow = self.width - 2 * (self.kernel - 1)
        return oh * ow * self.conv_channels[1]


@dataclass(frozen=True)
class MetaNetConfig:
    class_count: int
    hidden_width: int = 64
    search_range: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.search_range <= 1.0:
            raise ValueError("search_range must be in [0, 1]")


@dataclass
class Prediction:
    logits: Tensor
    probs: Tensor
    feature: Tensor


class ModelParams:
    """Named float64 parameter arrays, insertion-ordered."""

    def __init__(self, arrays: dict[str, np.ndarray]) -> None:
        self._arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self._arrays[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self._arrays.items()})

    def num_values(self) -> int:
        return sum(v.size for v in self._arrays.values())

    def leaves(self) -> dict[str, Tensor]:
        """Tracked tensors on the active tape, one per parameter."""
        return {k: ad.leaf(v) for k, v in self._arrays.items()}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self._arrays.items()}


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_classifier(spec: ClassifierSpec, rng: np.random.Generator) -> ModelParams:
    arrays: dict[str, np.ndarray] = {}
    dims = (spec.input_dim, *spec.hidden_dims, spec.class_count)
    for i in range(len(dims) - 1):
        fan_in = dims[i]
        std = np.sqrt(2.0 / fan_in) if i < len(dims) - 2 else np.sqrt(1.0 / fan_in)
        arrays[f"w{i}"] = rng.standard_normal((dims[i], dims[i + 1])) * std
        arrays[f"b{i}"] = np.zeros(dims[i + 1])
    return ModelParams(arrays)


def init_conv_classifier(spec: ConvClassifierSpec, rng: np.random.Generator) -> ModelParams:
    k, c0 = spec.kernel, spec.channels
    c1, c2 = spec.conv_channels
    arrays = {
        "cw0": rng.standard_normal((k * k * c0, c1)) * np.sqrt(2.0 / (k * k * c0)),
        "cb0": np.zeros(c1),
        "cw1": rng.standard_normal((k * k * c1, c2)) * np.sqrt(2.0 / (k * k * c1)),
        "cb1": np.zeros(c2),
    }
    flat = spec.feature_dim
    arrays["w0"] = rng.standard_normal((flat, spec.head_hidden)) * np.sqrt(2.0 / flat)
    arrays["b0"] = np.zeros(spec.head_hidden)
    arrays["w1"] = rng.standard_normal((spec.head_hidden, spec.class_count)) * np.sqrt(
        1.0 / spec.head_hidden
    )
    arrays["b1"] = np.zeros(spec.class_count)
    return ModelParams(arrays)


def init_metanet(config: MetaNetConfig, rng: np.random.Generator) -> ModelParams:
    """2-layer MLP on [p_S || p_T]; output layer zero so the initial pair is (1, 1)."""
    d_in = 2 * config.class_count
    h = config.hidden_width
    return ModelParams({
        "w0": rng.standard_normal((d_in, h)) * np.sqrt(2.0 / d_in),
        "b0": np.zeros(h),
        "w1": np.zeros((h, 2)),
        "b1": np.zeros(2),
    })


def init_projector(student_dim: int, teacher_dim: int, rng: np.random.Generator) -> ModelParams:
    return ModelParams({
        "pw": rng.standard_normal((student_dim, teacher_dim)) * np.sqrt(1.0 / student_dim),
        "pb": np.zeros(teacher_dim),
    })


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _as_batch(x, expected_dim: int) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != expected_dim:
        raise ad.ShapeError(
            f"classifier-forward: input shape {x.shape} does not match input dim {expected_dim}"
        )
    return x


def classifier_forward(params, spec, x) -> Prediction:
    """Run the classifier; returns logits, probabilities, and the tapped feature.

    ``params`` is a mapping name -> Tensor (use ModelParams.leaves() or
    .constants()); pseudo-student parameter expressions work the same way.
    """
    if isinstance(params, ModelParams):
        params = params.constants()
    if isinstance(spec, ConvClassifierSpec):
        return _conv_forward(params, spec, x)

    h = _as_batch(x, spec.input_dim)
    feature = None
    n_layers = len(spec.hidden_dims)
    for i in range(n_layers):
        h = ad.relu(ad.add_bias(ad.matmul(h, params[f"w{i}"]), params[f"b{i}"]))
        if i == spec.tap:
            feature = h
    logits = ad.add_bias(ad.matmul(h, params[f"w{n_layers}"]), params[f"b{n_layers}"])
    return Prediction(logits=logits, probs=ad.softmax(logits), feature=feature)


def _conv_forward(params, spec: ConvClassifierSpec, x) -> Prediction:
    x = ad.as_tensor(x)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or x.shape[1:] != (spec.height, spec.width, spec.channels):
        raise ad.ShapeError(f"classifier-forward: image shape {x.shape} does not match spec")
    n, k = x.shape[0], spec.kernel
    h1 = spec.height - k + 1
    w1 = spec.width - k + 1
    c = ad.relu(ad.add_bias(ad.matmul(ad.im2col(x, k, k), params["cw0"]), params["cb0"]))
    c = ad.reshape(c, (n, h1, w1, spec.conv_channels[0]))
    c = ad.relu(ad.add_bias(ad.matmul(ad.im2col(c, k, k), params["cw1"]), params["cb1"]))
    feature = ad.reshape(c, (n, spec.feature_dim))
    h = ad.relu(ad.add_bias(ad.matmul(feature, params["w0"]), params["b0"]))
    logits = ad.add_bias(ad.matmul(h, params["w1"]), params["b1"])
    return Prediction(logits=logits, probs=ad.softmax(logits), feature=feature)


def _check_prob_rows(name: str, p: Tensor, class_count: int) -> None:
    if p.shape[-1] != class_count:
        raise ad.ShapeError(f"meta-forward: {name} has {p.shape[-1]} classes, expected {class_count}")
    sums = p.data.sum(axis=-1)
    if np.abs(sums - 1.0).max() > 1e-6:
        raise ValueError(f"meta-forward: {name} rows do not sum to 1")


def meta_forward(metanet, p_s, p_t, config: MetaNetConfig) -> WeightPair:
    """Map (student probs, teacher probs) to per-sample (beta, gamma).

    Both inputs are detached: gradients flow only into the meta-net
    parameters, never back into the student through its predictions. Outputs
    lie in [1 - l, 1 + l] via an affine-scaled sigmoid, with exactly (1, 1)
    at a zero-initialized output layer.
    """
    if isinstance(metanet, ModelParams):
        metanet = metanet.constants()
    p_s, p_t = ad.as_tensor(p_s).detach(), ad.as_tensor(p_t).detach()
    if p_s.ndim == 1:
        p_s = ad.reshape(p_s, (1, p_s.shape[0]))
    if p_t.ndim == 1:
        p_t = ad.reshape(p_t, (1, p_t.shape[0]))
    _check_prob_rows("p_S", p_s, config.class_count)
    _check_prob_rows("p_T", p_t, config.class_count)

    x = ad.concat(p_s, p_t, axis=1)
    h = ad.relu(ad.add_bias(ad.matmul(x, metanet["w0"]), metanet["b0"]))
    z = ad.add_bias(ad.matmul(h, metanet["w1"]), metanet["b1"])
    l = config.search_range
    lo = Tensor(1.0 - l)
    beta = ad.add(lo, ad.scale(ad.sigmoid(ad.slice_axis(z, 1, 0, 1)), 2.0 * l))
    gamma = ad.add(lo, ad.scale(ad.sigmoid(ad.slice_axis(z, 1, 1, 2)), 2.0 * l))
    return WeightPair(beta=beta, gamma=gamma)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = "hkd-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, groups: dict[str, dict[str, np.ndarray] | ModelParams]) -> None:
    """Plain-text key/value checkpoint; float64 values as exact hex literals.

    Layout, stable across runs:
        hkd-checkpoint <version>
        group <name> <param-count>
        param <pname> <ndim> <dims...>
        <hex-float values, space separated>
    """
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}"]
    for gname, params in groups.items():
        items = params.items() if isinstance(params, ModelParams) else params.items()
        items = list(items)
        lines.append(f"group {gname} {len(items)}")
        for pname, arr in items:
            arr = np.asarray(arr, dtype=np.float64)
            dims = " ".join(str(d) for d in arr.shape)
            lines.append(f"param {pname} {arr.ndim}{' ' if dims else ''}{dims}")
            lines.append(" ".join(v.hex() for v in arr.reshape(-1)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> dict[str, dict[str, np.ndarray]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or not lines[0].startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = int(lines[0].split()[1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    groups: dict[str, dict[str, np.ndarray]] = {}
    i = 1
    while i < len(lines):
        tok = lines[i].split()
        if tok[0] != "group":
            raise CheckpointError(f"{path}: expected group header at line {i + 1}")
        gname, count = tok[1], int(tok[2])
        i += 1
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            ptok = lines[i].split()
            if ptok[0] != "param":
                raise CheckpointError(f"{path}: expected param header at line {i + 1}")
            pname, ndim = ptok[1], int(ptok[2])
            shape = tuple(int(d) for d in ptok[3:3 + ndim])
            values = np.array([float.fromhex(v) for v in lines[i + 1].split()])
            arrays[pname] = values.reshape(shape)
            i += 2
        groups[gname] = arrays
    return groups
