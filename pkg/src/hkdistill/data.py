"""Datasets, the train/meta split, and stable sample identity.

Sample ids are assigned once at load time and never change, so the weight
store can key its per-sample history on them across epochs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class DataError(Exception):
    pass


@dataclass(frozen=True)
class LabeledSample:
    sample_id: int
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    features: np.ndarray   # (n, ...) float64
    labels: np.ndarray     # (n,) int64
    ids: np.ndarray        # (n,) int64, stable
    class_count: int

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.features) == len(self.labels) == len(self.ids)):
            raise DataError("dataset arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.labels)

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(int(self.ids[i]), self.features[i], int(self.labels[i]))

    def take(self, index) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.ids[index], self.class_count)

    def flat_features(self) -> np.ndarray:
        return self.features.reshape(len(self), -1)


def split_meta(dataset: Dataset, per_class_count: int, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic stratified split into (train remainder, meta-set).

    Exactly ``per_class_count`` samples per class go to the meta-set; they are
    removed from the training split so the meta loss never sees training data.
    """
    if per_class_count < 0:
        raise DataError("per_class_count must be >= 0")
    meta_idx: list[np.ndarray] = []
    for cls in range(dataset.class_count):
        cls_idx = np.nonzero(dataset.labels == cls)[0]
        if len(cls_idx) < per_class_count:
            raise DataError(
                f"class {cls} has {len(cls_idx)} samples, fewer than {per_class_count}"
            )
        rng = np.random.default_rng([seed, cls])
        chosen = rng.choice(cls_idx, size=per_class_count, replace=False)
        meta_idx.append(np.sort(chosen))
    meta = np.concatenate(meta_idx) if meta_idx else np.array([], dtype=np.int64)
    mask = np.ones(len(dataset), dtype=bool)
    mask[meta] = False
    return dataset.take(np.nonzero(mask)[0]), dataset.take(meta)


def synth_gaussians(
    class_count: int,
    dim: int,
    samples_per_class: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Mixture of unit-variance Gaussians with class means on a scaled sphere."""
    if separation <= 0:
        raise DataError("separation must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((class_count, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    feats = np.concatenate([
        means[c] + rng.standard_normal((samples_per_class, dim))
        for c in range(class_count)
    ])
    labels = np.repeat(np.arange(class_count), samples_per_class)
    return Dataset(feats, labels, np.arange(len(labels)), class_count)


def make_synth_task(
    class_count: int,
    dim: int,
    train_per_class: int,
    eval_per_class: int,
    separation: float,
    seed: int,
) -> tuple[Dataset, Dataset]:
    """Train and eval datasets drawn from the same Gaussian mixture."""
    full = synth_gaussians(class_count, dim, train_per_class + eval_per_class, separation, seed)
    per = train_per_class + eval_per_class
    train_mask = np.zeros(len(full), dtype=bool)
    for c in range(class_count):
        train_mask[c * per: c * per + train_per_class] = True
    return full.take(np.nonzero(train_mask)[0]), full.take(np.nonzero(~train_mask)[0])


# ---------------------------------------------------------------------------
# Image datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RawImageFormat:
    """Per-record layout: label bytes, then channel-major uint8 pixels."""
    label_bytes: int
    height: int
    width: int
    channels: int
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.label_bytes not in (1, 2):
            raise DataError("label_bytes must be 1 or 2")

    @property
    def record_size(self) -> int:
        return self.label_bytes + self.height * self.width * self.channels


def load_raw_binary(path: str, fmt: RawImageFormat, class_count: int) -> Dataset:
    """Load a CIFAR-style raw binary file; values scaled to [0, 1] then standardized."""
    with open(path, "rb") as fh:
        raw = fh.read()
    rs = fmt.record_size
    if len(raw) == 0 or len(raw) % rs != 0:
        offset = (len(raw) // rs) * rs
        raise DataError(
            f"{path}: file size {len(raw)} is not a multiple of record size {rs}"
            f" (trailing bytes start at offset {offset})"
        )
    n = len(raw) // rs
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, rs)
    if fmt.label_bytes == 1:
        labels = buf[:, 0].astype(np.int64)
    else:
        # coarse label byte first, fine label second; keep the fine one
        labels = buf[:, 1].astype(np.int64)
    pixels = buf[:, fmt.label_bytes:].astype(np.float64) / 255.0
    # channel-major rows -> (n, h, w, c)
    imgs = pixels.reshape(n, fmt.channels, fmt.height, fmt.width).transpose(0, 2, 3, 1)
    imgs = _standardize(imgs, fmt)
    return Dataset(imgs, labels, np.arange(n), class_count)


def _standardize(imgs: np.ndarray, fmt: RawImageFormat) -> np.ndarray:
    if fmt.mean:
        imgs = imgs - np.asarray(fmt.mean)[None, None, None, :]
    if fmt.std:
        imgs = imgs / np.asarray(fmt.std)[None, None, None, :]
    return imgs


def load_png_dirs(path: str, fmt: RawImageFormat | None = None) -> Dataset:
    """Directory-of-images layout: one subdirectory per class, sorted order."""
    from PIL import Image

    classes = sorted(
        d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d))
    )
    if not classes:
        raise DataError(f"{path}: no class subdirectories found")
    feats, labels = [], []
    for ci, cls in enumerate(classes):
        cdir = os.path.join(path, cls)
        for fname in sorted(os.listdir(cdir)):
            img = np.asarray(Image.open(os.path.join(cdir, fname)), dtype=np.float64) / 255.0
            if img.ndim == 2:
                img = img[:, :, None]
            feats.append(img)
            labels.append(ci)
    feats = np.stack(feats)
    if fmt is not None:
        feats = _standardize(feats, fmt)
    return Dataset(feats, np.array(labels), np.arange(len(labels)), len(classes))


def load_image_dataset(path: str, fmt, class_count: int | None = None) -> Dataset:
    """Dispatch on layout: a raw binary file or a directory of class folders."""
    if os.path.isdir(path):
        return load_png_dirs(path, fmt)
    if class_count is None:
        raise DataError("class_count is required for raw binary files")
    return load_raw_binary(path, fmt, class_count)


# ---------------------------------------------------------------------------
# Serialization of synthetic datasets
# ---------------------------------------------------------------------------

_DATASET_MAGIC = b"HKDD"
_DATASET_VERSION = 1


def save_dataset(path: str, ds: Dataset) -> None:
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        header = np.array(
            [_DATASET_VERSION, len(ds), ds.class_count, ds.features.ndim]
            + list(ds.features.shape[1:]),
            dtype=np.int64,
        )
        fh.write(np.array([len(header)], dtype=np.int64).tobytes())
        fh.write(header.tobytes())
        fh.write(ds.labels.tobytes())
        fh.write(ds.ids.tobytes())
        fh.write(ds.features.tobytes())


def load_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        if fh.read(4) != _DATASET_MAGIC:
            raise DataError(f"{path}: not a serialized dataset")
        (hlen,) = np.frombuffer(fh.read(8), dtype=np.int64)
        header = np.frombuffer(fh.read(8 * int(hlen)), dtype=np.int64)
        version, n, class_count, ndim = header[:4]
        if version != _DATASET_VERSION:
            raise DataError(f"{path}: unsupported dataset version {version}")
        shape = (int(n),) + tuple(int(d) for d in header[4:3 + int(ndim)])
        labels = np.frombuffer(fh.read(8 * int(n)), dtype=np.int64).copy()
        ids = np.frombuffer(fh.read(8 * int(n)), dtype=np.int64).copy()
        feats = np.frombuffer(fh.read(), dtype=np.float64).reshape(shape).copy()
    return Dataset(feats, labels, ids, int(class_count))


def deterministic_augment(
    features: np.ndarray,
    ids: np.ndarray,
    epoch: int,
    seed: int,
    noise_std: float = 0.0,
    hflip: bool = False,
) -> np.ndarray:
    """Optional augmentation seeded per (sample id, epoch).

    The randomness depends only on the sample's stable id and the epoch, never
    on batch composition, so a sample receives the same augmented view no
    matter how the epoch is shuffled. Off by default (both knobs zero/false
    return the input untouched).
    """
    if noise_std == 0.0 and not hflip:
        return features
    out = np.array(features, copy=True)
    for i, sid in enumerate(ids):
        rng = np.random.default_rng([seed, epoch, int(sid)])
        if noise_std > 0.0:
            out[i] = out[i] + noise_std * rng.standard_normal(out[i].shape)
        if hflip and out.ndim == 4 and rng.random() < 0.5:
            out[i] = out[i][:, ::-1, :]
    return out


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic per-epoch shuffle, independent of prior epochs."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iter_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Yield index arrays covering a shuffled epoch; last short batch kept."""
    order = epoch_order(n, seed, epoch)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]
