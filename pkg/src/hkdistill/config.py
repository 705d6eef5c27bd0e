"""Run configuration: a plain INI-style key=value format, snapshotted verbatim
into the run directory so every run is reproducible from its own artifacts."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .ensemble import EnsembleConfig
from .metaloop import MODES, InnerLoopConfig


class ConfigError(Exception):
    """Invalid configuration; message names the offending section.field."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"            # synthetic | raw-binary | png-dirs | serialized
    classes: int = 10
    dim: int = 32
    train_per_class: int = 500
    eval_per_class: int = 100
    meta_per_class: int = 10
    separation: float = 3.0
    data_seed: int = 1
    path: str = ""
    eval_path: str = ""
    label_bytes: int = 1
    height: int = 0
    width: int = 0
    channels: int = 0
    mean: tuple[float, ...] = ()
    std: tuple[float, ...] = ()


@dataclass(frozen=True)
class OuterOptConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    mode: str = "hkd"
    seed: int = 0
    epochs: int = 60
    batch_size: int = 64
    temperature: float = 1.0
    out_dir: str = "run"
    meta_target: str = "scalar"        # scalar | onehot
    data: DatasetConfig = field(default_factory=DatasetConfig)
    teacher_hidden: tuple[int, ...] = (256, 256)
    teacher_tap: int = -1
    student_hidden: tuple[int, ...] = (32,)
    student_tap: int = -1
    metanet_hidden: int = 64
    search_range: float = 0.5
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    inner: InnerLoopConfig = field(default_factory=InnerLoopConfig)
    outer: OuterOptConfig = field(default_factory=OuterOptConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"run.mode: {self.mode!r} is not one of {MODES}")
        if self.epochs < 0:
            raise ConfigError("run.epochs: must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("run.batch_size: must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("run.temperature: must be positive")
        if self.outer.lr <= 0:
            raise ConfigError("outer.lr: must be positive")
        if self.meta_target not in ("scalar", "onehot"):
            raise ConfigError("run.meta_target: must be 'scalar' or 'onehot'")


def _ints(raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    return tuple(int(x) for x in raw.split(",") if x.strip()) if raw else ()


def _floats(raw: str) -> tuple[float, ...]:
    raw = raw.strip()
    return tuple(float(x) for x in raw.split(",") if x.strip()) if raw else ()


def parse_config(path: str, overrides: dict | None = None) -> RunConfig:
    """Read an INI config file into a RunConfig.

    ``overrides`` maps run-section keys (e.g. mode, seed, out_dir) to values
    taking precedence over the file, for CLI flags.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")

    def get(section, key, cast, default):
        if section == "run" and overrides and key in overrides and overrides[key] is not None:
            return cast(overrides[key]) if not isinstance(overrides[key], tuple) else overrides[key]
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            if cast is bool:
                return parser.getboolean(section, key)
            return cast(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from exc

    try:
        data = DatasetConfig(
            kind=get("data", "kind", str, "synthetic"),
            classes=get("data", "classes", int, 10),
            dim=get("data", "dim", int, 32),
            train_per_class=get("data", "train_per_class", int, 500),
            eval_per_class=get("data", "eval_per_class", int, 100),
            meta_per_class=get("data", "meta_per_class", int, 10),
            separation=get("data", "separation", float, 3.0),
            data_seed=get("data", "data_seed", int, 1),
            path=get("data", "path", str, ""),
            eval_path=get("data", "eval_path", str, ""),
            label_bytes=get("data", "label_bytes", int, 1),
            height=get("data", "height", int, 0),
            width=get("data", "width", int, 0),
            channels=get("data", "channels", int, 0),
            mean=get("data", "mean", _floats, ()),
            std=get("data", "std", _floats, ()),
        )
        ens = EnsembleConfig(
            epsilon=get("ensemble", "epsilon", float, 0.5),
            uncertainty_threshold=get("ensemble", "uncertainty_threshold", float, 0.6),
            normalize_entropy=get("ensemble", "normalize_entropy", bool, True),
        )
        inner = InnerLoopConfig(
            interval=get("inner", "interval", int, 100),
            meta_lr=get("inner", "meta_lr", float, 1e-3),
            pseudo_lr=get("inner", "pseudo_lr", float, None),
        )
        outer = OuterOptConfig(
            lr=get("outer", "lr", float, 0.05),
            momentum=get("outer", "momentum", float, 0.9),
            weight_decay=get("outer", "weight_decay", float, 5e-4),
            decay_epochs=get("outer", "decay_epochs", _ints, ()),
            decay_factor=get("outer", "decay_factor", float, 0.1),
        )
        return RunConfig(
            mode=get("run", "mode", str, "hkd"),
            seed=get("run", "seed", int, 0),
            epochs=get("run", "epochs", int, 60),
            batch_size=get("run", "batch_size", int, 64),
            temperature=get("run", "temperature", float, 1.0),
            out_dir=get("run", "out_dir", str, "run"),
            meta_target=get("run", "meta_target", str, "scalar"),
            data=data,
            teacher_hidden=get("teacher", "hidden_dims", _ints, (256, 256)),
            teacher_tap=get("teacher", "feature_tap", int, -1),
            student_hidden=get("student", "hidden_dims", _ints, (32,)),
            student_tap=get("student", "feature_tap", int, -1),
            metanet_hidden=get("metanet", "hidden_width", int, 64),
            search_range=get("metanet", "search_range", float, 0.5),
            ensemble=ens,
            inner=inner,
            outer=outer,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def config_snapshot(cfg: RunConfig) -> str:
    """Serialize a RunConfig back to the INI format, for the run directory."""
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(str(x) for x in v)
        return str(v)

    sections = {
        "run": {
            "mode": cfg.mode, "seed": cfg.seed, "epochs": cfg.epochs,
            "batch_size": cfg.batch_size, "temperature": cfg.temperature,
            "out_dir": cfg.out_dir, "meta_target": cfg.meta_target,
        },
        "data": {
            "kind": cfg.data.kind, "classes": cfg.data.classes, "dim": cfg.data.dim,
            "train_per_class": cfg.data.train_per_class,
            "eval_per_class": cfg.data.eval_per_class,
            "meta_per_class": cfg.data.meta_per_class,
            "separation": cfg.data.separation, "data_seed": cfg.data.data_seed,
            "path": cfg.data.path, "eval_path": cfg.data.eval_path,
            "label_bytes": cfg.data.label_bytes, "height": cfg.data.height,
            "width": cfg.data.width, "channels": cfg.data.channels,
            "mean": fmt(cfg.data.mean), "std": fmt(cfg.data.std),
        },
        "teacher": {"hidden_dims": fmt(cfg.teacher_hidden), "feature_tap": cfg.teacher_tap},
        "student": {"hidden_dims": fmt(cfg.student_hidden), "feature_tap": cfg.student_tap},
        "metanet": {"hidden_width": cfg.metanet_hidden, "search_range": cfg.search_range},
        "ensemble": {
            "epsilon": cfg.ensemble.epsilon,
            "uncertainty_threshold": cfg.ensemble.uncertainty_threshold,
            "normalize_entropy": cfg.ensemble.normalize_entropy,
        },
        "inner": {
            "interval": cfg.inner.interval, "meta_lr": cfg.inner.meta_lr,
            "pseudo_lr": "" if cfg.inner.pseudo_lr is None else cfg.inner.pseudo_lr,
        },
        "outer": {
            "lr": cfg.outer.lr, "momentum": cfg.outer.momentum,
            "weight_decay": cfg.outer.weight_decay,
            "decay_epochs": fmt(cfg.outer.decay_epochs),
            "decay_factor": cfg.outer.decay_factor,
        },
    }
    lines = []
    for name, body in sections.items():
        lines.append(f"[{name}]")
        for k, v in body.items():
            lines.append(f"{k} = {fmt(v)}")
        lines.append("")
    return "\n".join(lines)
