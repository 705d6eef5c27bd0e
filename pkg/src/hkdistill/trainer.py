"""Training orchestration: teacher pre-training, the four distillation modes,
metrics and weight-curve logging, checkpoints, and deterministic run setup."""

from __future__ import annotations

import logging
import os

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import ConfigError, RunConfig, config_snapshot
from .data import (
    DataError,
    Dataset,
    RawImageFormat,
    iter_batches,
    load_dataset,
    load_image_dataset,
    make_synth_task,
    split_meta,
)
from .ensemble import WeightStore
from .losses import per_sample_cross_entropy
from .metaloop import TeacherCache, meta_step, outer_step
from .models import (
    ClassifierSpec,
    MetaNetConfig,
    ModelParams,
    classifier_forward,
    init_classifier,
    init_metanet,
    init_projector,
    load_checkpoint,
    save_checkpoint,
)
from .optim import SGD, Adam

log = logging.getLogger("hkdistill")

METRICS_HEADER = (
    "iteration,epoch,ce,kd_van,kd_aux,total,beta_mean,gamma_mean,"
    "meta_loss,error_subset_size,eval_acc"
)
WEIGHTS_HEADER = "epoch,iteration,beta_mean,beta_std,gamma_mean,gamma_std,frac_low_uncertainty"


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    return repr(float(v))


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Returns (train minus meta, meta-set, eval)."""
    d = cfg.data
    if d.kind == "synthetic":
        train, eval_ds = make_synth_task(
            d.classes, d.dim, d.train_per_class, d.eval_per_class,
            d.separation, d.data_seed,
        )
    elif d.kind == "serialized":
        train, eval_ds = load_dataset(d.path), load_dataset(d.eval_path)
    elif d.kind in ("raw-binary", "png-dirs"):
        fmt = RawImageFormat(d.label_bytes, d.height, d.width, d.channels, d.mean, d.std)
        train = load_image_dataset(d.path, fmt, d.classes)
        eval_ds = load_image_dataset(d.eval_path, fmt, d.classes)
    else:
        raise ConfigError(f"data.kind: unknown kind {d.kind!r}")
    train, meta = split_meta(train, d.meta_per_class, d.data_seed)
    return train, meta, eval_ds


def _classifier_spec(cfg: RunConfig, hidden, tap) -> ClassifierSpec:
    d = cfg.data
    input_dim = d.dim if d.kind in ("synthetic", "serialized") else d.height * d.width * d.channels
    return ClassifierSpec(input_dim, tuple(hidden), d.classes, tap)


def teacher_spec(cfg: RunConfig) -> ClassifierSpec:
    return _classifier_spec(cfg, cfg.teacher_hidden, cfg.teacher_tap)


def student_spec(cfg: RunConfig) -> ClassifierSpec:
    return _classifier_spec(cfg, cfg.student_hidden, cfg.student_tap)


def evaluate(params: ModelParams, spec: ClassifierSpec, ds: Dataset, chunk: int = 1024) -> float:
    correct = 0
    feats = ds.flat_features()
    with ad.no_grad():
        consts = params.constants()
        for start in range(0, len(ds), chunk):
            pred = classifier_forward(consts, spec, feats[start:start + chunk])
            correct += int((np.argmax(pred.probs.data, axis=1)
                            == ds.labels[start:start + chunk]).sum())
    return correct / len(ds)


def _write_run_info(out_dir: str, cfg: RunConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.ini"), "w") as fh:
        fh.write(config_snapshot(cfg))
    with open(os.path.join(out_dir, "run_info.txt"), "w") as fh:
        fh.write(f"version {__version__}\nseed {cfg.seed}\nmode {cfg.mode}\n")


def _arch_arrays(spec: ClassifierSpec) -> dict[str, np.ndarray]:
    return {
        "input_dim": np.array([spec.input_dim], dtype=np.float64),
        "hidden_dims": np.array(spec.hidden_dims, dtype=np.float64),
        "class_count": np.array([spec.class_count], dtype=np.float64),
        "feature_tap": np.array([spec.tap], dtype=np.float64),
    }


def _check_arch(arrays: dict[str, np.ndarray], spec: ClassifierSpec, path: str) -> None:
    ok = (
        int(arrays["input_dim"][0]) == spec.input_dim
        and tuple(int(x) for x in arrays["hidden_dims"]) == spec.hidden_dims
        and int(arrays["class_count"][0]) == spec.class_count
        and int(arrays["feature_tap"][0]) == spec.tap
    )
    if not ok:
        raise ConfigError(f"teacher checkpoint {path} does not match the configured architecture")


# ---------------------------------------------------------------------------
# Teacher pre-training
# ---------------------------------------------------------------------------

def train_teacher(cfg: RunConfig) -> str:
    """Cross-entropy-only training of the teacher; returns the checkpoint path."""
    _write_run_info(cfg.out_dir, cfg)
    train, meta, eval_ds = build_datasets(cfg)
    spec = teacher_spec(cfg)
    params = init_classifier(spec, np.random.default_rng([cfg.seed, 100]))
    opt = SGD(params, cfg.outer.lr, cfg.outer.momentum, cfg.outer.weight_decay)

    rows = [METRICS_HEADER]
    feats = train.flat_features()
    iteration = 0
    lr = cfg.outer.lr
    for epoch in range(cfg.epochs):
        if epoch in cfg.outer.decay_epochs:
            lr *= cfg.outer.decay_factor
            opt.lr = lr
        for index in iter_batches(len(train), cfg.batch_size, cfg.seed, epoch):
            iteration += 1
            with ad.Tape():
                leaves = params.leaves()
                pred = classifier_forward(leaves, spec, feats[index])
                loss = ad.reduce_mean(per_sample_cross_entropy(pred.probs, train.labels[index]))
                names = list(leaves)
                grads = ad.grad(loss, [leaves[n] for n in names])
            opt.step({n: g.data for n, g in zip(names, grads)})
            rows.append(
                f"{iteration},{epoch},{_fmt(loss.data)},{_fmt(0.0)},{_fmt(0.0)},"
                f"{_fmt(loss.data)},{_fmt(1.0)},{_fmt(1.0)},,,"
            )
        acc = evaluate(params, spec, eval_ds)
        rows[-1] += _fmt(acc)
        log.info("teacher epoch %d eval_acc %.4f", epoch, acc)

    with open(os.path.join(cfg.out_dir, "metrics.csv"), "w") as fh:
        fh.write("\n".join(rows) + "\n")
    ckpt = os.path.join(cfg.out_dir, "teacher_checkpoint.txt")
    save_checkpoint(ckpt, {"teacher": params, "arch": _arch_arrays(spec)})
    return ckpt


# ---------------------------------------------------------------------------
# Distillation
# ---------------------------------------------------------------------------

class DistillRun:
    """One distillation run in any of the four modes."""

    def __init__(self, cfg: RunConfig, teacher_ckpt: str) -> None:
        self.cfg = cfg
        self.train_ds, self.meta_ds, self.eval_ds = build_datasets(cfg)
        self.t_spec = teacher_spec(cfg)
        self.s_spec = student_spec(cfg)

        groups = load_checkpoint(teacher_ckpt)
        if "teacher" not in groups:
            raise ConfigError(f"{teacher_ckpt}: no teacher group in checkpoint")
        if "arch" in groups:
            _check_arch(groups["arch"], self.t_spec, teacher_ckpt)
        self.teacher = ModelParams(groups["teacher"])

        rng = np.random.default_rng([cfg.seed, 200])
        self.student = init_classifier(self.s_spec, rng)
        self.projector = init_projector(self.s_spec.feature_dim, self.t_spec.feature_dim, rng)
        self.metanet_cfg = MetaNetConfig(cfg.data.classes, cfg.metanet_hidden, cfg.search_range)
        self.metanet = init_metanet(self.metanet_cfg, rng)
        self.store = WeightStore()

        self.student_opt = SGD(self.student, cfg.outer.lr, cfg.outer.momentum,
                               cfg.outer.weight_decay)
        self.projector_opt = SGD(self.projector, cfg.outer.lr, cfg.outer.momentum,
                                 cfg.outer.weight_decay)
        self.meta_opt = Adam(self.metanet, cfg.inner.meta_lr, cfg.inner.betas, cfg.inner.eps)

        self.cache = TeacherCache.build(self.teacher, self.t_spec, self.train_ds.flat_features())
        self.meta_features = self.meta_ds.flat_features()

        self.metric_rows = [METRICS_HEADER]
        self.weight_rows = [WEIGHTS_HEADER]
        self.best_acc = -1.0

    def _checkpoint(self, name: str) -> None:
        save_checkpoint(os.path.join(self.cfg.out_dir, name), {
            "student": self.student,
            "projector": self.projector,
            "metanet": self.metanet,
            "weight_store": self.store.to_arrays(),
            "arch": _arch_arrays(self.s_spec),
        })

    def _flush_logs(self) -> None:
        with open(os.path.join(self.cfg.out_dir, "metrics.csv"), "w") as fh:
            fh.write("\n".join(self.metric_rows) + "\n")
        with open(os.path.join(self.cfg.out_dir, "weights.csv"), "w") as fh:
            fh.write("\n".join(self.weight_rows) + "\n")

    def run(self) -> float:
        cfg = self.cfg
        _write_run_info(cfg.out_dir, cfg)
        iteration = 0
        lr = cfg.outer.lr
        eval_acc = -1.0
        try:
            for epoch in range(cfg.epochs):
                if epoch in cfg.outer.decay_epochs:
                    lr *= cfg.outer.decay_factor
                    self.student_opt.lr = lr
                    self.projector_opt.lr = lr
                for index in iter_batches(len(self.train_ds), cfg.batch_size, cfg.seed, epoch):
                    iteration += 1
                    batch = self.cache.batch(self.train_ds, index)
                    meta_info = {"meta_loss": None, "error_subset_size": None}
                    if cfg.mode in ("mwn", "hkd") and iteration % cfg.inner.interval == 0:
                        pseudo_lr = cfg.inner.pseudo_lr if cfg.inner.pseudo_lr is not None else lr
                        meta_info = meta_step(
                            self.student, self.metanet, self.projector, self.meta_opt,
                            batch, self.meta_features, self.meta_ds.labels,
                            self.s_spec, self.metanet_cfg, pseudo_lr,
                            cfg.temperature, cfg.meta_target,
                        )
                        if meta_info["skipped"]:
                            log.info("iteration %d: empty error subset, meta update skipped",
                                     iteration)
                    breakdown, stats = outer_step(
                        self.student, self.projector, self.metanet, self.s_spec,
                        self.metanet_cfg, self.store, cfg.ensemble, cfg.mode,
                        batch, self.student_opt, self.projector_opt, cfg.temperature,
                    )
                    self.metric_rows.append(
                        f"{iteration},{epoch},{_fmt(breakdown.ce)},{_fmt(breakdown.kd_van)},"
                        f"{_fmt(breakdown.kd_aux)},{_fmt(breakdown.total.data)},"
                        f"{_fmt(stats['beta_mean'])},{_fmt(stats['gamma_mean'])},"
                        f"{_fmt(meta_info.get('meta_loss'))},"
                        f"{'' if meta_info.get('error_subset_size') is None else meta_info['error_subset_size']},"
                    )
                    self.weight_rows.append(
                        f"{epoch},{iteration},{_fmt(stats['beta_mean'])},{_fmt(stats['beta_std'])},"
                        f"{_fmt(stats['gamma_mean'])},{_fmt(stats['gamma_std'])},"
                        f"{_fmt(stats['frac_low_uncertainty'])}"
                    )
                eval_acc = evaluate(self.student, self.s_spec, self.eval_ds)
                if self.metric_rows[-1] != METRICS_HEADER:
                    self.metric_rows[-1] += _fmt(eval_acc)
                log.info("mode %s epoch %d eval_acc %.4f", cfg.mode, epoch, eval_acc)
                self._checkpoint("checkpoint_last.txt")
                if eval_acc > self.best_acc:
                    self.best_acc = eval_acc
                    self._checkpoint("checkpoint_best.txt")
        except KeyboardInterrupt:
            self._checkpoint("checkpoint_interrupt.txt")
            self._flush_logs()
            raise
        except ad.NumericalError:
            # keep the metrics so far; the last per-epoch checkpoint stays on disk
            self._flush_logs()
            raise
        if cfg.epochs == 0:
            self._checkpoint("checkpoint_last.txt")
            eval_acc = evaluate(self.student, self.s_spec, self.eval_ds)
        self._flush_logs()
        return eval_acc


def distill(cfg: RunConfig, teacher_ckpt: str) -> float:
    """Run one distillation training; returns the final eval accuracy."""
    return DistillRun(cfg, teacher_ckpt).run()


# ---------------------------------------------------------------------------
# Curve export
# ---------------------------------------------------------------------------

def export_curves(run_dir: str) -> tuple[str, str]:
    """Re-emit the weight log at iteration and epoch granularity.

    Returns paths (iteration-level CSV, epoch-averaged CSV).
    """
    src = os.path.join(run_dir, "weights.csv")
    if not os.path.exists(src):
        raise DataError(
            f"{run_dir}: missing weight log; expected files: weights.csv, metrics.csv"
        )
    with open(src) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != WEIGHTS_HEADER:
        raise DataError(f"{src}: unexpected header")

    iter_path = os.path.join(run_dir, "curves_iteration.csv")
    with open(iter_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")

    by_epoch: dict[int, list[list[float]]] = {}
    for line in lines[1:]:
        parts = line.split(",")
        by_epoch.setdefault(int(parts[0]), []).append([float(x) for x in parts[2:]])
    epoch_path = os.path.join(run_dir, "curves_epoch.csv")
    rows = ["epoch,beta_mean,beta_std,gamma_mean,gamma_std,frac_low_uncertainty"]
    for epoch in sorted(by_epoch):
        vals = np.array(by_epoch[epoch])
        rows.append(f"{epoch}," + ",".join(_fmt(v) for v in vals.mean(axis=0)))
    with open(epoch_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return iter_path, epoch_path
