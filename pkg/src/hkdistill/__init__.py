"""hkdistill: knowledge distillation with per-instance dynamic hint weights.

A meta-weight network maps (student, teacher) predictions to per-sample loss
coefficients, trained by differentiating a meta loss through a one-step
pseudo-student update; an uncertainty-gated EMA smooths the weights over
visits. Built on a small second-order reverse-mode autodiff core.
"""

__version__ = "0.1.0"

from . import autodiff, data, ensemble, losses, metaloop, models, optim, trainer, verify  # noqa: F401
from .autodiff import Tape, Tensor, grad, no_grad  # noqa: F401
from .ensemble import EnsembleConfig, WeightPair, WeightStore, ensemble as ensemble_pair  # noqa: F401
from .models import ClassifierSpec, MetaNetConfig, ModelParams  # noqa: F401
