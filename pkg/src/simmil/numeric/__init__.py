from . import tensor as F
from .checkpoint import Checkpoint, fingerprint_of
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import BatchNorm, Conv2d, Linear, Module
from .optim import (
    AdamKind,
    CosineSchedule,
    Optimizer,
    OptimizerState,
    SGDMomentum,
    StepSchedule,
    adam_step,
    schedule_lr,
    sgd_momentum_step,
)
from .tensor import Tensor, tensor

__all__ = [
    "F", "Tensor", "tensor", "Module", "Linear", "Conv2d", "BatchNorm",
    "Optimizer", "OptimizerState", "SGDMomentum", "AdamKind", "StepSchedule",
    "CosineSchedule", "sgd_momentum_step", "adam_step", "schedule_lr",
    "Checkpoint", "fingerprint_of", "check_gradients", "numeric_grad", "relative_error",
]
