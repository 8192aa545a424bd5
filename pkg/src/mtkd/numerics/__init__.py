from .gradcheck import GradCheckReport, grad_check, grad_check_report
from .optim import LR_KINDS, LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import (
    BCE_EPS,
    Tensor,
    absolute,
    activation,
    add,
    backward,
    batch_slice,
    bce_loss,
    branch_trace,
    concat_channels,
    conv2d,
    maxpool2x2,
    mean,
    mse_loss,
    mul,
    relu,
    scale,
    sigmoid,
    sub,
    total,
    upsample2x_nearest,
)

__all__ = [
    "BCE_EPS", "LR_KINDS", "LrSchedule", "OptimizerState", "Tensor", "absolute",
    "activation", "adamw_step", "add", "backward", "batch_slice", "bce_loss",
    "branch_trace", "concat_channels", "conv2d", "GradCheckReport", "grad_check",
    "grad_check_report", "lr_at", "maxpool2x2", "mean",
    "mse_loss", "mul", "relu", "scale", "sigmoid", "sub", "total",
    "upsample2x_nearest",
]
