from .core import Gradients, Record, Tape, Tensor, active_tape, backward, default_dtype, parameter, precision
from .gradcheck import check_entries, finite_diff_check, relative_error
from .optim import AdamW, AdamWState, adamw_step
from . import ops

__all__ = [
    "AdamW", "AdamWState", "Gradients", "Record", "Tape", "Tensor", "active_tape",
    "adamw_step", "backward", "check_entries", "default_dtype", "finite_diff_check",
    "ops", "parameter", "precision", "relative_error",
]
