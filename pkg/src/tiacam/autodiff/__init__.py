from . import ops
from .gradcheck import GradCheckReport, finite_diff_check, param_gradcheck
from .ops import stop_grad
from .tensor import Tape, TapeEntry, Tensor, as_tensor, backward

__all__ = [
    "GradCheckReport",
    "Tape",
    "TapeEntry",
    "Tensor",
    "as_tensor",
    "backward",
    "finite_diff_check",
    "ops",
    "param_gradcheck",
    "stop_grad",
]
