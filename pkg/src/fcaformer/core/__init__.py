from . import functional
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .gradcheck import grad_check
from .module import Module, buffer, param
from .random import philox, trunc_normal
from .tensor import (
    DTYPES,
    MacCounter,
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    count_macs,
    dtype_scope,
    no_grad,
)

__all__ = [
    "DTYPES", "MacCounter", "Module", "NonFiniteError", "Tape", "Tensor", "as_tensor",
    "backward", "buffer", "count_macs", "dtype_scope", "functional", "grad_check",
    "load_checkpoint", "no_grad", "param", "philox", "save_checkpoint", "trunc_normal",
]
