from . import ops
from .checkpoint import CheckpointError, load_arrays, save_arrays
from .gradcheck import REGISTRY, OpCheck, grad_check, run_registry
from .optim import AdamW
from .tensor import Parameter, Tensor, as_tensor

__all__ = [
    "AdamW",
    "CheckpointError",
    "OpCheck",
    "Parameter",
    "REGISTRY",
    "Tensor",
    "as_tensor",
    "grad_check",
    "load_arrays",
    "ops",
    "run_registry",
    "save_arrays",
]
