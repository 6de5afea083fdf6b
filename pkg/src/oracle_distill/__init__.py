"""Oracle-guided self-distillation for sequence models, at a size where
every claim can be checked against exact enumeration and finite differences.
"""

from .estimator import AedDistiller, CtcDistiller
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "AedDistiller",
    "CtcDistiller",
    "Tensor",
    "backward",
    "grad_check",
    "__version__",
]
