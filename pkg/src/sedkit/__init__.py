"""Scale-equivalent distillation for semi-supervised object detection."""
from sedkit.backend import NAME as BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
