"""Progressive knowledge distillation for online (causal) per-frame action detection."""
from ._accel import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]
