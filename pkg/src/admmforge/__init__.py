"""Neural-network weight pruning and quantization via ADMM regularization,
with a progressive multi-step orchestrator and comparison baselines."""

__version__ = "0.1.0"

from .errors import AdmmForgeError

__all__ = ["AdmmForgeError", "__version__"]
