"""CPU-only semantic labeling networks with self-cascaded context aggregation."""
from scasnet.kernels import BACKEND
from scasnet.model import ConfigError, ModelConfig, ScasNet, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "ModelConfig",
    "ScasNet",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
