"""Noise-contrastive test-time training on a small numpy autodiff engine."""

from .model import BlockSpec, ModelSpec, ModelState, NCTTTModel
from .nce import NoiseConfig

__version__ = "0.1.0"

__all__ = ["BlockSpec", "ModelSpec", "ModelState", "NCTTTModel", "NoiseConfig", "__version__"]
