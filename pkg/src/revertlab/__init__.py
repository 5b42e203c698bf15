"""Inversion attacks on split-learning language models, at desk scale."""

from .config import RunConfig, load_config
from .tinylm import ModelConfig, TapPoint, TinyLM

__all__ = ["ModelConfig", "RunConfig", "TapPoint", "TinyLM", "load_config"]
__version__ = "0.1.0"
