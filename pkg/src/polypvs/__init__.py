"""Online video polyp segmentation: short-term alignment + long-term masked memory."""

from polypvs.config import ModelConfig, load_config, save_config, validate_config

__version__ = "0.1.0"

__all__ = ["ModelConfig", "load_config", "save_config", "validate_config", "__version__"]
