"""Open-set audio pattern discovery: segmentation, Log-Mel features,
contrastive pre-training and prototype-based novel class discovery."""

from .errors import CheckpointError, ConfigError, DataError, NumericError, OADError

__version__ = "0.1.0"

__all__ = ["CheckpointError", "ConfigError", "DataError", "NumericError", "OADError", "__version__"]
