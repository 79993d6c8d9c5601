"""Exception types shared across the pipeline."""


class OADError(Exception):
    """Base class for all pipeline errors."""


class DataError(OADError):
    """Bad or unreadable input data (files, manifests, shapes)."""


class NumericError(OADError):
    """Non-finite values appeared during a numeric computation."""


class CheckpointError(DataError):
    """Corrupt, truncated or incompatible checkpoint file."""


class ConfigError(OADError):
    """One or more configuration values are invalid.

    ``problems`` holds every violation found, as ``(key_path, message)`` pairs.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{k}: {m}" for k, m in self.problems))
