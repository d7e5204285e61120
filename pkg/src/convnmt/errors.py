"""Exception types shared across the toolkit."""


class ConvnmtError(Exception):
    """Base class for toolkit errors."""


class ShapeError(ConvnmtError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigError(ConvnmtError):
    """A configuration value is out of its legal range."""


class DataError(ConvnmtError):
    """Corpus, vocabulary or dictionary input is malformed."""


class CheckpointError(ConvnmtError):
    """A checkpoint file is missing, truncated or corrupt."""
