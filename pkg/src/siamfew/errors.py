"""Exception hierarchy shared by all siamfew modules."""


class SiamfewError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(SiamfewError):
    """Tensor shapes or extents do not satisfy an operation's contract."""


class ContractError(SiamfewError):
    """An operation was called in a state its contract forbids."""


class ConfigError(SiamfewError):
    """Invalid configuration value or combination."""


class DataError(SiamfewError):
    """Dataset files are missing, unreadable, or malformed."""


class NumericError(SiamfewError):
    """A numeric result left the domain the computation requires."""


class CheckpointError(SiamfewError):
    """Checkpoint bytes do not match the expected binary format."""
