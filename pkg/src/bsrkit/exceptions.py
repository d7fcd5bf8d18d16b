"""Exception hierarchy shared by every module."""


class BsrError(Exception):
    """Base class for all errors raised by bsrkit."""


class ConfigurationError(BsrError, ValueError):
    """Invalid parameters, configuration files or datasets."""


class ShapeError(ConfigurationError):
    """Operands whose shapes do not agree."""


class UsageError(BsrError, ValueError):
    """An API used out of its documented protocol."""


class IngestionError(BsrError, OSError):
    """Image directories or label files that cannot be read."""


class CheckpointError(BsrError, ValueError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
