"""Exception types shared across the package."""


class CgpError(Exception):
    """Base class for all package errors."""


class ShapeError(CgpError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(CgpError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(CgpError, ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataFormatError(CgpError, ValueError):
    """A file on disk does not match its binary format."""


class CheckpointError(CgpError, ValueError):
    """A parameter checkpoint is unreadable or does not fit the model."""
