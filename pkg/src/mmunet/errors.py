"""Exception types shared across the library."""


class MmunetError(Exception):
    """Base class for all library errors."""


class DimensionError(MmunetError):
    """Shapes are incompatible for the requested operation."""


class ContractError(MmunetError):
    """A caller violated an operation's precondition."""


class ConfigError(MmunetError):
    """A configuration value is invalid or inconsistent."""


class IngestionError(MmunetError):
    """A dataset directory is malformed (missing/mismatched files)."""


class FormatError(MmunetError):
    """A binary file (checkpoint or image) failed to parse."""


class TrainingAborted(MmunetError):
    """Training stopped because the loss became non-finite."""
