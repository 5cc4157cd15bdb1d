"""Exception types shared across the package."""


class SiplError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SiplError, ValueError):
    """Operands have incompatible shapes or extents."""


class ConfigError(SiplError, ValueError):
    """A configuration key, value, or combination is invalid."""


class DegenerateInputError(SiplError, ValueError):
    """An input is numerically degenerate (e.g. zero-norm vector)."""


class ScheduleError(SiplError, RuntimeError):
    """The cluster filter produced an impossible state."""


class UsageError(SiplError, ValueError):
    """An operation was called outside its supported regime."""


class FormatError(SiplError, ValueError):
    """A volume file is malformed; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int = -1):
        super().__init__(message)
        self.offset = offset


class PhantomSpecError(SiplError, ValueError):
    """A phantom specification cannot be realized."""
