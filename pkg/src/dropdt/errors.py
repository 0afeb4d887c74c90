"""Exception types shared across the package."""


class DropDTError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(DropDTError, ValueError):
    """An operation received arguments violating its preconditions."""


class ConfigurationError(DropDTError, ValueError):
    """A config object or flag combination is inconsistent."""


class InvalidWindowError(DropDTError, ValueError):
    """A context window crosses a trajectory boundary."""


class InsufficientDataError(DropDTError, ValueError):
    """A dataset is too small for the requested statistic."""


class SteadyStateUndefinedError(DropDTError, ValueError):
    """The two-state drop chain has no unique stationary distribution."""


class ProtocolError(DropDTError, RuntimeError):
    """An environment or rollout was driven out of its legal state sequence."""


class FormatError(DropDTError, RuntimeError):
    """A dataset/checkpoint file is corrupt or schema-incompatible."""


class NumericalError(DropDTError, RuntimeError):
    """Training produced non-finite values and cannot continue."""
