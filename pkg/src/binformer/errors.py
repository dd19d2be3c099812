"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's contract."""


class NumericError(ArithmeticError):
    """A non-finite value was detected where finiteness is required."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


class NoLossPositionsError(ValueError):
    """A loss was requested over an empty set of included positions."""


class FitError(ValueError):
    """Scaler fitting failed (degenerate or all-missing dimension)."""


class CheckpointError(IOError):
    """Checkpoint file is malformed, truncated, or version-incompatible."""


class DivergedError(RuntimeError):
    """Training aborted because the loss became non-finite."""


class DeterminismError(RuntimeError):
    """Two evaluations of a supposedly deterministic function differed."""
