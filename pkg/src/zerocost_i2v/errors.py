"""Exception hierarchy shared across the package."""


class ZeroCostError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ZeroCostError, ValueError):
    """Operand shapes do not conform."""


class NumericError(ZeroCostError, ArithmeticError):
    """NaN or Inf encountered where finite values are required."""


class ContractError(ZeroCostError, RuntimeError):
    """An API precondition was violated (e.g. non-scalar loss, reused tape)."""


class ConfigError(ZeroCostError, ValueError):
    """Invalid model, plan, adapter, training or run configuration."""


class NonMergeableError(ZeroCostError):
    """An adapter contains a nonlinearity and cannot be folded into a projection."""


class TrainingDivergedError(ZeroCostError, RuntimeError):
    """Loss became NaN or infinite during training."""


class CheckpointError(ZeroCostError):
    """Malformed, incomplete or inconsistent checkpoint / weight store."""


class BadMagic(CheckpointError):
    pass


class TruncatedPayload(CheckpointError):
    pass


class OverlappingRanges(CheckpointError):
    pass


class UnknownDtype(CheckpointError):
    pass
