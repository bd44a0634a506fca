"""Exception types shared across the package."""


class GMixError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(GMixError, ValueError):
    """Operand shapes are incompatible."""


class ValidationError(GMixError, ValueError):
    """An input violates a documented precondition."""


class ConfigError(GMixError, ValueError):
    """A configuration value is out of range or inconsistent."""


class GraphConsumedError(GMixError, RuntimeError):
    """A computation graph was reused after its backward pass."""


class NumericError(GMixError, ArithmeticError):
    """NaN or Inf appeared where a finite value is required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int | None = None):
        self.epoch = epoch
        self.step = step
        where = f"epoch {epoch}" if step is None else f"epoch {epoch}, step {step}"
        super().__init__(f"non-finite loss at {where}")


class IdxFormatError(GMixError, ValueError):
    """Base class for malformed IDX files."""


class BadMagicError(IdxFormatError):
    def __init__(self, path, found: int, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(
            f"{path}: bad magic number 0x{found:08x} (expected 0x{expected:08x})"
        )


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class CheckpointError(GMixError, ValueError):
    """A checkpoint file is unreadable or has an unknown version."""
