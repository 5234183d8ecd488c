"""Exception types shared across the package."""


class SafeArsError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(SafeArsError, ValueError):
    """A caller violated a documented precondition."""


class NumericError(SafeArsError, ArithmeticError):
    """A computation produced or consumed a non-finite value."""


class ConfigError(SafeArsError):
    """Invalid experiment configuration."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(SafeArsError):
    """A checkpoint could not be loaded (truncated, corrupt, wrong version or arch)."""


class TrainingError(SafeArsError):
    """An ARS iteration could not be completed."""
