"""Exception hierarchy shared across the package."""


class TBPError(Exception):
    """Base class for all package errors."""


class SingularityError(TBPError, ArithmeticError):
    """Two bodies are closer than the configured distance floor."""


class DomainError(TBPError, ValueError):
    """An elementary operation received an argument outside its domain."""


class DimensionError(TBPError, ValueError):
    """Array or vector lengths do not match the expected layout."""


class FormatError(TBPError):
    """A dataset or checkpoint file is malformed."""


class ConfigMismatchError(TBPError):
    """A checkpoint does not agree with the requested configuration."""


class DivergenceError(TBPError):
    """Training or rollout produced non-finite values."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


class EmptySplitError(TBPError, ValueError):
    """A train/validation split would leave one side empty."""
