"""Exception hierarchy shared by every module."""


class CmsrError(Exception):
    """Base class for all errors raised by the package."""


class InvalidShapeError(CmsrError, ValueError):
    pass


class ConfigError(CmsrError, ValueError):
    pass


class NumericError(CmsrError, ArithmeticError):
    """A computation produced NaN or infinity."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ContractError(CmsrError, RuntimeError):
    """An operation was called outside its precondition."""


class InsufficientDataError(CmsrError, ValueError):
    pass


class CheckpointError(CmsrError, ValueError):
    """Corrupt, truncated or mismatched checkpoint container."""
