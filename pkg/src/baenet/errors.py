"""Exception taxonomy shared by all baenet modules.

The CLI maps these onto exit codes: ParameterError -> 1, FormatError -> 2,
DivergenceError -> 3. Everything else is a bug.
"""


class BaeNetError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(BaeNetError, ValueError):
    """Tensor or grid shapes do not conform."""


class ParameterError(BaeNetError, ValueError):
    """A configuration value or argument is out of its documented range."""


class ContractError(BaeNetError, RuntimeError):
    """An API precondition was violated (missing labels, spent tape, ...)."""


class FormatError(BaeNetError, ValueError):
    """A serialized file is malformed. Carries a byte offset when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(BaeNetError, ArithmeticError):
    """Training produced a non-finite loss; a diagnostic checkpoint was written."""
