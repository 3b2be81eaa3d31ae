"""Exception hierarchy shared by the library modules and the command line."""


class IceClassifierError(Exception):
    """Root of every error raised on purpose by this package."""

    exit_code = 2


class ShapeError(IceClassifierError, ValueError):
    """Tensor or raster dimensions do not line up."""


class ParameterError(IceClassifierError, ValueError):
    """A hyperparameter is outside its valid range."""


class ContractError(IceClassifierError, RuntimeError):
    """An API was called in a way its contract forbids."""


class InputError(IceClassifierError, ValueError):
    """User-supplied data cannot be processed."""


class TargetIndexError(InputError, IndexError):
    """A class target lies outside [0, K)."""


class FormatError(InputError):
    """A file does not follow its binary or text layout."""


class SpecError(InputError):
    """A synthetic scene specification is inconsistent."""


class StratificationError(IceClassifierError):
    """The splitter could not reach the requested class-distribution tolerance."""

    exit_code = 3

    def __init__(self, message: str, divergence: float):
        super().__init__(message)
        self.divergence = divergence


class NumericalError(IceClassifierError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""

    exit_code = 4

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
