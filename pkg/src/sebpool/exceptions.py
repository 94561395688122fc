
class SebPoolException(Exception):
    pass


class DimensionError(SebPoolException):
    """ Raised when the shapes of the operands do not match or a square
    matrix was expected"""


class ValidationError(SebPoolException):
    """ Raised when a parameter or an input is outside of what an operation accepts"""


class DomainError(SebPoolException):
    """ Raised when a spectral function is evaluated outside of its domain"""


class UndefinedCorrelationError(DomainError):
    """ Raised when one of the inputs of the correlation coefficient is constant"""


class UndefinedFractionError(DomainError):
    """ Raised when the energy fraction of an all-zero spectrum is requested"""


class NumericError(SebPoolException):
    """ Raised when a numerical procedure cannot produce a meaningful result"""

    def __init__(self, msg: str, sweeps: int | None = None):
        super().__init__(msg)
        self.sweeps = sweeps


class DivergenceError(NumericError):
    """ Raised when a loss stops being finite. Depending on where it happens,
    'step' or 'epoch' and 'sample_index' tell where"""

    def __init__(
        self,
        msg: str,
        step: int | None = None,
        epoch: int | None = None,
        sample_index: int | None = None,
        spectrum=None
    ):
        super().__init__(msg)
        self.step = step
        self.epoch = epoch
        self.sample_index = sample_index
        self.spectrum = spectrum
