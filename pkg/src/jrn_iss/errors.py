"""Exception hierarchy shared by all subpackages."""


class InputError(ValueError):
    """Malformed or non-finite input to a numerical routine."""


class ConfigurationError(ValueError):
    """Inconsistent configuration (bad split sizes, model/dataset mismatch)."""


class UnknownModelError(KeyError):
    pass


class ModelFormatError(ValueError):
    """A persisted file has the wrong version, shape header or is corrupt."""


class NumericalError(ArithmeticError):
    """A numerical step failed (singular matrix, Cholesky failure, overflow)."""


class DivergenceError(NumericalError):
    pass


class InstabilityError(NumericalError):
    """Spectral radius >= 1 where a stable matrix is required."""


class TrainingError(NumericalError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
