"""Exception hierarchy shared by all modules."""


class HomsgdError(Exception):
    """Base class for toolkit errors."""


class InputError(HomsgdError, ValueError):
    """Invalid user input: shapes, non-finite entries, bad parameters."""


class NumericError(HomsgdError, ArithmeticError):
    """A numerical routine failed (e.g. SVD did not converge)."""


class PoleError(NumericError):
    """A resolvent was evaluated too close to an eigenvalue."""


class MatrixFormatError(InputError):
    """A matrix file could not be parsed."""


class ConfigError(InputError):
    """Invalid experiment configuration.

    Parameters
    ----------
    path : str
        Dotted path of the offending field, e.g. ``"schedule.gamma"``.
    message : str
        Human readable explanation.
    """

    def __init__(self, path, message):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")
