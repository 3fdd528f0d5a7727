"""Exception hierarchy.

Input problems raise :class:`ValidationError` (a ``ValueError``); numerical
breakdowns raise :class:`NumericalError`. The CLI maps the first to exit
code 2 and the second to exit code 3.
"""


class SparseIVError(Exception):
    """Base class for all package errors."""


class ValidationError(SparseIVError, ValueError):
    """Malformed or inconsistent inputs."""


class NumericalError(SparseIVError, ArithmeticError):
    """A computation could not be carried out to the required accuracy."""


class ConvergenceError(NumericalError):
    """Iterative solver stopped before meeting its tolerance.

    Attributes
    ----------
    beta : numpy.ndarray
        Best iterate reached.
    kkt_gap : float
        Largest subgradient violation at ``beta``.
    """

    def __init__(self, message, beta=None, kkt_gap=float("nan")):
        super().__init__(message)
        self.beta = beta
        self.kkt_gap = kkt_gap
