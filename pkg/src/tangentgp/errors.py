"""Exception types shared across the package.

Every error raised deliberately by this package derives from
:class:`TangentGpError`, so callers can catch one type at the boundary.
The subclasses split along how a caller should react: fix the call site
(contract), change the numerical setup (breakdown, fit), shrink the
problem (resource), or fix the input file (config).
"""


class TangentGpError(Exception):
    """Base class for all errors raised by tangentgp."""


class ContractViolationError(TangentGpError):
    """An argument or call sequence violated a documented precondition."""


class NumericBreakdownError(TangentGpError):
    """An iterative routine hit non-finite values or a singular subproblem."""


class ResourceLimitError(TangentGpError):
    """A dense computation would exceed its size cap; use the matrix-free path."""


class FitError(TangentGpError):
    """Posterior fitting failed to converge.

    Carries the achieved relative residual so callers can decide whether
    to loosen the tolerance or raise the noise level.
    """

    def __init__(self, message, residual_norm=None):
        super().__init__(message)
        self.residual_norm = residual_norm


class TrainingDivergenceError(TangentGpError):
    """Training produced a non-finite loss or parameter. Records the epoch."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigError(TangentGpError):
    """An experiment configuration failed to parse or validate."""
