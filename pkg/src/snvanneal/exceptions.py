"""Exception hierarchy shared by all analysis and simulation modules."""


class SnvAnnealError(Exception):
    """Base class for every error raised by the package."""


class InvalidInputError(SnvAnnealError, ValueError):
    """Input data violates a documented precondition."""


class EmptyWindowError(InvalidInputError):
    """A spectral window does not overlap the spectrum grid."""


class FitFailure(SnvAnnealError, RuntimeError):
    """A least-squares fit did not produce a usable result.

    Parameters
    ----------
    message : str
        Human readable reason.
    last_iterate : array-like, optional
        Parameter vector at the point the fit gave up, if any.
    """

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class RegistrationFailure(SnvAnnealError, RuntimeError):
    """Grid registration is undefined for the given centers."""


class ConfigurationError(SnvAnnealError, ValueError):
    """A campaign or rate configuration is invalid or numerically unusable."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class ReportIOError(SnvAnnealError, OSError):
    """Reading or writing a file failed; ``path`` names the file."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
