"""Exception and warning types shared across the package."""


class ConfigurationError(ValueError):
    """An inconsistent or unsupported solver configuration."""


class PreconditionerWarning(UserWarning):
    """A nested solve inside a preconditioner did not converge.

    The inner :class:`~pctelescope.solvers.SolveReport` is available as
    ``report``.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
