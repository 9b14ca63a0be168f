"""Exception hierarchy shared by the package."""


class PodOcpError(Exception):
    """Base class for all errors raised by podocp."""


class InvalidArgumentError(PodOcpError, ValueError):
    """An argument is malformed or outside its admissible set."""


class MeshResolutionError(PodOcpError, ValueError):
    """Requested mesh size cannot resolve a geometric feature."""


class SolverFailure(PodOcpError, RuntimeError):
    """A linear or nonlinear solve failed.

    ``diagnostics`` carries whatever the failing solver recorded (block
    names, residual histories, ...).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class NonConvergenceError(SolverFailure):
    """Newton iteration hit its iteration cap."""


class LineSearchStagnation(SolverFailure):
    """Backtracking reached the minimum step without sufficient decrease."""


class OutOfRangeWarning(UserWarning):
    """A parameter lies outside its nominal box; evaluation continues."""
