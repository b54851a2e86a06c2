"""Exception types raised across the package."""


class DomainError(ValueError):
    """Degenerate grid or ill-posed discretization parameters."""


class GeometryError(ValueError):
    """A region hypothesis (omega/O disjoint, omega meets O_d) is violated."""


class GridMismatchError(ValueError):
    """Fields or masks living on different grids were combined."""


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance.

    The partial result, when one exists, is attached as ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class SpecError(ValueError):
    """Invalid problem specification; ``violations`` lists every problem found."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))
