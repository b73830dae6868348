"""Exception types raised by the integrators and harness."""


class HolosdeError(Exception):
    """Base class for all library errors."""


class SingularGram(HolosdeError):
    """A constraint Gram-type matrix is numerically singular.

    Usually means the position left the neighbourhood of the constraint
    manifold where ``Dg`` has full rank.
    """


class NewtonDivergence(HolosdeError):
    """Neither Newton nor homotopy continuation found the position multiplier."""


class KappaBoundViolation(HolosdeError):
    """The converged position multiplier lies outside the admissible ball."""


class InvalidResolution(HolosdeError):
    pass


class GridMismatch(HolosdeError):
    pass


class MissingGrowthMeta(HolosdeError):
    pass


class NonFiniteState(HolosdeError):
    pass


class StudyAborted(HolosdeError):
    """Too many Monte Carlo samples failed for the results to be meaningful."""


class StepError(HolosdeError):
    """Wraps a solver error with the index of the failing time step."""

    def __init__(self, step_index, cause):
        self.step_index = step_index
        self.cause = cause
        super().__init__(f"step {step_index}: {type(cause).__name__}: {cause}")
