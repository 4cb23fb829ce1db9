"""Exception hierarchy shared by all modules."""


class RatecollError(Exception):
    """Base class for every error raised by this package."""


# ocp model
class SpecError(RatecollError):
    pass


class DimensionMismatch(SpecError):
    pass


class InvertedBounds(SpecError):
    pass


class MissingObjective(SpecError):
    pass


class NoInputRateBounds(SpecError):
    pass


class NoStateRateBounds(SpecError):
    pass


class NotAddStateForm(SpecError):
    pass


# collocation / rate rows
class NonpositiveStep(RatecollError):
    pass


class OrderTooSmall(RatecollError):
    pass


class EmptyTargets(RatecollError):
    pass


class FreeTimeBlock(RatecollError):
    pass


# transcription
class IncompatibleMode(RatecollError):
    pass


class EmptyMesh(RatecollError):
    pass


class CallbackFailure(RatecollError):
    pass


class NonFiniteValue(RatecollError):
    pass


# solver
class SolverError(RatecollError):
    """Raised when the interior-point iteration stops without converging.

    The last iterate is kept on ``solution`` so callers can inspect it.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class MaxIterations(SolverError):
    pass


class LineSearchFailure(SolverError):
    pass


class SingularKKT(SolverError):
    pass


# refinement / analysis
class UnconvergedSolution(RatecollError):
    pass


class IntegrationFailure(RatecollError):
    pass


class MeshBudgetExceeded(RatecollError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class MissingMultipliers(RatecollError):
    pass


class NotAddStateMode(RatecollError):
    pass


class EmptyWindow(RatecollError):
    pass
