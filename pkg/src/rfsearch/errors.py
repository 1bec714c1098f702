"""Exception types raised across the package."""


class RfSearchError(Exception):
    """Base class for all package errors."""


class ShapeError(RfSearchError, ValueError):
    pass


class PoseOutOfBounds(RfSearchError, ValueError):
    pass


class EmptyRegion(RfSearchError, ValueError):
    pass


class EmptyVicinity(RfSearchError, ValueError):
    pass


class TagNotFound(RfSearchError, KeyError):
    pass


class InsufficientTrack(RfSearchError, ValueError):
    pass


class NearSingularInnovation(RfSearchError, ArithmeticError):
    """Innovation matrix too ill-conditioned to invert safely."""


class RfOutOfWorkspace(RfSearchError, ValueError):
    pass


class InvalidAffordance(RfSearchError, ValueError):
    pass


class DivergedTraining(RfSearchError, ArithmeticError):
    def __init__(self, message, seed=None):
        super().__init__(message)
        self.seed = seed


class ScenarioInfeasible(RfSearchError, RuntimeError):
    pass


class OutputNotWritable(RfSearchError, OSError):
    exit_code = 2


class MalformedRow(RfSearchError, ValueError):
    exit_code = 3

    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
