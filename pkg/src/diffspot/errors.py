"""Exception hierarchy.

Every error raised on purpose by this package derives from ``DiffSpotError``
so callers (and the CLI) can separate expected failures from bugs.
"""
from sklearn.exceptions import NotFittedError


class DiffSpotError(Exception):
    pass


class DimensionMismatch(DiffSpotError, ValueError):
    pass


class NoCoverFound(DiffSpotError):
    pass


class AlignmentFailed(DiffSpotError):
    pass


class GenerationExhausted(DiffSpotError):
    pass


class IdentityCollision(DiffSpotError, ValueError):
    pass


class EmptyRegion(DiffSpotError, ValueError):
    pass


class InvalidConfig(DiffSpotError, ValueError):
    pass


class InputTooSmall(DiffSpotError, ValueError):
    pass


class NoValidSamples(DiffSpotError):
    pass


class ModelNotTrained(DiffSpotError, NotFittedError):
    pass


class ShapeMismatch(DiffSpotError, ValueError):
    pass


class DivergenceDetected(DiffSpotError):
    """Raised when the training loss stops being finite.

    ``last_good_state`` holds the weights from the last completed epoch (or
    the initial weights) so the caller can resume from them.
    """

    def __init__(self, message, last_good_state=None, history=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.history = history


class DegenerateLabels(DiffSpotError, ValueError):
    pass


class SquareTooLarge(DiffSpotError, ValueError):
    pass
