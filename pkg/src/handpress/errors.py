"""Exception hierarchy shared by all handpress modules."""


class HandPressError(Exception):
    """Base class for every error raised by handpress."""


class DegenerateInput(HandPressError, ValueError):
    pass


class InvalidRotation(HandPressError, ValueError):
    pass


class DegenerateConfiguration(HandPressError, ValueError):
    pass


class DegenerateLandmarks(DegenerateConfiguration):
    pass


class OutOfFieldOfView(HandPressError, ValueError):
    pass


class RadiusOutOfRange(HandPressError, ValueError):
    pass


class BehindCamera(HandPressError, ValueError):
    pass


class SizeMismatch(HandPressError, ValueError):
    pass


class ShapeMismatch(HandPressError, ValueError):
    pass


class NonFiniteLoss(HandPressError, FloatingPointError):
    """Raised when an objective evaluates to NaN/inf; ``report`` holds diagnostics."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class InsufficientFrames(HandPressError, ValueError):
    pass


class DivergedSolve(HandPressError, RuntimeError):
    pass


class TooFewSamples(HandPressError, ValueError):
    pass


class IndexOutOfRange(HandPressError, IndexError):
    pass


class InvalidDistribution(HandPressError, ValueError):
    pass


class EmptyInput(HandPressError, ValueError):
    pass


class EmptyFingerSet(HandPressError, ValueError):
    pass


class MissingPlane(HandPressError, ValueError):
    pass


class NonMonotoneTime(HandPressError, ValueError):
    pass


class DegenerateRegression(HandPressError, ValueError):
    pass
