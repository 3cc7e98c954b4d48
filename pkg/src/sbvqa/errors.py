"""Exception and warning types shared across the package."""


class SBVQAError(Exception):
    """Base class for all package errors."""


class BadConfig(SBVQAError, ValueError):
    pass


class FrameTooSmall(SBVQAError, ValueError):
    pass


class PlanMismatch(SBVQAError, ValueError):
    pass


class ShapeMismatch(SBVQAError, ValueError):
    pass


class DecodeError(SBVQAError, IOError):
    pass


class EmptyVideo(SBVQAError, ValueError):
    pass


class ManifestError(SBVQAError, ValueError):
    pass


class TooFewSamples(SBVQAError, ValueError):
    pass


class DivergedTraining(SBVQAError, RuntimeError):
    pass


class IncompleteGrid(SBVQAError, RuntimeError):
    pass


class DegenerateInput(SBVQAError, ValueError):
    pass


class NoOverlap(SBVQAError, ValueError):
    pass


class DegenerateTableWarning(UserWarning):
    pass


class ConstantSeriesWarning(UserWarning):
    pass
