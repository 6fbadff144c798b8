"""Exception hierarchy shared by all solver modules."""


class MVQuantError(Exception):
    """Base class for every error raised by this package."""


class LevelOutOfRange(MVQuantError, ValueError):
    pass


class DegenerateDensity(MVQuantError, ValueError):
    """The CDF is flat at the requested level, so the quantile is not unique."""


class GridMismatch(MVQuantError, ValueError):
    pass


class OrderOutOfRange(MVQuantError, ValueError):
    pass


class InvalidDensity(MVQuantError, ValueError):
    pass


class CertificateViolated(MVQuantError):
    pass


class CertificateUnobtainable(MVQuantError):
    pass


class NonPositiveTime(MVQuantError, ValueError):
    pass


class NonPositiveSigma(MVQuantError, ValueError):
    pass


class IndexOutOfRange(MVQuantError, ValueError):
    pass


class NoEnvelopeFound(MVQuantError):
    pass


class StabilityViolation(MVQuantError):
    pass


class NonFiniteValue(MVQuantError, FloatingPointError):
    pass


class MassDriftExceeded(MVQuantError):
    pass


class BoundaryTooClose(MVQuantError, ValueError):
    pass


class BoundaryMassExceeded(MVQuantError):
    pass


class ModeMismatch(MVQuantError, ValueError):
    pass


class CurveEscapedBox(MVQuantError):
    pass


class NoConvergence(MVQuantError):
    pass


class NonFinitePosition(MVQuantError, FloatingPointError):
    def __init__(self, step: int, index: int):
        super().__init__(f"non-finite particle position at step {step}, particle {index}")
        self.step = step
        self.index = index


class HorizonMismatch(MVQuantError, ValueError):
    pass


class ConfigInvalid(MVQuantError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
