"""
OsC toolkit - error types
Every failure the library raises, split by the CLI exit code it maps to
"""

from typing import Optional, Tuple


class OscError(Exception):
    """Base class for all toolkit errors"""

    exit_code = 1


class InputError(OscError):
    """Bad input: malformed files, invalid configs, shape contracts"""

    exit_code = 1


class NumericalError(OscError):
    """Non-finite values or diverging optimisation"""

    exit_code = 2


class ShapeMismatch(InputError):
    def __init__(self, expected: Tuple[int, ...], actual: Tuple[int, ...], what: str = "field"):
        self.expected = tuple(expected)
        self.actual = tuple(actual)
        super().__init__(f"{what} shape {self.actual} does not match {self.expected}")


class InvalidMask(InputError):
    pass


class NotNormalized(InputError):
    def __init__(self, max_deviation: float):
        self.max_deviation = max_deviation
        super().__init__(f"class probabilities do not sum to 1 (max deviation {max_deviation:.3g})")


class EmptyMask(InputError):
    pass


class DegenerateMask(InputError):
    def __init__(self, message: str, class_index: Optional[int] = None):
        self.class_index = class_index
        super().__init__(message)


class InvalidEpsilon(InputError):
    def __init__(self, eps: float):
        self.eps = eps
        super().__init__(f"Heaviside smoothing must be positive, got {eps}")


class InvalidBandWidth(InputError):
    def __init__(self, half_width: float):
        self.half_width = half_width
        super().__init__(f"band half width must be positive, got {half_width}")


class DegenerateCurve(InputError):
    pass


class InvalidConfig(InputError):
    pass


class UndefinedMetric(InputError):
    pass


class UnsupportedFormat(InputError):
    pass


class CorruptFile(InputError):
    def __init__(self, path: str, offset: int, reason: str):
        self.path = path
        self.offset = offset
        super().__init__(f"{path}: corrupt at byte {offset}: {reason}")


class IoFailure(InputError):
    pass


class InfeasibleSpec(InputError):
    pass


class NonFiniteValue(NumericalError):
    def __init__(self, coordinate: Tuple[int, ...], value: float):
        self.coordinate = tuple(int(c) for c in coordinate)
        self.value = value
        super().__init__(f"non-finite value {value} at {self.coordinate}")


class DivergenceDetected(NumericalError):
    def __init__(self, step: int, value: float):
        self.step = step
        self.value = value
        super().__init__(f"loss became non-finite ({value}) at step {step}")
