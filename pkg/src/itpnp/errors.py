"""Exception types raised across the package."""


class RegistrationError(Exception):
    """Base class for all package errors."""


class AngleAtPi(RegistrationError, ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class DepthBelowMin(RegistrationError, ValueError):
    """A transformed point lies at or behind the minimum depth."""


class ParseError(RegistrationError, ValueError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.field = field


class EmptyCenterline(RegistrationError, ValueError):
    pass


class EmptyResiduals(RegistrationError, ValueError):
    pass


class NoCorrespondences(RegistrationError):
    pass


class DegenerateNormalEquations(RegistrationError):
    pass


class ModeUnavailable(RegistrationError, ValueError):
    pass


class EmptyAfterCrop(RegistrationError, ValueError):
    pass


class GridTooLarge(RegistrationError, ValueError):
    pass
