class HpiError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(HpiError, ValueError):
    pass


class GeometryError(HpiError, ValueError):
    pass


class UsageError(HpiError, ValueError):
    pass


class ConfigError(HpiError, ValueError):
    pass


class FormatError(HpiError, ValueError):
    pass


class IntegrityError(HpiError, ValueError):
    pass


class NumericError(HpiError, ArithmeticError):
    pass
