"""Exception hierarchy shared across the package."""


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ValidationError(ValueError):
    pass
