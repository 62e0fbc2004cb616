"""Exception types raised across the package."""


class CurveSplatError(Exception):
    """Base class for all package errors."""


class DegenerateTangent(CurveSplatError):
    pass


class DegenerateCurve(CurveSplatError):
    pass


class InvalidSplitParameter(CurveSplatError, ValueError):
    pass


class InsufficientPoints(CurveSplatError, ValueError):
    pass


class SingularSystem(CurveSplatError):
    pass


class ShapeMismatch(CurveSplatError, ValueError):
    pass


class NonFiniteInput(CurveSplatError, ValueError):
    pass


class StaleState(CurveSplatError):
    pass


class DimensionMismatch(CurveSplatError, ValueError):
    pass


class DegenerateBounds(CurveSplatError, ValueError):
    pass


class EmptyDataset(CurveSplatError, ValueError):
    pass


class EmptyCloud(CurveSplatError, ValueError):
    pass


class DatasetError(CurveSplatError):
    """Raised when a dataset directory does not follow the expected layout."""


class ConfigError(CurveSplatError, ValueError):
    """Raised for an invalid config value; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
