"""Exception types raised across the package."""


class LidarFuseError(Exception):
    """Base class for all package errors."""


class NonUnitError(LidarFuseError, ValueError):
    pass


class NearSingularError(LidarFuseError, ValueError):
    pass


class MalformedFileError(LidarFuseError, ValueError):
    pass


class ParseError(LidarFuseError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TooFewPointsError(LidarFuseError, ValueError):
    pass


class EmptyTargetError(LidarFuseError, ValueError):
    pass


class DegenerateGeometryError(LidarFuseError, ValueError):
    pass


class NoCorrespondencesError(LidarFuseError, ValueError):
    pass


class MissingNormalsError(LidarFuseError, ValueError):
    pass


class ShapeMismatchError(LidarFuseError, ValueError):
    pass


class DimMismatchError(ShapeMismatchError):
    pass


class NonFiniteError(LidarFuseError, FloatingPointError):
    pass


class EmptyDatasetError(LidarFuseError, ValueError):
    pass


class NotConnectedError(LidarFuseError, ValueError):
    pass


class SingularSystemError(LidarFuseError, ArithmeticError):
    pass


class LengthMismatchError(LidarFuseError, ValueError):
    pass


class BadDeltaError(LidarFuseError, ValueError):
    pass


class EmptyError(LidarFuseError, ValueError):
    pass


class TooShortError(LidarFuseError, ValueError):
    pass


class ConfigError(LidarFuseError, ValueError):
    pass


class CheckpointMissingError(LidarFuseError, FileNotFoundError):
    pass
