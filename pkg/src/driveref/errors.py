"""Exception types shared across the package."""


class DrivRefError(Exception):
    """Base class for all package errors."""


class DegenerateVector(DrivRefError, ValueError):
    pass


class InvalidTransform(DrivRefError, ValueError):
    pass


class InvalidTarget(DrivRefError, ValueError):
    pass


class InvalidScene(DrivRefError, ValueError):
    pass


class ParseError(DrivRefError, ValueError):
    """Malformed scene, dataset or config file.

    The message always names the offending location (line, event or field).
    """


class InsufficientFrames(DrivRefError, ValueError):
    pass


class InvalidSubject(DrivRefError, ValueError):
    pass


class ShapeError(DrivRefError, ValueError):
    pass


class UsageError(DrivRefError, RuntimeError):
    pass


class InvalidConfig(DrivRefError, ValueError):
    pass


class InvalidInput(DrivRefError, ValueError):
    pass


class StoreError(DrivRefError, RuntimeError):
    pass
