"""Exception hierarchy.

``ConfigError`` maps to CLI exit code 2, everything under ``DataError`` to 3.
"""


class PlatevolError(Exception):
    pass


class ConfigError(PlatevolError, ValueError):
    pass


class DataError(PlatevolError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class MissingManifest(DataError):
    pass


class MissingCalibration(DataError):
    pass


class MissingMask(DataError):
    pass


class NoCircleFound(DataError):
    pass


class MaskProviderFailure(DataError):
    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class MissingReference(DataError):
    pass
