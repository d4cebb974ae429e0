"""Exception hierarchy shared across the toolkit."""


class EnfError(Exception):
    """Base class for every error raised by enftamper."""


class MalformedWav(EnfError):
    pass


class UnsupportedFormat(EnfError):
    pass


class IoFailure(EnfError):
    pass


class InvalidRate(EnfError):
    pass


class InvalidBand(EnfError):
    pass


class TooShort(EnfError):
    pass


class NoPeak(EnfError):
    pass


class DegeneratePeak(EnfError):
    pass


class InterpolationFailure(EnfError):
    pass


class ShapeMismatch(EnfError, ValueError):
    pass


class ConfigError(EnfError, ValueError):
    pass


class DataError(EnfError, ValueError):
    pass


class VersionMismatch(EnfError):
    pass


class CorruptWeights(EnfError):
    pass


class InvalidParams(EnfError, ValueError):
    pass


class OutOfBounds(EnfError, ValueError):
    pass


class MissingDonor(EnfError, ValueError):
    pass
