"""Exception hierarchy shared by all modules."""


class AmvError(Exception):
    """Base class for every error raised by amvpred."""


class RegionError(AmvError):
    """A region selects no usable grid cells."""


class MaskError(AmvError):
    """A validity mask is empty or inconsistent."""


class FormatError(AmvError):
    """A file or in-memory structure violates its format."""


class IoError(AmvError):
    """A path could not be read or written."""


class DegenerateError(AmvError):
    """A statistic that must be positive came out zero."""


class DataError(AmvError):
    """Not enough (or the wrong kind of) data for the requested operation."""


class ShapeError(AmvError):
    """Array shapes are incompatible."""


class NumericError(AmvError):
    """A computation produced non-finite values."""


class ConfigError(AmvError):
    """A configuration violates its invariants."""
