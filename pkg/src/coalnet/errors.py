"""Exception types shared across the pipeline.

File-system failures are left as the builtin ``OSError`` family
(``FileNotFoundError`` and friends); everything here signals bad data or
bad parameters.
"""


class CoalnetError(Exception):
    """Base class for all pipeline errors."""


class FormatError(CoalnetError, ValueError):
    """A file or record does not follow its declared format."""


class VersionError(FormatError):
    pass


class ParamError(CoalnetError, ValueError):
    """An operation parameter is out of its allowed range."""


class SizeError(ParamError):
    pass


class ShapeMismatch(CoalnetError, ValueError):
    pass


class DimMismatch(ShapeMismatch):
    pass


class LengthMismatch(CoalnetError, ValueError):
    pass


class LabelOutOfRange(CoalnetError, ValueError):
    pass


class DegenerateImage(CoalnetError, ValueError):
    """The image has a single gray level, so no threshold separates it."""


class DegenerateGeometry(CoalnetError, ValueError):
    pass


class DegenerateStats(CoalnetError, ValueError):
    pass


class DegenerateData(CoalnetError, ValueError):
    pass


class EmptyPairs(CoalnetError, ValueError):
    pass


class EmptyCrop(CoalnetError, ValueError):
    pass


class NoObjectFound(CoalnetError):
    pass


class SpecMismatch(CoalnetError, ValueError):
    pass


class NoSuchLayer(CoalnetError, KeyError):
    pass


class NotConv(CoalnetError, ValueError):
    pass
