"""Coal and gangue recognition: detection, augmentation, a small CNN and a GLCM baseline."""

from .core import CLASS_NAMES, ClassLabel, DatasetManifest, GrayImage, Rng, read_pgm, write_pgm
from .errors import CoalnetError, FormatError

__version__ = "0.1.0"

__all__ = [
    "CLASS_NAMES",
    "ClassLabel",
    "CoalnetError",
    "DatasetManifest",
    "FormatError",
    "GrayImage",
    "Rng",
    "read_pgm",
    "write_pgm",
]
