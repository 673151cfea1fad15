"""Scribble-supervised segmentation with masked context modeling and
continuous pseudo labels, self-contained on numpy."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericalError
from .grids import (BG_CODE, GC_CODE, UNLABELED_CODE, ClassConfig,
                    argmax_classes, dice_score, one_hot)
from .mgrd import read_mgrd, write_mgrd

__all__ = [
    "__version__",
    "ConfigError", "DataError", "NumericalError",
    "BG_CODE", "GC_CODE", "UNLABELED_CODE", "ClassConfig",
    "argmax_classes", "dice_score", "one_hot",
    "read_mgrd", "write_mgrd",
]
