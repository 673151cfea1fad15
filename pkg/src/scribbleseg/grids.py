"""Grid and label data types plus elementary label-space operations.

Conventions used everywhere in the package:

* ImageGrid      -- 2D float array (H, W), finite values.
* DenseMask      -- 2D uint8 array (H, W) of class ids {0..K} with 0 = background.
* ScribbleAnnotation -- 2D uint8 array (H, W) of sparse codes; most pixels
  carry UNLABELED.  Foreground scribbles use class ids 1..K, the background
  scribble uses BG_CODE, and the enclosing global-category contour uses
  GC_CODE.
* ProbMap        -- 3D float array (C, H, W); channel 0 is background and
  each pixel's channel vector sums to one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError

# Label codes are fixed so annotation files are stable single-byte grids.
BG_CODE = 0
GC_CODE = 254
UNLABELED_CODE = 255


@dataclass(frozen=True)
class ClassConfig:
    """Names and codes of the segmentation label space."""

    foreground_classes: tuple = ("rv", "myo", "lv")
    has_background_scribble: bool = True
    bg_code: int = BG_CODE
    gc_code: int = GC_CODE
    unlabeled_code: int = UNLABELED_CODE

    def __post_init__(self):
        if len(self.foreground_classes) < 1:
            raise ConfigError("need at least one foreground class")
        codes = {self.bg_code, self.gc_code, self.unlabeled_code}
        if len(codes) != 3:
            raise ConfigError("bg/gc/unlabeled codes must be distinct")
        k = len(self.foreground_classes)
        if any(c in codes for c in range(1, k + 1)):
            raise ConfigError("foreground ids 1..K collide with special codes")

    @property
    def num_foreground(self) -> int:
        return len(self.foreground_classes)

    @property
    def out_channels(self) -> int:
        """Network output channels: background plus foreground classes."""
        return 1 + self.num_foreground


def validate_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"image must be 2D, got shape {img.shape}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise DataError(f"image must be at least 8x8, got {img.shape}")
    if not np.isfinite(img).all():
        raise DataError("image contains non-finite values")
    return img


def validate_probmap(p: np.ndarray, tol: float = 1e-5) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3:
        raise DataError(f"probability map must be (C, H, W), got {p.shape}")
    if np.isnan(p).any():
        raise DataError("probability map contains NaN")
    if p.min() < -tol or p.max() > 1.0 + tol:
        raise DataError("probability map entries outside [0, 1]")
    sums = p.sum(axis=0)
    if np.abs(sums - 1.0).max() > tol:
        raise DataError("per-pixel channel sums deviate from 1")
    return p


def one_hot(mask: np.ndarray, c_out: int) -> np.ndarray:
    """Encode a dense mask as a (c_out, H, W) probability map of 0/1 planes."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2D, got shape {mask.shape}")
    labels = mask.astype(np.int64)
    bad = labels >= c_out
    if bad.any():
        offending = int(labels[bad].max())
        raise DataError(
            f"mask label {offending} out of range for {c_out} output channels"
        )
    out = np.zeros((c_out, mask.shape[0], mask.shape[1]), dtype=np.float64)
    rows, cols = np.indices(mask.shape)
    out[labels, rows, cols] = 1.0
    return out


def argmax_classes(p: np.ndarray) -> np.ndarray:
    """Hard prediction: per-pixel argmax channel; ties take the lowest index."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3:
        raise DataError(f"probability map must be (C, H, W), got {p.shape}")
    if np.isnan(p).any():
        raise DataError("probability map contains NaN")
    return p.argmax(axis=0).astype(np.uint8)


def dice_score(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    """Dice overlap 2|A&B| / (|A|+|B|) for one class; empty-vs-empty is 1."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = pred == class_id
    b = gt == class_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom
