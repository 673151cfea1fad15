"""Attention-based patch masking and the cosine consistency losses.

Patches that contain scribble pixels get a higher weight, so masking
concentrates on annotated context.  A fixed fraction of patches is masked
by sequential weighted sampling without replacement and zeroed out (zero is
the post-normalization dataset mean).  The enhanced prediction multiplies a
probability map by a binary mask derived from the global-category pseudo
label; cosine losses tie the masked-branch and enhanced predictions
together.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cpl import ContinuousPseudoLabel
from .errors import ConfigError, DataError
from .grids import ClassConfig

COS_EPS = 1e-8
_NORM_TINY = 1e-30


@dataclass(frozen=True)
class MCMConfig:
    scribble_weight: float = 2.0
    other_weight: float = 1.0
    mask_ratio: float = 0.5
    patch_size: int = 16
    include_gc: bool = False

    def __post_init__(self):
        if not self.scribble_weight > self.other_weight > 0:
            raise ConfigError(
                f"need scribble_weight > other_weight > 0, got "
                f"{self.scribble_weight} and {self.other_weight}"
            )
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask_ratio must be in [0, 1], got {self.mask_ratio}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")


@dataclass(frozen=True)
class PatchGrid:
    patch_size: int
    rows: int
    cols: int
    weights: np.ndarray
    probs: np.ndarray


@dataclass(frozen=True)
class PatchMask:
    patch_size: int
    masked: np.ndarray
    mask_ratio: float

    @property
    def masked_count(self) -> int:
        return int(self.masked.sum())


def _pad_to_multiple(grid: np.ndarray, patch: int, fill) -> np.ndarray:
    h, w = grid.shape
    ph = (-h) % patch
    pw = (-w) % patch
    if ph == 0 and pw == 0:
        return grid
    return np.pad(grid, ((0, ph), (0, pw)), constant_values=fill)


def patch_weights(scr: np.ndarray, cfg: MCMConfig,
                  classes: ClassConfig | None = None) -> PatchGrid:
    """Per-patch masking weights from scribble occupancy.

    A patch counts as annotated when it holds at least one foreground
    scribble pixel (GC pixels too when `include_gc`; background never).
    """
    if classes is None:
        classes = ClassConfig()
    scr = np.asarray(scr)
    if scr.ndim != 2:
        raise DataError(f"expected a 2D annotation, got shape {scr.shape}")
    counted = (scr >= 1) & (scr <= classes.num_foreground)
    if cfg.include_gc:
        counted |= scr == classes.gc_code
    counted = _pad_to_multiple(counted, cfg.patch_size, False)
    rows = counted.shape[0] // cfg.patch_size
    cols = counted.shape[1] // cfg.patch_size
    hit = counted.reshape(rows, cfg.patch_size, cols, cfg.patch_size).any(axis=(1, 3))
    weights = np.where(hit, cfg.scribble_weight, cfg.other_weight)
    return PatchGrid(cfg.patch_size, rows, cols, weights, weights / weights.sum())


def sample_mask(pg: PatchGrid, mask_ratio: float, rng) -> PatchMask:
    """Mask exactly round(ratio * patches) patches.

    Patches are drawn one at a time with probability proportional to the
    remaining weights (weighted sampling without replacement), so the first
    draw hits each patch exactly at its normalized weight.
    """
    if not 0.0 <= mask_ratio <= 1.0:
        raise ConfigError(f"mask_ratio must be in [0, 1], got {mask_ratio}")
    total = pg.rows * pg.cols
    want = round(mask_ratio * total)
    w = pg.weights.astype(np.float64).reshape(-1).copy()
    chosen = np.zeros(total, dtype=bool)
    for _ in range(want):
        cum = np.cumsum(w)
        r = rng.random() * cum[-1]
        idx = int(np.searchsorted(cum, r, side="right"))
        idx = min(idx, total - 1)
        while w[idx] == 0.0:
            idx = (idx + 1) % total
        chosen[idx] = True
        w[idx] = 0.0
    return PatchMask(pg.patch_size, chosen.reshape(pg.rows, pg.cols), mask_ratio)


def apply_mask(img: np.ndarray, pm: PatchMask) -> np.ndarray:
    """Zero out masked patches; unmasked pixels stay bit-identical."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"expected a 2D image, got shape {img.shape}")
    h, w = img.shape
    padded = _pad_to_multiple(img, pm.patch_size, 0.0).copy()
    keep = ~np.repeat(np.repeat(pm.masked, pm.patch_size, 0), pm.patch_size, 1)
    if keep.shape != padded.shape:
        raise DataError(
            f"patch mask {pm.masked.shape} does not tile image {img.shape} "
            f"at patch size {pm.patch_size}"
        )
    padded *= keep
    return padded[:h, :w]


def gc_binary_mask(cpl_gc: ContinuousPseudoLabel) -> np.ndarray:
    """Threshold the GC pseudo label at 0.5; the result marks the band near
    the GC contour."""
    if not isinstance(cpl_gc, ContinuousPseudoLabel) or not cpl_gc.is_gc:
        raise DataError("gc_binary_mask needs the GC pseudo-label channel")
    return (cpl_gc.values >= 0.5).astype(np.float64)


def enhance(y: Tensor, gc_mask: np.ndarray) -> Tensor:
    """Multiply every channel by the binary mask.

    The result is a raw map, not a probability map: channel sums outside the
    mask are zero.
    """
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=np.float64))
    return y * Tensor(np.asarray(gc_mask, dtype=np.float64))


def _cosine_loss(a: Tensor, b: Tensor, name: str) -> Tensor:
    if a.shape != b.shape:
        raise DataError(f"{name} operands differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = ad.reshape(a, (1,) + a.shape)
        b = ad.reshape(b, (1,) + b.shape)
    batch = a.shape[0]
    if not b.data.reshape(batch, -1).any(axis=1).all():
        warnings.warn(f"{name}: zero operand, degenerate term contributes 1")
    axes = (1, 2, 3)
    dot = ad.tsum(a * b, axis=axes)
    # The tiny inside sqrt keeps the gradient finite at an all-zero operand.
    na = ad.sqrt(ad.tsum(a * a, axis=axes) + _NORM_TINY)
    nb = ad.sqrt(ad.tsum(b * b, axis=axes) + _NORM_TINY)
    cos = dot / (na * nb + COS_EPS)
    return ad.tsum(1.0 - cos) * (1.0 / batch)


def loss_cc(y_m: Tensor, y_e: Tensor) -> Tensor:
    """1 - cosine similarity between masked-branch prediction and enhanced
    prediction, averaged over the batch; gradients reach both operands."""
    return _cosine_loss(y_m, y_e, "loss_cc")


def loss_en(y: Tensor, y_e: Tensor) -> Tensor:
    """Same cosine form with the original-branch prediction."""
    return _cosine_loss(y, y_e, "loss_en")
