"""Distance-based continuous pseudo labels and the confidence-weighted loss.

A scribble annotation is split into per-class binary source grids.  For each
class the exact Euclidean distance transform is computed, then converted to
a confidence in [0, 1] by exponential decay exp(-k * D).  Non-global-class
maps are cut to zero once the confidence falls to the floor; the global
class (GC) map is clamped at the floor instead so it covers the whole grid.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError
from .grids import BG_CODE, ClassConfig

DEFAULT_DECAY = 0.1
DEFAULT_FLOOR = 0.05
LOG_EPS = 1e-8


def edt(sources: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance to the nearest true pixel of `sources`.

    Two-pass separable transform: per-column 1D sweeps give the vertical
    distance, then a lower-envelope pass over squared distances per row
    (Felzenszwalb-Huttenlocher).  All intermediate squared distances are
    small integers, so the result is exact.  Pixels with no source anywhere
    get +inf.
    """
    src = np.asarray(sources).astype(bool)
    if src.ndim != 2:
        raise DataError(f"expected a 2D source grid, got shape {src.shape}")
    h, w = src.shape
    if not src.any():
        return np.full((h, w), np.inf)

    # Pass 1: distance along columns only.
    d = np.where(src, 0.0, np.inf)
    for i in range(1, h):
        d[i] = np.minimum(d[i], d[i - 1] + 1.0)
    for i in range(h - 2, -1, -1):
        d[i] = np.minimum(d[i], d[i + 1] + 1.0)
    g = d * d

    # Pass 2: per row, lower envelope of parabolas x -> (x - j)^2 + g[j].
    out = np.empty((h, w))
    v = np.empty(w, dtype=np.int64)
    z = np.empty(w + 1)
    for r in range(h):
        grow = g[r]
        k = -1
        for q in range(w):
            gq = grow[q]
            if not np.isfinite(gq):
                continue
            while k >= 0:
                p = v[k]
                s = (gq + q * q - grow[p] - p * p) / (2.0 * (q - p))
                if s <= z[k]:
                    k -= 1
                else:
                    break
            k += 1
            v[k] = q
            z[k] = -np.inf if k == 0 else s
            z[k + 1] = np.inf
        if k < 0:
            out[r] = np.inf
            continue
        j = 0
        for x in range(w):
            while z[j + 1] < x:
                j += 1
            p = v[j]
            out[r, x] = (x - p) * (x - p) + grow[p]
    return np.sqrt(out)


@dataclass(frozen=True)
class ContinuousPseudoLabel:
    """Per-class confidence grid derived from scribble distance."""

    class_code: int
    values: np.ndarray
    decay: float
    floor: float
    is_gc: bool


@dataclass(frozen=True)
class CPLStack:
    """One pseudo label per foreground class plus the global-class map."""

    foreground: tuple[ContinuousPseudoLabel, ...]
    gc: ContinuousPseudoLabel

    @property
    def shape(self):
        return self.gc.values.shape

    def support_areas(self) -> list[int]:
        """Nonzero-pixel counts of the foreground maps (GC excluded: its
        floor keeps it nonzero everywhere)."""
        return [int(np.count_nonzero(c.values)) for c in self.foreground]


def decay_map(d: np.ndarray, decay: float = DEFAULT_DECAY,
              floor: float = DEFAULT_FLOOR, is_gc: bool = False,
              class_code: int = 0) -> ContinuousPseudoLabel:
    """Convert a distance grid to confidences exp(-decay * D).

    Non-GC maps keep a value only while it exceeds the floor and are 0
    beyond the cutoff distance -ln(floor)/decay; the GC map is clamped to
    the floor instead.  Infinite distance maps to 0 (non-GC) or the floor.
    """
    if decay <= 0:
        raise ConfigError(f"decay must be positive, got {decay}")
    if not 0 < floor < 1:
        raise ConfigError(f"floor must be in (0, 1), got {floor}")
    with np.errstate(under="ignore"):
        vals = np.exp(-decay * np.asarray(d, dtype=np.float64))
    if is_gc:
        vals = np.maximum(vals, floor)
    else:
        vals = np.where(vals > floor, vals, 0.0)
    return ContinuousPseudoLabel(class_code, vals, decay, floor, is_gc)


def build_cpl(scr: np.ndarray, decay: float = DEFAULT_DECAY,
              floor: float = DEFAULT_FLOOR,
              classes: ClassConfig | None = None) -> CPLStack:
    """Per-class pseudo labels for one scribble annotation.

    A class with no scribble pixels yields an all-zero map (non-GC) or an
    all-floor map (GC).
    """
    if classes is None:
        classes = ClassConfig()
    scr = np.asarray(scr)
    if scr.ndim != 2:
        raise DataError(f"expected a 2D annotation, got shape {scr.shape}")
    fg = []
    for c in range(1, classes.num_foreground + 1):
        fg.append(decay_map(edt(scr == c), decay, floor, False, c))
    gc = decay_map(edt(scr == classes.gc_code), decay, floor, True, classes.gc_code)
    return CPLStack(tuple(fg), gc)


def loss_con(stacks, y: Tensor, gc_in_con: bool = True,
             con_form: str = "entropy_weighted") -> Tensor:
    """Confidence-weighted entropy of the prediction.

    L = -(1 / (|C| |N|)) sum_c sum_p cpl[c, p] * y[c, p] * log(y[c, p] + eps)

    |C| counts the pseudo-label channels entering the sum and |N| the pixels
    where any of those channels is nonzero, per sample.  Foreground class c
    pairs with output channel c; the GC map pairs with the derived
    foreground probability 1 - y[background].  `con_form="cross_entropy"`
    switches the inner term to -cpl * log(y + eps).  Gradients reach `y`
    only; the pseudo labels are constants.
    """
    if con_form not in ("entropy_weighted", "cross_entropy"):
        raise ConfigError(f"unknown con_form {con_form!r}")
    if isinstance(stacks, CPLStack):
        stacks = [stacks]
    if not isinstance(y, Tensor):
        y = Tensor(np.asarray(y, dtype=np.float64))
    if y.ndim == 3:
        y = ad.reshape(y, (1,) + y.shape)
    b = y.shape[0]
    if len(stacks) != b:
        raise DataError(f"{len(stacks)} pseudo-label stacks for batch of {b}")
    k = len(stacks[0].foreground)
    if y.shape[1] != k + 1:
        raise DataError(
            f"prediction has {y.shape[1]} channels, expected {k + 1}"
        )
    wfg = np.stack([np.stack([c.values for c in s.foreground]) for s in stacks])
    n_channels = k + (1 if gc_in_con else 0)
    if gc_in_con:
        wgc = np.stack([s.gc.values for s in stacks])[:, None]
        support = (wfg > 0).any(axis=1) | (wgc[:, 0] > 0)
    else:
        support = (wfg > 0).any(axis=1)
    n_pix = support.sum(axis=(1, 2)).astype(np.float64)
    if (n_pix == 0).any():
        warnings.warn("sample with no pseudo-label support contributes 0 to the loss")
    scale = np.where(n_pix > 0, -1.0 / (n_channels * np.maximum(n_pix, 1.0)), 0.0)

    yfg = ad.channel_slice(y, 1, k + 1)
    if con_form == "entropy_weighted":
        term = Tensor(wfg) * yfg * ad.log(yfg + LOG_EPS)
    else:
        term = Tensor(wfg) * ad.log(yfg + LOG_EPS)
    per_sample = ad.tsum(term, axis=(1, 2, 3))
    if gc_in_con:
        fg_prob = 1.0 - ad.channel_slice(y, 0, 1)
        if con_form == "entropy_weighted":
            gterm = Tensor(wgc) * fg_prob * ad.log(fg_prob + LOG_EPS)
        else:
            gterm = Tensor(wgc) * ad.log(fg_prob + LOG_EPS)
        per_sample = per_sample + ad.tsum(gterm, axis=(1, 2, 3))
    return ad.tsum(per_sample * Tensor(scale)) * (1.0 / b)
