"""Synthetic cardiac-like phantom data: images, dense masks, scribbles.

The layout mimics a short-axis cardiac slice: a bright disk (class 3,
LV-like) nested inside an annulus (class 2, MYO-like) with a crescent
(class 1, RV-like) hugging one side.  Per-sample geometry jitter, additive
Gaussian noise, and Gaussian smoothing are all drawn from one seeded stream
per (seed, index) pair, so every sample is reproducible in isolation.

Scribble synthesis emulates hand annotation: a self-avoiding random walk
inside each eroded class region, an enclosing ellipse contour for the
global category (GC), and an optional background stroke.
"""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .cpl import edt
from .errors import ConfigError, DataError
from .grids import ClassConfig, validate_image
from .mgrd import write_mgrd
from .rng import STREAM_PHANTOM, STREAM_SCRIBBLE, Xoshiro256StarStar, derive_seed

_NEIGHBORS8 = tuple(
    (dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)
)


@dataclass(frozen=True)
class PhantomParams:
    """Geometry and appearance of the synthetic phantom."""

    image_size: int = 64
    lv_radius: float = 5.0
    # Thick enough that the annulus survives erosion by the default
    # scribble margin of 2.
    myo_thickness: float = 5.5
    rv_radius: float = 4.0
    rv_offset: float = 12.5
    # Intensity means indexed by class id: bg, rv, myo, lv.
    intensity_means: tuple = (0.20, 0.75, 0.45, 0.95)
    noise_sigma: float = 0.08
    smoothing_sigma: float = 0.7
    center_jitter: float = 2.0
    radius_jitter: float = 0.10
    rotation_range: float = math.pi
    fit_margin: int = 2

    def __post_init__(self):
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.lv_radius < 2:
            raise ConfigError("lv_radius must be >= 2")
        if self.myo_thickness <= 0:
            raise ConfigError("myo_thickness must be positive")
        if self.rv_radius < 2:
            raise ConfigError("rv_radius must be >= 2")
        outer = self.lv_radius + self.myo_thickness
        if not outer - self.rv_radius < self.rv_offset < outer + self.rv_radius:
            raise ConfigError("rv_offset must place the crescent against the annulus")
        if len(self.intensity_means) != 4:
            raise ConfigError("intensity_means needs one value per class 0..3")
        if self.noise_sigma < 0 or self.smoothing_sigma < 0:
            raise ConfigError("sigmas must be non-negative")
        if self.center_jitter < 0 or self.radius_jitter < 0 or self.rotation_range < 0:
            raise ConfigError("jitter ranges must be non-negative")
        if self.radius_jitter >= 0.5:
            raise ConfigError("radius_jitter must stay below 0.5")
        if self.fit_margin < 2:
            raise ConfigError("fit_margin must be >= 2")


@dataclass(frozen=True)
class ScribbleSynthParams:
    """Controls for scribble synthesis; `seed` makes the result a pure
    function of (mask, params)."""

    walk_length_factor: float = 1.0
    erosion_margin: int = 2
    gc_margin: int = 4
    include_background: bool = True
    seed: int = 0
    max_restarts: int = 50

    def __post_init__(self):
        if self.walk_length_factor <= 0:
            raise ConfigError("walk_length_factor must be positive")
        if self.erosion_margin < 1:
            raise ConfigError("erosion_margin must be >= 1")
        if self.gc_margin < 1:
            raise ConfigError("gc_margin must be >= 1")
        if self.max_restarts < 0:
            raise ConfigError("max_restarts must be >= 0")


def _gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return img
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    out = img
    for axis in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == axis else (0, 0) for a in (0, 1)],
                        mode="reflect")
        out = np.apply_along_axis(
            lambda row: np.convolve(row, kernel, mode="valid"), axis, padded
        )
    return out


def generate_phantom(params: PhantomParams, seed: int, index: int):
    """One (image, dense mask) pair, fully determined by (seed, index)."""
    rng = Xoshiro256StarStar(derive_seed(seed, STREAM_PHANTOM, index))
    size = params.image_size
    margin = params.fit_margin
    half = (size - 1) / 2.0
    for _ in range(100):
        cr = half + rng.uniform(-params.center_jitter, params.center_jitter)
        cc = half + rng.uniform(-params.center_jitter, params.center_jitter)
        scale = 1.0 + rng.uniform(-params.radius_jitter, params.radius_jitter)
        r_lv = params.lv_radius * scale
        r_out = (params.lv_radius + params.myo_thickness) * scale
        r_rv = params.rv_radius * scale
        offset = params.rv_offset * scale
        theta = rng.uniform(-params.rotation_range, params.rotation_range)
        rv_r = cr + offset * math.sin(theta)
        rv_c = cc + offset * math.cos(theta)
        lo, hi = margin, size - 1 - margin
        if (lo <= cr - r_out and cr + r_out <= hi
                and lo <= cc - r_out and cc + r_out <= hi
                and lo <= rv_r - r_rv and rv_r + r_rv <= hi
                and lo <= rv_c - r_rv and rv_c + r_rv <= hi):
            break
    else:
        raise DataError(
            f"phantom geometry does not fit a {size}x{size} frame after 100 draws"
        )

    rows, cols = np.indices((size, size), dtype=np.float64)
    d_main = np.hypot(rows - cr, cols - cc)
    d_rv = np.hypot(rows - rv_r, cols - rv_c)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[(d_rv <= r_rv) & (d_main > r_out)] = 1
    mask[d_main <= r_out] = 2
    mask[d_main <= r_lv] = 3

    means = np.asarray(params.intensity_means, dtype=np.float64)
    img = means[mask]
    if params.noise_sigma > 0:
        img = img + params.noise_sigma * rng.normals((size, size))
    img = _gaussian_blur(img, params.smoothing_sigma)
    return validate_image(img), mask


def crop_pad(img: np.ndarray, target: int) -> np.ndarray:
    """Center-crop or zero-pad each axis to `target` pixels."""
    out = np.asarray(img, dtype=np.float64)
    for axis in (0, 1):
        n = out.shape[axis]
        if n > target:
            start = (n - target) // 2
            sl = [slice(None), slice(None)]
            sl[axis] = slice(start, start + target)
            out = out[tuple(sl)]
        elif n < target:
            before = (target - n) // 2
            pads = [(0, 0), (0, 0)]
            pads[axis] = (before, target - n - before)
            out = np.pad(out, pads)
    return out


def preprocess(img: np.ndarray, size: int | None = None) -> np.ndarray:
    """Crop/pad to `size` (when given) and scale to zero mean, unit variance.

    A constant input has no scale; it comes back as all zeros with a warning.
    """
    out = np.asarray(img, dtype=np.float64)
    if size is not None:
        out = crop_pad(out, size)
    std = out.std()
    if std == 0.0:
        warnings.warn("constant image normalized to all zeros")
        return np.zeros_like(out)
    return (out - out.mean()) / std


def _random_walk(region: np.ndarray, length: int, rng, max_restarts: int):
    """Self-avoiding 8-connected walk of up to `length` pixels inside
    `region`; on dead ends the walk restarts, keeping the longest attempt."""
    pix = list(zip(*(a.tolist() for a in np.nonzero(region))))
    if not pix:
        return []
    length = min(length, len(pix))
    best: list = []
    for _ in range(max_restarts + 1):
        path = [pix[rng.randbelow(len(pix))]]
        taken = {path[0]}
        while len(path) < length:
            r, c = path[-1]
            nbrs = [
                (r + dr, c + dc)
                for dr, dc in _NEIGHBORS8
                if 0 <= r + dr < region.shape[0]
                and 0 <= c + dc < region.shape[1]
                and region[r + dr, c + dc]
                and (r + dr, c + dc) not in taken
            ]
            if not nbrs:
                break
            step = nbrs[rng.randbelow(len(nbrs))]
            path.append(step)
            taken.add(step)
        if len(path) > len(best):
            best = path
        if len(best) == length:
            break
    return best


def _walk_region(class_region: np.ndarray, margin: int):
    """Interior of the region at Euclidean depth > margin; if that is empty,
    the single deepest pixel."""
    depth = edt(~class_region)
    interior = depth > margin
    if interior.any():
        return interior
    fallback = np.zeros_like(class_region)
    fallback[np.unravel_index(int(np.argmax(depth)), depth.shape)] = True
    return fallback


def gc_ellipse(fg: np.ndarray, margin: int):
    """Center and semi-axes of an ellipse containing the foreground dilated
    by `margin`.

    The bounding-box-plus-margin ellipse is scaled up by the smallest factor
    that pulls every dilated pixel inside, so enclosure is exact without the
    large worst-case growth a box-corner bound would force.
    """
    rows, cols = np.nonzero(fg)
    r0, r1 = rows.min(), rows.max()
    c0, c1 = cols.min(), cols.max()
    ctr_r = (r0 + r1) / 2.0
    ctr_c = (c0 + c1) / 2.0
    a_r = (r1 - r0) / 2.0 + margin
    a_c = (c1 - c0) / 2.0 + margin
    dil_r, dil_c = np.nonzero(edt(fg) <= margin)
    vals = ((dil_r - ctr_r) / a_r) ** 2 + ((dil_c - ctr_c) / a_c) ** 2
    scale = max(1.0, math.sqrt(float(vals.max())))
    return ctr_r, ctr_c, a_r * scale, a_c * scale


def _ellipse_contour(scr, fg: np.ndarray, margin: int, code: int):
    ctr_r, ctr_c, semi_r, semi_c = gc_ellipse(fg, margin)
    n = max(360, int(16 * (semi_r + semi_c)))
    t = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    rr = np.clip(np.rint(ctr_r + semi_r * np.sin(t)), 1, scr.shape[0] - 2).astype(int)
    cc = np.clip(np.rint(ctr_c + semi_c * np.cos(t)), 1, scr.shape[1] - 2).astype(int)
    scr[rr, cc] = code


def synthesize_scribbles(mask: np.ndarray, params: ScribbleSynthParams,
                         classes: ClassConfig | None = None) -> np.ndarray:
    """Sparse annotation for a dense mask.

    Foreground classes get a random walk inside the eroded class region, the
    GC class gets an enclosing ellipse contour, and the background (when
    enabled) gets a short walk well away from the foreground.  Classes
    absent from the mask are skipped.
    """
    if classes is None:
        classes = ClassConfig()
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"expected a 2D mask, got shape {mask.shape}")
    rng = Xoshiro256StarStar(derive_seed(params.seed, STREAM_SCRIBBLE))
    scr = np.full(mask.shape, classes.unlabeled_code, dtype=np.uint8)
    alpha = params.walk_length_factor

    fg_areas = []
    for code in range(1, classes.num_foreground + 1):
        region = mask == code
        area = int(region.sum())
        if area == 0:
            continue
        fg_areas.append(area)
        length = max(round(alpha * math.sqrt(area)), 8)
        walk = _random_walk(
            _walk_region(region, params.erosion_margin), length, rng,
            params.max_restarts,
        )
        for (r, c) in walk:
            scr[r, c] = code

    fg = (mask > 0) & (mask <= classes.num_foreground)
    if fg.any():
        _ellipse_contour(scr, fg, params.gc_margin, classes.gc_code)

    if params.include_background and classes.has_background_scribble:
        far = (mask == classes.bg_code) & (scr == classes.unlabeled_code)
        if fg.any():
            far &= edt(fg) > params.gc_margin
        # Background strokes are kept short (mean foreground area scale), a
        # full-area walk would blow the sparsity budget.
        ref_area = float(np.mean(fg_areas)) if fg_areas else 64.0
        length = max(round(alpha * math.sqrt(ref_area)), 8)
        walk = _random_walk(far, length, rng, params.max_restarts)
        for (r, c) in walk:
            scr[r, c] = classes.bg_code
    return scr


def _split_counts(count: int, split) -> tuple[int, int, int]:
    if len(split) != 3:
        raise ConfigError(f"split needs three ratios, got {split}")
    if any(s < 0 for s in split) or abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {split}")
    n_train = round(split[0] * count)
    n_val = round(split[1] * count)
    n_test = count - n_train - n_val
    if n_test < 0:
        raise ConfigError(f"split {split} over-allocates {count} samples")
    return n_train, n_val, n_test


def write_dataset(out_dir, count: int, phantom_params: PhantomParams,
                  scribble_params: ScribbleSynthParams,
                  split=(0.7, 0.15, 0.15), seed: int = 0,
                  classes: ClassConfig | None = None) -> dict:
    """Generate `count` samples, write MGRD files plus manifest.json.

    The manifest maps split name -> list of {image, scribble, mask} file
    names (relative to `out_dir`).  Same inputs produce byte-identical
    files.
    """
    if count < 10:
        raise ConfigError(f"count must be >= 10, got {count}")
    n_train, n_val, _ = _split_counts(count, split)
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset dir {out_dir}: {e}") from e
    manifest = {"train": [], "val": [], "test": []}
    for i in range(count):
        img, msk = generate_phantom(phantom_params, seed, i)
        img = preprocess(img, phantom_params.image_size)
        scr = synthesize_scribbles(
            msk, replace(scribble_params, seed=derive_seed(seed, STREAM_SCRIBBLE, i)),
            classes,
        )
        names = {
            "image": f"sample_{i:04d}_image.mgrd",
            "scribble": f"sample_{i:04d}_scribble.mgrd",
            "mask": f"sample_{i:04d}_mask.mgrd",
        }
        write_mgrd(os.path.join(out_dir, names["image"]), img.astype(np.float32))
        write_mgrd(os.path.join(out_dir, names["scribble"]), scr)
        write_mgrd(os.path.join(out_dir, names["mask"]), msk)
        if i < n_train:
            manifest["train"].append(names)
        elif i < n_train + n_val:
            manifest["val"].append(names)
        else:
            manifest["test"].append(names)
    try:
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as e:
        raise DataError(f"cannot write manifest in {out_dir}: {e}") from e
    return manifest
