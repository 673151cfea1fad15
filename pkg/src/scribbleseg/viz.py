"""Visualization emitters: binary PGM for scalar maps, PPM for overlays.

Scalar maps in [0, 1] (pseudo labels, patch masks) are scaled by 255 so a
value of exactly 1 renders as 255; other scalar ranges are min-max scaled.
Class overlays blend a fixed palette over the grayscale image.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .grids import BG_CODE, GC_CODE, UNLABELED_CODE

# Palette indexed by class id; special codes listed explicitly.
PALETTE = {
    0: (0, 0, 0),
    1: (220, 50, 50),
    2: (60, 200, 60),
    3: (70, 90, 230),
    GC_CODE: (235, 220, 60),
}
OVERLAY_ALPHA = 0.55


def _to_u8_scalar(layer: np.ndarray) -> np.ndarray:
    layer = np.asarray(layer, dtype=np.float64)
    lo = layer.min()
    hi = layer.max()
    if 0.0 <= lo and hi <= 1.0:
        scaled = layer * 255.0
    elif hi > lo:
        scaled = (layer - lo) / (hi - lo) * 255.0
    else:
        scaled = np.zeros_like(layer)
    return np.rint(scaled).clip(0, 255).astype(np.uint8)


def _write_binary(path, header: bytes, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as e:
        raise DataError(f"cannot write image {path}: {e}") from e


def write_pgm(path, grid: np.ndarray) -> None:
    """P5 grayscale image; grid is 2D, see `_to_u8_scalar` for scaling."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DataError(f"PGM needs a 2D grid, got shape {grid.shape}")
    data = _to_u8_scalar(grid)
    h, w = data.shape
    _write_binary(path, f"P5\n{w} {h}\n255\n".encode("ascii"), data.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """P6 color image from an (H, W, 3) uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    _write_binary(
        path, f"P6\n{w} {h}\n255\n".encode("ascii"),
        rgb.astype(np.uint8).tobytes(),
    )


def render_overlay(img: np.ndarray, layer: np.ndarray, out_path) -> None:
    """Blend a label layer over a grayscale image and write a P6 PPM.

    Pixels with code 0 (background) or UNLABELED stay grayscale; labeled
    pixels blend toward their palette color.
    """
    img = np.asarray(img, dtype=np.float64)
    layer = np.asarray(layer)
    if img.shape != layer.shape:
        raise DataError(f"image {img.shape} and layer {layer.shape} differ in dims")
    base = _to_u8_scalar(img).astype(np.float64)
    rgb = np.stack([base, base, base], axis=-1)
    for code, color in PALETTE.items():
        if code in (BG_CODE, UNLABELED_CODE):
            continue
        sel = layer == code
        if not sel.any():
            continue
        rgb[sel] = (1.0 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * np.asarray(color)
    write_ppm(out_path, np.rint(rgb).clip(0, 255).astype(np.uint8))


def render_patch_mask(pm_masked: np.ndarray, patch_size: int, out_path) -> None:
    """Patch mask rendered at pixel resolution, masked patches white."""
    grid = np.repeat(np.repeat(np.asarray(pm_masked, dtype=np.float64), patch_size, 0),
                     patch_size, 1)
    write_pgm(out_path, grid)
