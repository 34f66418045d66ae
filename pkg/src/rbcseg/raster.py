"""Raster primitives for turning a smear photo into a foreground mask.

Images are plain numpy arrays:

* RGB image   -- ``(H, W, 3)`` ``uint8``
* gray image  -- ``(H, W)`` ``uint8``
* binary mask -- ``(H, W)`` ``bool`` (True = cell)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

CHANNELS = {"red": 0, "green": 1, "blue": 2}


def check_rgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError(f"expected a non-empty (H, W, 3) image, got shape {img.shape}")
    if img.dtype != np.uint8:
        if img.min() < 0 or img.max() > 255:
            raise ValueError("channel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def check_gray(gray: np.ndarray) -> np.ndarray:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.size == 0:
        raise ValueError(f"expected a non-empty (H, W) image, got shape {gray.shape}")
    if gray.dtype != np.uint8:
        if gray.min() < 0 or gray.max() > 255:
            raise ValueError("intensities must lie in [0, 255]")
        gray = gray.astype(np.uint8)
    return gray


def extract_channel(img: np.ndarray, channel: str = "green") -> np.ndarray:
    """Return one colour plane of an RGB image as a gray image."""
    img = check_rgb(img)
    try:
        idx = CHANNELS[channel]
    except KeyError:
        raise ValueError(f"unknown channel {channel!r}; expected one of {sorted(CHANNELS)}") from None
    return np.ascontiguousarray(img[:, :, idx])


def _clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    # Excess above the limit is spread uniformly; the integer residue goes to
    # evenly spaced bins so the total count is preserved.
    hist = hist.astype(np.int64)
    limit = int(limit)
    excess = int(np.maximum(hist - limit, 0).sum())
    if excess == 0:
        return hist
    hist = np.minimum(hist, limit)
    n_bins = hist.size
    hist += excess // n_bins
    residual = excess % n_bins
    if residual:
        step = max(n_bins // residual, 1)
        hist[::step][:residual] += 1
    return hist


def _equalize_lut(hist: np.ndarray, clip_limit: float) -> np.ndarray:
    total = int(hist.sum())
    if np.isfinite(clip_limit):
        limit = max(clip_limit * total / hist.size, 1.0)
        hist = _clip_histogram(hist, limit)
    cdf = np.cumsum(hist)
    # Integer round-half-up of cdf * 255 / total, free of float ties.
    return np.clip((cdf * 510 + total) // (2 * total), 0, 255).astype(float)


def _tile_edges(n: int, parts: int) -> np.ndarray:
    return (np.arange(parts + 1) * n) // parts


def _interp_weights(n: int, edges: np.ndarray):
    # For each coordinate: lower tile index, upper tile index, weight of upper.
    centers = (edges[:-1] + edges[1:] - 1) / 2.0
    coords = np.arange(n, dtype=float)
    hi = np.searchsorted(centers, coords, side="right")
    lo = np.clip(hi - 1, 0, len(centers) - 1)
    hi = np.clip(hi, 0, len(centers) - 1)
    span = centers[hi] - centers[lo]
    w = np.where(span > 0, (coords - centers[lo]) / np.where(span > 0, span, 1), 0.0)
    return lo, hi, np.clip(w, 0.0, 1.0)


def clahe(gray: np.ndarray, clip_limit: float = 2.0, tile_grid: tuple[int, int] = (8, 8),
          diagnostics: dict | None = None) -> np.ndarray:
    """Contrast limited adaptive histogram equalization.

    Parameters
    ----------
    gray : (H, W) uint8 image
    clip_limit : histogram clip level as a multiple of the mean bin count
        (``np.inf`` disables clipping)
    tile_grid : number of tiles as ``(cols, rows)``
    diagnostics : optional dict; receives ``clahe_global_fallback=True`` when
        the image is smaller than the tile grid and global equalization is used

    Returns
    -------
    (H, W) uint8 image. Tile mappings are blended bilinearly between tile
    centers and clamped at the image edges.
    """
    gray = check_gray(gray)
    cols, rows = tile_grid
    if cols < 1 or rows < 1:
        raise ValueError("tile grid dimensions must be >= 1")
    if not clip_limit > 0:
        raise ValueError("clip_limit must be positive")
    h, w = gray.shape
    if h < rows or w < cols:
        if diagnostics is not None:
            diagnostics["clahe_global_fallback"] = True
        cols, rows = 1, 1

    ye = _tile_edges(h, rows)
    xe = _tile_edges(w, cols)
    luts = np.empty((rows, cols, 256))
    for r in range(rows):
        for c in range(cols):
            tile = gray[ye[r]:ye[r + 1], xe[c]:xe[c + 1]]
            hist = np.bincount(tile.ravel(), minlength=256)
            luts[r, c] = _equalize_lut(hist, clip_limit)

    y0, y1, wy = _interp_weights(h, ye)
    x0, x1, wx = _interp_weights(w, xe)
    wy = wy[:, None]
    wx = wx[None, :]
    g = gray.astype(np.intp)
    r0, r1 = y0[:, None], y1[:, None]
    c0, c1 = x0[None, :], x1[None, :]
    top = luts[r0, c0, g] * (1 - wx) + luts[r0, c1, g] * wx
    bottom = luts[r1, c0, g] * (1 - wx) + luts[r1, c1, g] * wx
    out = top * (1 - wy) + bottom * wy
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class OtsuResult:
    threshold: int
    mask: np.ndarray
    degenerate: bool = False


def between_class_variance(hist: np.ndarray) -> np.ndarray:
    """Between-class variance for every split ``{v <= t} | {v > t}``, t = 0..255."""
    hist = np.asarray(hist, dtype=float)
    p = hist / hist.sum()
    levels = np.arange(p.size, dtype=float)
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    m0 = np.cumsum(p * levels)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        var = (mt * w0 - m0) ** 2 / (w0 * w1)
    var[~np.isfinite(var)] = 0.0
    var[(w0 <= 0) | (w1 <= 1e-15)] = 0.0
    return var


def otsu_threshold(gray: np.ndarray, foreground_dark: bool = True) -> OtsuResult:
    """Otsu binarization over the 256-bin histogram.

    The threshold ``t`` splits intensities into ``v <= t`` and ``v > t``; the
    smallest maximizer of the between-class variance wins ties. With
    ``foreground_dark`` the foreground is ``v <= t``, otherwise ``v > t``.
    A constant image yields its own value and an all-background mask.
    """
    gray = check_gray(gray)
    hist = np.bincount(gray.ravel(), minlength=256)
    if np.count_nonzero(hist) < 2:
        value = int(gray.flat[0])
        return OtsuResult(value, np.zeros(gray.shape, dtype=bool), degenerate=True)
    var = between_class_variance(hist)
    # Relative tolerance so float noise cannot break exact ties.
    t = int(np.flatnonzero(var >= var.max() * (1 - 1e-12))[0])
    mask = gray <= t if foreground_dark else gray > t
    return OtsuResult(t, mask)


def disc(radius: int) -> np.ndarray:
    """Disc structuring element: offsets with dx^2 + dy^2 <= r^2 + r.

    The extra ``r`` rounds the digital disc out so radius 1 is the full 3x3
    block rather than a cross.
    """
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return xx * xx + yy * yy <= r * r + r


def morph_open(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Erosion then dilation by a disc. Pixels beyond the frame count as background."""
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    se = disc(radius)
    eroded = ndi.binary_erosion(mask, structure=se, border_value=0)
    return ndi.binary_dilation(eroded, structure=se, border_value=0)


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    return ndi.binary_dilation(mask, structure=disc(radius), border_value=0)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill background regions not 4-connected to the image border."""
    mask = np.asarray(mask, dtype=bool)
    return ndi.binary_fill_holes(mask, structure=ndi.generate_binary_structure(2, 1))
