"""Per-cell crops on a fixed black canvas and debug overlays."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..geometry import Contour, contour_to_mask, ellipse_pixels
from ..raster import check_rgb, disc
from ..separate import SeparationResult
from .run import CellAnnotation, write_png

log = logging.getLogger(__name__)

CONTOUR_COLOR = (255, 255, 0)
ELLIPSE_COLOR = (0, 200, 0)
CONCAVE_COLOR = (255, 0, 0)


@dataclass
class Crop:
    annotation: CellAnnotation
    image: np.ndarray
    oversized: bool = False


def cell_pixels(ann: CellAnnotation) -> tuple[np.ndarray, np.ndarray]:
    """Column and row indices covered by the annotation's geometry."""
    if ann.ellipse is not None:
        return ellipse_pixels(ann.ellipse)
    c = Contour(ann.contour)
    x0, y0, x1, y1 = c.bbox()
    local = contour_to_mask(Contour(c.points - (x0, y0)), (y1 - y0 + 1, x1 - x0 + 1))
    ys, xs = np.nonzero(local)
    return xs + x0, ys + y0


def crop_cell(image: np.ndarray, ann: CellAnnotation, canvas: int = 72) -> Crop:
    """Copy the cell's pixels onto the center of a black ``canvas`` square.

    Cells larger than the canvas are center-cropped and flagged.
    """
    image = check_rgb(image)
    h, w = image.shape[:2]
    xs, ys = cell_pixels(ann)
    keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    xs, ys = xs[keep], ys[keep]
    out = np.zeros((canvas, canvas, 3), dtype=np.uint8)
    if xs.size == 0:
        return Crop(ann, out)
    x0, x1, y0, y1 = xs.min(), xs.max(), ys.min(), ys.max()
    bw, bh = x1 - x0 + 1, y1 - y0 + 1
    oversized = bool(bw > canvas or bh > canvas)
    dx = xs - x0 + (canvas - bw) // 2
    dy = ys - y0 + (canvas - bh) // 2
    ok = (dx >= 0) & (dx < canvas) & (dy >= 0) & (dy < canvas)
    out[dy[ok], dx[ok]] = image[ys[ok], xs[ok]]
    if oversized:
        log.warning("cell %s/%d is %dx%d, larger than the %d px canvas; center-cropped",
                    ann.image, ann.id, bw, bh, canvas)
    return Crop(ann, out, oversized)


def export_crops(image: np.ndarray, annotations: Sequence[CellAnnotation], canvas: int = 72,
                 out_dir=None) -> list[Crop]:
    """Crop every annotated cell; with ``out_dir`` also write PNGs and set ``ann.crop``."""
    crops = [crop_cell(image, a, canvas) for a in annotations]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for cr in crops:
            name = f"{cr.annotation.image}_cell{cr.annotation.id:03d}.png"
            write_png(out_dir / name, cr.image)
            cr.annotation.crop = name
    return crops


def write_manifest(path, crops: Sequence[Crop]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["crop", "image", "cell_id", "contour_id", "source", "oversized"])
        for cr in crops:
            a = cr.annotation
            wr.writerow([a.crop or "", a.image, a.id, a.contour_id, a.source, int(cr.oversized)])


def _outline(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Raster pixels with at least one 4-neighbour outside the raster.
    if xs.size == 0:
        return xs, ys
    x0, y0 = xs.min() - 1, ys.min() - 1
    grid = np.zeros((ys.max() - y0 + 2, xs.max() - x0 + 2), dtype=bool)
    grid[ys - y0, xs - x0] = True
    inner = grid.copy()
    inner[1:-1, 1:-1] = (grid[1:-1, 1:-1] & grid[:-2, 1:-1] & grid[2:, 1:-1]
                         & grid[1:-1, :-2] & grid[1:-1, 2:])
    edge = grid & ~inner
    ey, ex = np.nonzero(edge)
    return ex + x0, ey + y0


def _paint(out: np.ndarray, xs, ys, color) -> None:
    h, w = out.shape[:2]
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    out[ys[ok], xs[ok]] = color


def render_overlay(image: np.ndarray, contours: Sequence[Contour],
                   results: Sequence[SeparationResult]) -> np.ndarray:
    """Contours, accepted ellipse outlines and concave-point dots over a copy of the image."""
    out = check_rgb(image).copy()
    for c in contours:
        _paint(out, c.points[:, 0], c.points[:, 1], CONTOUR_COLOR)
    dy, dx = np.nonzero(disc(1))
    dx, dy = dx - 1, dy - 1
    for r in results:
        for e, _ in r.accepted:
            xs, ys = _outline(*ellipse_pixels(e))
            _paint(out, xs, ys, ELLIPSE_COLOR)
        for cp in r.concave_points:
            _paint(out, cp.coord[0] + dx, cp.coord[1] + dy, CONCAVE_COLOR)
    return out
