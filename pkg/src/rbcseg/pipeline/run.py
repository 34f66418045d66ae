"""End-to-end segmentation of smear images into annotated cells."""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .. import raster
from ..geometry import Contour, Ellipse, trace_contours
from ..normalize import NoBackgroundError, NormalizationStats, background_mean, normalize_image, to_uint8
from ..separate import SeparationResult, separate_overlapping
from .config import PipelineConfig

log = logging.getLogger(__name__)

SOURCES = {"single_curve": "separated_single_curve", "two_curve": "separated_two_curve"}


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(np.asarray(img, dtype=np.uint8)).save(path, format="PNG")


def list_images(folder) -> list[Path]:
    return sorted(p for p in Path(folder).iterdir() if p.suffix.lower() == ".png" and p.is_file())


def real(v: float) -> float:
    """Round to 9 significant digits for stable serialization."""
    return float(f"{float(v):.9g}")


@dataclass
class CellAnnotation:
    image: str
    id: int
    contour_id: int
    source: str  # single | separated_single_curve | separated_two_curve
    ellipse: Ellipse | None = None
    contour: np.ndarray | None = None
    crop: str | None = None

    def __post_init__(self):
        if (self.ellipse is None) == (self.contour is None):
            raise ValueError("exactly one of ellipse / contour must be given")

    def to_dict(self) -> dict:
        d = {"id": self.id, "contour_id": self.contour_id, "source": self.source}
        if self.ellipse is not None:
            e = self.ellipse
            d["ellipse"] = {"cx": real(e.cx), "cy": real(e.cy), "a": real(e.a), "b": real(e.b),
                            "theta": real(e.theta)}
        else:
            d["contour"] = [[int(x), int(y)] for x, y in self.contour]
        if self.crop is not None:
            d["crop"] = self.crop
        return d

    @classmethod
    def from_dict(cls, image: str, d: dict) -> "CellAnnotation":
        ell = d.get("ellipse")
        return cls(
            image=image,
            id=int(d["id"]),
            contour_id=int(d.get("contour_id", -1)),
            source=d["source"],
            ellipse=Ellipse(ell["cx"], ell["cy"], ell["a"], ell["b"], ell["theta"]) if ell else None,
            contour=np.asarray(d["contour"], dtype=np.int64) if "contour" in d else None,
            crop=d.get("crop"),
        )


@dataclass
class ImageResult:
    image: str
    width: int
    height: int
    contours: list[Contour] = field(default_factory=list)
    separations: list[SeparationResult] = field(default_factory=list)
    annotations: list[CellAnnotation] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    error: str | None = None

    def to_json(self) -> str:
        doc = {
            "image": self.image,
            "width": self.width,
            "height": self.height,
            "cells": [a.to_dict() for a in self.annotations],
            "contours": [
                {
                    "id": r.contour_id,
                    "n_points": len(c),
                    "concave_points": [list(cp.coord) for cp in r.concave_points],
                    "n_concave": len(r.concave_points),
                    "n_cells": r.cell_count,
                    "fallback": r.fallback_single_cell,
                    "leftover_curves": r.leftover_curves,
                }
                for c, r in zip(self.contours, self.separations)
            ],
            "diagnostics": {k: self.diagnostics[k] for k in sorted(self.diagnostics)},
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def foreground_mask(rgb: np.ndarray, config: PipelineConfig, diagnostics: dict | None = None) -> np.ndarray:
    """Channel, CLAHE, Otsu, opening and hole filling."""
    gray = raster.extract_channel(rgb, config.channel)
    gray = raster.clahe(gray, config.clip_limit, config.tile_grid, diagnostics)
    otsu = raster.otsu_threshold(gray, config.foreground_dark)
    if diagnostics is not None:
        diagnostics["otsu_threshold"] = otsu.threshold
        if otsu.degenerate:
            diagnostics["otsu_degenerate"] = True
    mask = raster.morph_open(otsu.mask, config.morph_radius)
    return raster.fill_holes(mask)


def normalize_with(rgb: np.ndarray, stats: NormalizationStats, config: PipelineConfig) -> np.ndarray:
    own = background_mean(rgb, foreground_mask(rgb, config))
    return to_uint8(normalize_image(rgb, own, stats.global_mean))


def segment_image(rgb: np.ndarray, config: PipelineConfig, image_id: str = "image",
                  stats: NormalizationStats | None = None) -> ImageResult:
    rgb = raster.check_rgb(rgb)
    h, w = rgb.shape[:2]
    res = ImageResult(image_id, w, h)
    t0 = time.perf_counter()
    if stats is not None:
        try:
            rgb = normalize_with(rgb, stats, config)
        except NoBackgroundError:
            res.diagnostics["normalization_skipped"] = "no background"
    mask = foreground_mask(rgb, config, res.diagnostics)
    res.contours = trace_contours(mask, config.min_area, config.border_margin)
    t1 = time.perf_counter()
    params = config.separation
    res.separations = [separate_overlapping(c, mask, params) for c in res.contours]
    t2 = time.perf_counter()
    res.timings = {"segmentation": t1 - t0, "separation": t2 - t1}
    res.annotations = annotate(image_id, res.contours, res.separations)
    return res


def annotate(image_id: str, contours: Sequence[Contour], separations: Sequence[SeparationResult]) -> list[CellAnnotation]:
    cells = []
    for c, r in zip(contours, separations):
        if r.fallback_single_cell:
            cells.append(CellAnnotation(image_id, len(cells), c.id, "single", contour=c.points))
        else:
            for e, src in r.accepted:
                cells.append(CellAnnotation(image_id, len(cells), c.id, SOURCES[src], ellipse=e))
    return cells


def _segment_path(args) -> ImageResult:
    path, config, stats = args
    image_id = Path(path).stem
    try:
        rgb = read_rgb(path)
    except Exception as exc:  # unreadable file: report and keep the batch going
        return ImageResult(image_id, 0, 0, error=f"cannot read {path}: {exc}")
    return segment_image(rgb, config, image_id, stats)


def run_segment(config: PipelineConfig, paths: Iterable, stats: NormalizationStats | None = None) -> list[ImageResult]:
    """Segment every image; results keep input order whatever the worker count."""
    if stats is None and config.stats_path:
        path = Path(config.stats_path)
        if not path.exists():
            raise FileNotFoundError(f"stats file not found: {path}")
        stats = NormalizationStats.load(path)
    jobs = [(p, config, stats) for p in paths]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_segment_path, jobs))
    else:
        results = [_segment_path(j) for j in jobs]
    for r in results:
        if r.error:
            log.error(r.error)
    return results


def timing_report(results: Sequence[ImageResult]) -> dict:
    """Per-image stage wall-clock seconds plus batch means."""
    rows = [{"image": r.image, **{k: r.timings[k] for k in sorted(r.timings)}}
            for r in results if r.error is None and r.timings]
    if not rows:
        return {"rows": [], "mean": {}}
    stages = [k for k in rows[0] if k != "image"]
    mean = {k: float(np.mean([row[k] for row in rows])) for k in stages}
    return {"rows": rows, "mean": mean}
