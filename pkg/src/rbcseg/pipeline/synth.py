"""Seeded synthetic smear scenes with exact per-clump ground truth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage as ndi

from ..geometry import Contour, Ellipse, ellipse_pixels, trace_contours

BACKGROUND = (226, 214, 220)
CELL = (182, 112, 150)


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    count_range: tuple[int, int] = (2, 4)
    radius_range: tuple[float, float] = (18.0, 30.0)
    axis_ratio_range: tuple[float, float] = (0.8, 1.0)
    overlap_range: tuple[float, float] = (0.1, 0.6)
    clusters: int = 1
    width: int = 640
    height: int = 480
    noise: float = 0.0
    min_exposed: float = 0.25
    margin: int = 4
    max_tries: int = 500

    def __post_init__(self):
        lo, hi = self.count_range
        if not 1 <= lo <= hi:
            raise ValueError("count_range must satisfy 1 <= lo <= hi")
        rlo, rhi = self.radius_range
        if not 0 < rlo <= rhi:
            raise ValueError("radius_range must satisfy 0 < lo <= hi")
        if 2 * rhi + 2 * self.margin >= min(self.width, self.height):
            raise ValueError("radii do not fit in the canvas")
        alo, ahi = self.axis_ratio_range
        if not 0 < alo <= ahi <= 1:
            raise ValueError("axis_ratio_range must lie in (0, 1]")
        olo, ohi = self.overlap_range
        if not 0 <= olo <= ohi < 1:
            raise ValueError("overlap_range must lie in [0, 1)")
        if self.clusters < 1:
            raise ValueError("clusters must be >= 1")


@dataclass
class ClumpTruth:
    """Ground truth for one connected clump, keyed by its raster-order label."""

    label: int
    ellipses: list[Ellipse]
    intersections: int

    @property
    def count(self) -> int:
        return len(self.ellipses)


@dataclass
class Scene:
    image: np.ndarray
    ellipses: list[Ellipse]
    cluster_of: list[int]
    labels: np.ndarray
    clumps: list[ClumpTruth] = field(default_factory=list)

    def clump_for(self, contour: Contour) -> ClumpTruth | None:
        """Clump whose pixels the contour runs over (majority vote)."""
        xs, ys = contour.points[:, 0], contour.points[:, 1]
        h, w = self.labels.shape
        ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        labs = self.labels[ys[ok], xs[ok]]
        labs = labs[labs > 0]
        if labs.size == 0:
            return None
        lab = int(np.bincount(labs).argmax())
        return self.clumps[lab - 1]


def polar_radius(e: Ellipse, phi: float) -> float:
    """Distance from the center to the boundary in direction ``phi``."""
    t = phi - e.theta
    return e.a * e.b / math.hypot(e.b * math.cos(t), e.a * math.sin(t))


def exposed_arcs(e: Ellipse, others: list[Ellipse], samples: int = 720) -> tuple[int, float]:
    """Number of boundary arcs not covered by ``others`` and the exposed fraction."""
    pts = e.sample(samples)
    covered = np.zeros(samples, dtype=bool)
    for o in others:
        covered |= o.contains(pts[:, 0], pts[:, 1])
    if not covered.any():
        return 0, 1.0
    if covered.all():
        return 0, 0.0
    starts = np.count_nonzero(covered & ~np.roll(covered, -1))
    return int(starts), float((~covered).mean())


def _random_ellipse(rng, spec: SceneSpec, cx: float, cy: float) -> Ellipse:
    a = rng.uniform(*spec.radius_range)
    b = a * rng.uniform(*spec.axis_ratio_range)
    return Ellipse(cx, cy, a, min(a, b), rng.uniform(0, math.pi))


def _fits_frame(e: Ellipse, spec: SceneSpec) -> bool:
    x0, y0, x1, y1 = e.bbox()
    m = spec.margin
    return x0 >= m and y0 >= m and x1 <= spec.width - m and y1 <= spec.height - m


def _place_cluster(rng, spec: SceneSpec, others: list[Ellipse]) -> list[Ellipse]:
    n = int(rng.integers(spec.count_range[0], spec.count_range[1] + 1))
    olo, ohi = spec.overlap_range
    for _ in range(spec.max_tries):
        pad = spec.radius_range[1] + spec.margin
        first = _random_ellipse(rng, spec, rng.uniform(pad, spec.width - pad), rng.uniform(pad, spec.height - pad))
        if not _fits_frame(first, spec) or not _clear_of(first, others):
            continue
        cells = [first]
        for _ in range(spec.max_tries):
            if len(cells) == n:
                break
            j = int(rng.integers(len(cells)))
            anchor = cells[j]
            phi = rng.uniform(0, 2 * math.pi)
            o = rng.uniform(olo, ohi)
            proto = _random_ellipse(rng, spec, 0.0, 0.0)
            d = (1 - o) * (polar_radius(anchor, phi) + polar_radius(proto, phi + math.pi))
            cand = proto.shifted(anchor.cx + d * math.cos(phi), anchor.cy + d * math.sin(phi))
            if not _fits_frame(cand, spec) or not _clear_of(cand, others):
                continue
            if not all(_overlap_ok(cand, m, ohi) for k, m in enumerate(cells) if k != j):
                continue
            trial = cells + [cand]
            if all(exposed_arcs(c, [o for o in trial if o is not c])[1] >= spec.min_exposed for c in trial):
                cells = trial
        if len(cells) == n:
            return cells
    raise PlacementError(f"could not place a cluster of {n} cells after {spec.max_tries} tries")


def _overlap_ok(e: Ellipse, other: Ellipse, max_overlap: float) -> bool:
    dx, dy = other.cx - e.cx, other.cy - e.cy
    phi = math.atan2(dy, dx)
    reach = polar_radius(e, phi) + polar_radius(other, phi + math.pi)
    return math.hypot(dx, dy) >= (1 - max_overlap) * reach


def _clear_of(e: Ellipse, others: list[Ellipse], gap: float = 4.0) -> bool:
    return all(math.hypot(o.cx - e.cx, o.cy - e.cy) > o.a + e.a + gap for o in others)


def gen_synthetic(spec: SceneSpec | None = None, seed: int = 0) -> Scene:
    """Render dark ellipses on a light background; deterministic per seed.

    Clusters never touch each other or the frame. Ground truth lists, per
    8-connected clump, the generating ellipses and the number of boundary
    arcs where one cell disappears under another.
    """
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    ellipses: list[Ellipse] = []
    cluster_of: list[int] = []
    for ci in range(spec.clusters):
        cells = _place_cluster(rng, spec, ellipses)
        ellipses.extend(cells)
        cluster_of.extend([ci] * len(cells))

    h, w = spec.height, spec.width
    mask = np.zeros((h, w), dtype=bool)
    for e in ellipses:
        xs, ys = ellipse_pixels(e)
        keep = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
        mask[ys[keep], xs[keep]] = True
    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = BACKGROUND
    image[mask] = CELL
    if spec.noise > 0:
        image += rng.normal(0.0, spec.noise, image.shape)
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)

    labels, n = ndi.label(mask, structure=np.ones((3, 3), dtype=bool))
    members: dict[int, list[int]] = {lab: [] for lab in range(1, n + 1)}
    for i, e in enumerate(ellipses):
        px, py = int(math.floor(e.cx)), int(math.floor(e.cy))
        members[int(labels[py, px])].append(i)
    clumps = []
    for lab in range(1, n + 1):
        cells = [ellipses[i] for i in members[lab]]
        inter = sum(exposed_arcs(c, [o for o in cells if o is not c])[0] for c in cells)
        clumps.append(ClumpTruth(lab, cells, inter))
    return Scene(image, ellipses, cluster_of, labels, clumps)


def truth_for_contours(scene: Scene, config, image_id: str) -> dict:
    """Truth rows keyed ``(image_id, contour_id)`` for the contours the pipeline traces.

    The rendered image goes through the same mask extraction as ``segment``,
    so contour ids line up with its annotation files.
    """
    from .evaluate import ContourTruth
    from .run import foreground_mask

    mask = foreground_mask(scene.image, config)
    out = {}
    for c in trace_contours(mask, config.min_area, config.border_margin):
        clump = scene.clump_for(c)
        if clump is None:
            continue
        out[(image_id, c.id)] = ContourTruth(clump.count, clump.intersections)
    return out
