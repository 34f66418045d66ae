"""Overlapping cell separation.

A clump contour is cut at its concave points into convex curves, an ellipse
is fitted to every curve, and the fits are screened largest-first by how much
of each ellipse lies inside the clump, how much of it is not yet claimed by an
accepted ellipse, and its size. Curves that did not yield a cell are then
paired and refitted.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage as ndi

from .geometry import (
    Conic,
    Contour,
    DegenerateConicError,
    Ellipse,
    NotAnEllipseError,
    conic_to_ellipse,
    ellipse_pixels,
    points_in_polygon,
)


class InsufficientPointsError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


class ContourTooShortError(ValueError):
    pass


@dataclass(frozen=True)
class SeparationParams:
    k: int = 8
    min_ellipse_area: float = 300.0
    inside_ratio: float = 0.8
    novelty_ratio: float = 0.2
    min_fit_points: int = 5
    merge_gap: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.merge_gap < 1:
            raise ValueError("merge_gap must be >= 1")
        if not 0 < self.inside_ratio <= 1:
            raise ValueError("inside_ratio must be in (0, 1]")
        if not 0 < self.novelty_ratio <= 1:
            raise ValueError("novelty_ratio must be in (0, 1]")
        if self.min_fit_points < 5:
            raise ValueError("min_fit_points must be >= 5")
        if self.min_ellipse_area < 0:
            raise ValueError("min_ellipse_area must be >= 0")


@dataclass(frozen=True)
class ConcavePoint:
    contour_index: int
    coord: tuple[int, int]


@dataclass(frozen=True, eq=False)
class ConvexCurve:
    contour_id: int
    point_run: np.ndarray
    curve_index: int
    whole_contour: bool = False

    def __len__(self) -> int:
        return len(self.point_run)


@dataclass
class SeparationResult:
    contour_id: int
    accepted: list[tuple[Ellipse, str]] = field(default_factory=list)
    leftover_curves: list[int] = field(default_factory=list)
    concave_points: list[ConcavePoint] = field(default_factory=list)
    fallback_single_cell: bool = False
    curves: list[ConvexCurve] = field(default_factory=list)
    diagnostics: list[str] = field(default_factory=list)

    @property
    def cell_count(self) -> int:
        return 1 if self.fallback_single_cell else len(self.accepted)


# -- concave points -----------------------------------------------------------

def concave_mask(c: Contour, k: int) -> np.ndarray:
    """Boolean per contour point: all k symmetric-neighbour midpoints fall outside."""
    pts = c.points
    n = len(pts)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < 2 * k + 1:
        raise ContourTooShortError(f"contour shorter than 2k+1 ({n} < {2 * k + 1})")
    cand = np.arange(n)
    for j in range(1, k + 1):
        if cand.size == 0:
            break
        mids = (pts[(cand - j) % n] + pts[(cand + j) % n]) / 2.0
        cand = cand[~points_in_polygon(pts, mids)]
    out = np.zeros(n, dtype=bool)
    out[cand] = True
    return out


def collapse_runs(flags: np.ndarray, max_gap: int = 1, depth: np.ndarray | None = None) -> list[int]:
    """One representative index per cyclic cluster of True values.

    Consecutive True indices at most ``max_gap`` apart form a cluster
    (``max_gap=1`` means strictly contiguous). Without ``depth`` the
    representative is the middle of the cluster's index span (lower middle for
    even spans); gaps inside a cluster are pixel-staircase artefacts, so the
    middle need not itself be flagged. With ``depth``, clusters that contain
    gaps are represented by their deepest index instead, ties going to the one
    nearest the middle; strictly contiguous runs keep the middle element.
    """
    idx = np.flatnonzero(flags)
    n = len(flags)
    if idx.size == 0:
        return []
    gaps = np.diff(np.concatenate([idx, [idx[0] + n]]))
    if np.all(gaps <= max_gap):
        return [int(idx[(len(idx) - 1) // 2])]  # every point flagged
    # Rotate so a cluster starts at position 0.
    start = int(np.flatnonzero(gaps > max_gap)[0]) + 1
    idx = np.roll(idx, -start)
    unwrapped = idx.copy()
    unwrapped[1:] += n * np.cumsum(np.diff(idx) < 0)
    clusters = np.split(unwrapped, np.flatnonzero(np.diff(unwrapped) > max_gap) + 1)
    reps = []
    for cl in clusters:
        mid = (cl[0] + cl[-1]) // 2
        if depth is None or len(cl) == cl[-1] - cl[0] + 1:
            reps.append(int(mid) % n)
            continue
        span = np.arange(cl[0], cl[-1] + 1)
        d = depth[span % n]
        best = span[d >= d.max() - 1e-9]
        reps.append(int(best[np.argmin(np.abs(best - mid))]) % n)
    return sorted(reps)


def notch_depth(c: Contour, k: int) -> np.ndarray:
    """Distance from each point to the midpoint of its k-th neighbours."""
    pts = c.points.astype(float)
    mids = (np.roll(pts, k, axis=0) + np.roll(pts, -k, axis=0)) / 2.0
    return np.hypot(*(pts - mids).T)


def find_concave_points(c: Contour, k: int = 8, merge_gap: int = 4) -> list[ConcavePoint]:
    """Concave points of a contour in contour order.

    A point is concave when the midpoints of all k symmetric neighbour pairs
    lie outside the contour. Flagged points at most ``merge_gap`` indices apart
    collapse to a single point (see ``collapse_runs``); ``merge_gap=1`` merges
    only strictly contiguous runs.
    """
    flags = concave_mask(c, k)
    reps = collapse_runs(flags, merge_gap, notch_depth(c, k))
    return [ConcavePoint(i, (int(c.points[i, 0]), int(c.points[i, 1]))) for i in reps]


def split_into_curves(c: Contour, cps: Sequence[ConcavePoint]) -> list[ConvexCurve]:
    n = len(c)
    if len(cps) < 2:
        return [ConvexCurve(c.id, c.points.copy(), 0, whole_contour=True)]
    order = [cp.contour_index for cp in cps]
    if order != sorted(order):
        raise ValueError("concave points must be sorted by contour index")
    curves = []
    for m, i0 in enumerate(order):
        i1 = order[(m + 1) % len(order)]
        length = (i1 - i0) % n or n
        idx = (i0 + np.arange(length + 1)) % n
        curves.append(ConvexCurve(c.id, c.points[idx], m))
    return curves


# -- direct ellipse fit ---------------------------------------------------------

_C1_INV = np.array([[0.0, 0.0, 0.5], [0.0, -1.0, 0.0], [0.5, 0.0, 0.0]])


def fit_ellipse_direct(points, min_fit_points: int = 5) -> Conic:
    """Least-squares conic constrained to ``4ac - b^2 = 1``.

    The scatter matrix is split into quadratic and linear blocks so only a
    3x3 eigenproblem remains, and coordinates are centred and scaled before
    fitting. The returned conic is in the input coordinates and is always an
    ellipse.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) < max(min_fit_points, 5):
        raise InsufficientPointsError(f"insufficient points ({len(pts)} < {max(min_fit_points, 5)})")
    mx, my = pts.mean(axis=0)
    rms = math.sqrt(np.mean((pts[:, 0] - mx) ** 2 + (pts[:, 1] - my) ** 2))
    if not rms > 0:
        raise DegenerateFitError("degenerate configuration (coincident points)")
    s = math.sqrt(2.0) / rms
    u = (pts[:, 0] - mx) * s
    v = (pts[:, 1] - my) * s

    d1 = np.column_stack([u * u, u * v, v * v])
    d2 = np.column_stack([u, v, np.ones_like(u)])
    sv = np.linalg.svd(np.hstack([d1, d2]), compute_uv=False)
    if sv[4] <= 1e-10 * sv[0]:
        raise DegenerateFitError("degenerate configuration (rank-deficient scatter)")
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    try:
        t = -np.linalg.solve(s3, s2.T)
    except np.linalg.LinAlgError:
        raise DegenerateFitError("degenerate configuration (collinear points)") from None
    m = s1 + s2 @ t
    w, vec = np.linalg.eig(_C1_INV @ m)
    vec = np.real(vec)
    cond = 4 * vec[0] * vec[2] - vec[1] ** 2
    best = None
    for i in np.flatnonzero(cond > 0):
        a1 = vec[:, i] / math.sqrt(cond[i])
        resid = float(a1 @ m @ a1)
        if best is None or resid < best[0]:
            best = (resid, a1)
    if best is None:
        raise DegenerateFitError("degenerate configuration (no elliptic solution)")
    a1 = best[1]
    A, B, C = a1
    D, E, F = t @ a1

    # Undo u = s (x - mx), v = s (y - my).
    s2_ = s * s
    qa = A * s2_
    qb = B * s2_
    qc = C * s2_
    qd = -2 * A * s2_ * mx - B * s2_ * my + D * s
    qe = -B * s2_ * mx - 2 * C * s2_ * my + E * s
    qf = (A * s2_ * mx * mx + B * s2_ * mx * my + C * s2_ * my * my
          - D * s * mx - E * s * my + F)
    q = np.array([qa, qb, qc, qd, qe, qf])
    if not np.all(np.isfinite(q)):
        raise DegenerateFitError("degenerate configuration (non-finite fit)")
    return Conic(q)


def fit_ellipse(points, min_fit_points: int = 5) -> Ellipse:
    """Direct fit followed by conversion to geometric parameters."""
    q = fit_ellipse_direct(points, min_fit_points)
    try:
        return conic_to_ellipse(q)
    except (NotAnEllipseError, DegenerateConicError, ValueError) as exc:
        raise DegenerateFitError(f"degenerate configuration ({exc})") from exc


# -- verification ---------------------------------------------------------------

@dataclass
class VerifyOutcome:
    accepted: list[tuple[Ellipse, object]] = field(default_factory=list)
    rejected: list[object] = field(default_factory=list)
    reasons: dict = field(default_factory=dict)


def _ratios(e: Ellipse, contour_mask: np.ndarray, origin, others: Sequence[Ellipse]):
    xs, ys = ellipse_pixels(e)
    total = xs.size
    if total == 0:
        return 0, 0.0, 0.0
    lx = xs - origin[0]
    ly = ys - origin[1]
    h, w = contour_mask.shape
    ok = (lx >= 0) & (lx < w) & (ly >= 0) & (ly < h)
    inside = int(contour_mask[ly[ok], lx[ok]].sum())
    covered = np.zeros(total, dtype=bool)
    for o in others:
        covered |= o.contains(xs + 0.5, ys + 0.5)
    return total, inside / total, float((~covered).sum()) / total


def check_criteria(e: Ellipse, contour_mask: np.ndarray, params: SeparationParams,
                   accepted: Sequence[Ellipse] = (), origin=(0, 0)) -> str | None:
    """Name of the first failed criterion, or None when ``e`` passes all three."""
    if not e.area >= params.min_ellipse_area:
        return "size"
    # Area alone bounds the inside ratio by |mask| / |ellipse|; skip rasterizing
    # ellipses far too big to pass.
    if e.area * params.inside_ratio > 1.5 * float(contour_mask.sum()) + 100:
        return "inside"
    total, inside, novel = _ratios(e, contour_mask, origin, accepted)
    if total == 0:
        return "empty"
    if inside < params.inside_ratio:
        return "inside"
    if novel < params.novelty_ratio:
        return "novelty"
    return None


def verify_ellipses(candidates: Sequence[tuple[Ellipse, object]], contour_mask: np.ndarray,
                    params: SeparationParams, prior: Sequence[Ellipse] = (),
                    origin=(0, 0)) -> VerifyOutcome:
    """Screen candidates largest-first against the three acceptance criteria.

    ``contour_mask`` is the filled clump interior whose pixel ``[0, 0]`` sits at
    global pixel ``origin``. ``prior`` holds ellipses already accepted before
    this call; they count towards the novelty criterion.
    """
    order = sorted(range(len(candidates)), key=lambda i: (-candidates[i][0].area, candidates[i][1]))
    out = VerifyOutcome()
    taken = list(prior)
    for i in order:
        e, tag = candidates[i]
        reason = check_criteria(e, contour_mask, params, taken, origin)
        if reason is None:
            out.accepted.append((e, tag))
            taken.append(e)
        else:
            out.rejected.append(tag)
            out.reasons[tag] = reason
    return out


def two_curve_fit(leftover: Sequence[ConvexCurve], contour_mask: np.ndarray,
                  accepted: Sequence[Ellipse], params: SeparationParams, origin=(0, 0),
                  diagnostics: list | None = None) -> list[tuple[Ellipse, tuple[int, int]]]:
    """Refit ellipses on every pair of leftover curves and keep the verified ones.

    Pairs are screened in descending ellipse area; a curve joins at most one
    accepted pair.
    """
    cands = []
    for ca, cb in itertools.combinations(sorted(leftover, key=lambda c: c.curve_index), 2):
        pair = (ca.curve_index, cb.curve_index)
        pts = np.vstack([ca.point_run, cb.point_run]).astype(float) + 0.5
        try:
            e = fit_ellipse(pts, params.min_fit_points)
        except ValueError as exc:
            if diagnostics is not None:
                diagnostics.append(f"pair {pair}: {exc}")
            continue
        cands.append((e, pair))
    cands.sort(key=lambda ep: (-ep[0].area, ep[1]))
    used: set[int] = set()
    taken = list(accepted)
    out = []
    for e, pair in cands:
        if pair[0] in used or pair[1] in used:
            continue
        if check_criteria(e, contour_mask, params, taken, origin) is None:
            out.append((e, pair))
            taken.append(e)
            used.update(pair)
    return out


# -- whole contour ----------------------------------------------------------------

def contour_interior(c: Contour, mask: np.ndarray | None = None, pad: int = 0):
    """Filled interior of a contour as a local crop plus its global origin."""
    x0, y0, x1, y1 = c.bbox()
    ox, oy = x0 - pad, y0 - pad
    h, w = y1 - y0 + 1 + 2 * pad, x1 - x0 + 1 + 2 * pad
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        crop = np.zeros((h, w), dtype=bool)
        H, W = mask.shape
        ya, yb = max(oy, 0), min(oy + h, H)
        xa, xb = max(ox, 0), min(ox + w, W)
        crop[ya - oy:yb - oy, xa - ox:xb - ox] = mask[ya:yb, xa:xb]
        labels, _ = ndi.label(crop, structure=np.ones((3, 3), dtype=bool))
        sx, sy = c.points[0]
        lab = labels[sy - oy, sx - ox]
        if lab:
            return ndi.binary_fill_holes(labels == lab), (ox, oy)
    local = Contour(c.points - (ox, oy), c.id)
    yy, xx = np.mgrid[0:h, 0:w]
    inside = points_in_polygon(local.points, np.column_stack([xx.ravel(), yy.ravel()]))
    return inside.reshape(h, w), (ox, oy)


def separate_overlapping(c: Contour, mask: np.ndarray | None = None,
                         params: SeparationParams | None = None) -> SeparationResult:
    """Split one clump contour into ellipse-modelled cells.

    With fewer than two concave points, or when no ellipse survives
    verification, the contour is reported as a single cell.
    """
    params = params or SeparationParams()
    result = SeparationResult(contour_id=c.id)
    try:
        result.concave_points = find_concave_points(c, params.k, params.merge_gap)
    except ContourTooShortError as exc:
        result.diagnostics.append(str(exc))
        result.fallback_single_cell = True
        return result
    if len(result.concave_points) < 2:
        result.curves = split_into_curves(c, result.concave_points)
        result.fallback_single_cell = True
        return result

    curves = split_into_curves(c, result.concave_points)
    result.curves = curves
    interior, origin = contour_interior(c, mask, pad=1)

    leftover = []
    cands = []
    for curve in curves:
        if len(curve) < params.min_fit_points:
            leftover.append(curve)
            continue
        try:
            e = fit_ellipse(curve.point_run.astype(float) + 0.5, params.min_fit_points)
        except ValueError as exc:
            result.diagnostics.append(f"curve {curve.curve_index}: {exc}")
            leftover.append(curve)
            continue
        cands.append((e, curve.curve_index))

    outcome = verify_ellipses(cands, interior, params, origin=origin)
    result.accepted = [(e, "single_curve") for e, _ in outcome.accepted]
    rejected = set(outcome.rejected)
    leftover.extend(cv for cv in curves if cv.curve_index in rejected)

    pairs = two_curve_fit(leftover, interior, [e for e, _ in result.accepted], params,
                          origin, result.diagnostics)
    used = {i for _, pair in pairs for i in pair}
    result.accepted.extend((e, "two_curve") for e, _ in pairs)
    result.leftover_curves = sorted(cv.curve_index for cv in leftover if cv.curve_index not in used)
    result.fallback_single_cell = not result.accepted
    return result
