"""Contours, polygon tests and ellipse/conic geometry.

Coordinates follow the image convention: ``x`` is the column, ``y`` the row
(pointing down). Contour points sit on pixel indices. Ellipses live in the
continuous frame where pixel ``(i, j)`` covers ``[i, i+1) x [j, j+1)``, so a
pixel is inside an ellipse when its center ``(i + 0.5, j + 0.5)`` is.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage as ndi

# Moore neighbourhood, clockwise on screen starting west.
_DIRS = ((-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1))
_DIR_INDEX = {d: i for i, d in enumerate(_DIRS)}


class NotAnEllipseError(ValueError):
    pass


class DegenerateConicError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Contour:
    """Closed 8-connected boundary polygon; ``points`` is an (N, 2) int array of (x, y)."""

    points: np.ndarray
    id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 2)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def area(self) -> float:
        return contour_area(self)

    def bbox(self) -> tuple[int, int, int, int]:
        """(x0, y0, x1, y1) inclusive."""
        lo = self.points.min(axis=0)
        hi = self.points.max(axis=0)
        return int(lo[0]), int(lo[1]), int(hi[0]), int(hi[1])


def signed_area(points) -> float:
    p = np.asarray(points, dtype=float)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def contour_area(c) -> float:
    """Absolute shoelace area of the boundary polygon."""
    pts = c.points if isinstance(c, Contour) else c
    return abs(signed_area(pts))


def _moore_trace(local: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    # local is a zero-padded boolean crop holding a single component. The walk
    # is a function of (pixel, backtrack direction), so the first repeated
    # state closes the boundary. Re-entering the start from the west (Jacob's
    # criterion) is the common case but is never reached on some thin shapes.
    sx, sy = start
    cx, cy = sx, sy
    back = 0  # west neighbour of the raster-first pixel is background
    seen: dict[tuple[int, int, int], int] = {}
    points: list[tuple[int, int]] = []
    while (cx, cy, back) not in seen:
        seen[(cx, cy, back)] = len(points)
        points.append((cx, cy))
        for step in range(1, 9):
            d = (back + step) % 8
            dx, dy = _DIRS[d]
            nx, ny = cx + dx, cy + dy
            if local[ny, nx]:
                px, py = _DIRS[(d - 1) % 8]
                back = _DIR_INDEX[(px - dx, py - dy)]
                break
        else:
            return points  # isolated pixel
        cx, cy = nx, ny
    cycle = points[seen[(cx, cy, back)]:]
    i = cycle.index((sx, sy))
    return cycle[i:] + cycle[:i]


def trace_contours(mask: np.ndarray, min_area: float = 300.0, border_margin: int = 1) -> list[Contour]:
    """Outer boundaries of the 8-connected foreground components.

    Components reaching into a frame of ``border_margin`` pixels are dropped,
    as are contours whose shoelace area is below ``min_area``. Contours come
    out in raster order of their first pixel and are numbered from 0.
    """
    mask = np.asarray(mask, dtype=bool)
    labels, n = ndi.label(mask, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return []
    h, w = mask.shape
    out = []
    for lab, sl in enumerate(ndi.find_objects(labels), start=1):
        if sl is None:
            continue
        ys, xs = sl
        if border_margin > 0 and (ys.start < border_margin or xs.start < border_margin
                                  or ys.stop > h - border_margin or xs.stop > w - border_margin):
            continue
        comp = labels[sl] == lab
        local = np.pad(comp, 1)
        row = int(np.flatnonzero(local.any(axis=1))[0])
        col = int(np.flatnonzero(local[row])[0])
        pts = _moore_trace(local, (col, row))
        if len(pts) < 3:
            continue
        arr = np.asarray(pts, dtype=np.int64) + (xs.start - 1, ys.start - 1)
        if signed_area(arr) < 0:
            arr = arr[::-1]
        if abs(signed_area(arr)) < min_area:
            continue
        out.append(Contour(arr, id=len(out)))
    return out


def _on_segments(px, py, x1, y1, x2, y2):
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    within = ((np.minimum(x1, x2) <= px) & (px <= np.maximum(x1, x2))
              & (np.minimum(y1, y2) <= py) & (py <= np.maximum(y1, y2)))
    return (cross == 0) & within


def points_in_polygon(poly, pts, chunk: int = 1 << 20) -> np.ndarray:
    """Even-odd ray casting for many points; points on an edge count as inside."""
    poly = np.asarray(poly, dtype=float).reshape(-1, 2)
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    x1 = poly[:, 0][None, :]
    y1 = poly[:, 1][None, :]
    x2 = np.roll(poly[:, 0], -1)[None, :]
    y2 = np.roll(poly[:, 1], -1)[None, :]
    out = np.empty(len(pts), dtype=bool)
    step = max(1, chunk // max(len(poly), 1))
    for s in range(0, len(pts), step):
        px = pts[s:s + step, 0][:, None]
        py = pts[s:s + step, 1][:, None]
        straddle = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xi = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        crossings = np.count_nonzero(straddle & (px < xi), axis=1)
        inside = (crossings % 2) == 1
        inside |= _on_segments(px, py, x1, y1, x2, y2).any(axis=1)
        out[s:s + step] = inside
    return out


def point_in_contour(c: Contour, p) -> bool:
    """True when ``p`` is inside the contour polygon or on its boundary."""
    return bool(points_in_polygon(c.points, [p])[0])


def contour_to_mask(c: Contour, shape: tuple[int, int]) -> np.ndarray:
    """Pixels (row, col shape) whose index lies inside or on the contour polygon."""
    h, w = shape
    x0, y0, x1, y1 = c.bbox()
    out = np.zeros((h, w), dtype=bool)
    xa, xb = max(x0, 0), min(x1, w - 1)
    ya, yb = max(y0, 0), min(y1, h - 1)
    if xa > xb or ya > yb:
        return out
    yy, xx = np.mgrid[ya:yb + 1, xa:xb + 1]
    inside = points_in_polygon(c.points, np.column_stack([xx.ravel(), yy.ravel()]))
    out[ya:yb + 1, xa:xb + 1] = inside.reshape(yy.shape)
    return out


@dataclass(frozen=True)
class Ellipse:
    """Ellipse with center, semi-major ``a``, semi-minor ``b`` and rotation of the major axis."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.a >= self.b > 0):
            raise ValueError(f"need a >= b > 0, got a={self.a}, b={self.b}")
        object.__setattr__(self, "theta", float(self.theta) % math.pi)

    @property
    def center(self) -> tuple[float, float]:
        return self.cx, self.cy

    @property
    def area(self) -> float:
        return ellipse_area(self)

    def shifted(self, dx: float, dy: float) -> "Ellipse":
        return Ellipse(self.cx + dx, self.cy + dy, self.a, self.b, self.theta)

    def bbox(self) -> tuple[float, float, float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        ex = math.hypot(self.a * c, self.b * s)
        ey = math.hypot(self.a * s, self.b * c)
        return self.cx - ex, self.cy - ey, self.cx + ex, self.cy + ey

    def contains(self, x, y) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = np.asarray(x, dtype=float) - self.cx
        dy = np.asarray(y, dtype=float) - self.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    def sample(self, n: int, t0: float = 0.0, t1: float = 2 * math.pi, endpoint: bool = False) -> np.ndarray:
        """Points on the boundary at ``n`` evenly spaced parameter values."""
        t = np.linspace(t0, t1, n, endpoint=endpoint)
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = self.a * np.cos(t)
        v = self.b * np.sin(t)
        return np.column_stack([self.cx + u * c - v * s, self.cy + u * s + v * c])


@dataclass(frozen=True, eq=False)
class Conic:
    """Coefficients (a, b, c, d, e, f) of ax^2 + bxy + cy^2 + dx + ey + f = 0,
    scaled to unit norm with a >= 0."""

    coeffs: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.coeffs, dtype=float).reshape(6)
        norm = np.linalg.norm(q)
        if not np.isfinite(norm) or norm == 0:
            raise ValueError("conic coefficients must be finite and not all zero")
        q = q / norm
        if q[0] < 0 or (q[0] == 0 and q[2] < 0):
            q = -q
        object.__setattr__(self, "coeffs", q)

    @property
    def discriminant(self) -> float:
        a, b, c = self.coeffs[:3]
        return float(b * b - 4 * a * c)

    def evaluate(self, x, y) -> np.ndarray:
        a, b, c, d, e, f = self.coeffs
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return a * x * x + b * x * y + c * y * y + d * x + e * y + f


def ellipse_to_conic(e: Ellipse) -> Conic:
    s, c = math.sin(e.theta), math.cos(e.theta)
    a2, b2 = e.a * e.a, e.b * e.b
    A = a2 * s * s + b2 * c * c
    B = 2 * (b2 - a2) * s * c
    C = a2 * c * c + b2 * s * s
    D = -2 * A * e.cx - B * e.cy
    E = -B * e.cx - 2 * C * e.cy
    F = A * e.cx ** 2 + B * e.cx * e.cy + C * e.cy ** 2 - a2 * b2
    return Conic(np.array([A, B, C, D, E, F]))


def conic_to_ellipse(q: Conic) -> Ellipse:
    """Center, semi-axes and rotation of an elliptic conic."""
    a, b, c, d, e, f = q.coeffs
    disc = b * b - 4 * a * c
    if not disc < 0:
        raise NotAnEllipseError(f"not an ellipse (b^2 - 4ac = {disc:.3g})")
    m = np.array([[a, b / 2], [b / 2, c]])
    cx, cy = np.linalg.solve(2 * m, [-d, -e])
    f0 = f + (d * cx + e * cy) / 2
    lam, vec = np.linalg.eigh(m)  # ascending; a >= 0 and disc < 0 make both positive
    if lam[0] <= 0 or f0 >= 0:
        raise DegenerateConicError("degenerate conic (point or imaginary ellipse)")
    major = math.sqrt(-f0 / lam[0])
    minor = math.sqrt(-f0 / lam[1])
    theta = math.atan2(vec[1, 0], vec[0, 0]) % math.pi if major > minor else 0.0
    return Ellipse(float(cx), float(cy), major, min(minor, major), theta)


def ellipse_area(e: Ellipse) -> float:
    return math.pi * e.a * e.b


def ellipse_pixels(e: Ellipse) -> tuple[np.ndarray, np.ndarray]:
    """Column and row indices of every pixel whose center lies in the ellipse (unbounded)."""
    x0, y0, x1, y1 = e.bbox()
    i0, i1 = math.floor(x0 - 0.5), math.ceil(x1 - 0.5)
    j0, j1 = math.floor(y0 - 0.5), math.ceil(y1 - 0.5)
    jj, ii = np.mgrid[j0:j1 + 1, i0:i1 + 1]
    inside = e.contains(ii + 0.5, jj + 0.5)
    return ii[inside], jj[inside]


def rasterize_ellipse(e: Ellipse, bounds: tuple[int, int]) -> np.ndarray:
    """Boolean (height, width) mask of the ellipse interior; ``bounds`` is (width, height)."""
    width, height = bounds
    out = np.zeros((height, width), dtype=bool)
    xs, ys = ellipse_pixels(e)
    keep = (xs >= 0) & (xs < width) & (ys >= 0) & (ys < height)
    out[ys[keep], xs[keep]] = True
    return out
