"""Vertical projections of rug images: winding numbers, the four-slab frame,
rasterised projected measure and the big-vertical-projection check.

Points of a vertical plane W_theta = R_theta(W) are written in the coordinates
(s, t) of R_theta(0, s, t); for theta = 0 this is the usual (y, t) of W.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import heis_core as hc
from .flatness import RugMap, fit_horizontal_line
from .heis_core import DomainError, HPoint, ParaPoint
from .para_grid import ParaBall, ParaRect
from .tunables import TUNABLES


class OnBoundaryError(DomainError):
    """The query point lies on the loop, so the winding number is undefined."""


class NotFlatEnoughError(DomainError):
    """The slab separation estimates fail for this rug and rectangle."""


@dataclass(frozen=True)
class PlanarLoop:
    """Closed polygon in the parabolic plane, stored as (n, 2) array of (y, t)."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 4:
            raise DomainError("a loop needs at least four (y, t) vertices")
        if not np.all(np.isfinite(v)):
            raise DomainError("loop vertices must be finite")
        if not np.array_equal(v[0], v[-1]):
            v = np.vstack([v, v[:1]])
        object.__setattr__(self, "vertices", v)

    @classmethod
    def from_points(cls, points) -> "PlanarLoop":
        return cls(np.array([(p.y, p.t) for p in points], dtype=float))


def _point_segment_distance(v, z):
    a = v[:-1]
    d = v[1:] - a
    w = z - a
    len2 = np.einsum("ij,ij->i", d, d)
    s = np.clip(np.einsum("ij,ij->i", w, d) / np.where(len2 > 0, len2, 1.0), 0.0, 1.0)
    closest = a + s[:, None] * d
    return np.hypot(*(closest - z).T)


def winding_number(loop: PlanarLoop, z: ParaPoint) -> int:
    """Signed number of turns of the loop around z (edge-crossing rule)."""
    v = loop.vertices
    zz = np.array([z.y, z.t])
    scale = max(1.0, float(np.abs(v).max()), float(np.abs(zz).max()))
    if _point_segment_distance(v, zz).min() <= 1e-12 * scale:
        raise OnBoundaryError(f"{z} lies on the loop")
    y0, t0 = v[:-1, 0] - z.y, v[:-1, 1] - z.t
    y1, t1 = v[1:, 0] - z.y, v[1:, 1] - z.t
    # orientation of z relative to each edge, treating t as the abscissa-free axis
    cross = y0 * t1 - y1 * t0
    upward = (t0 <= 0) & (t1 > 0) & (cross > 0)
    downward = (t0 > 0) & (t1 <= 0) & (cross < 0)
    return int(upward.sum() - downward.sum())


# -- projections ------------------------------------------------------------

def projected_coords(f: RugMap, y, t, theta: float):
    """(s, t) coordinates in W_theta of Pi_theta(f(y, t)), via the conjugation formula."""
    px, py, pt = hc.vproj_theta_xyt(theta, *f.arrays(y, t))
    s = -math.sin(theta) * px + math.cos(theta) * py
    return s, pt


def _box_boundary(y0, y1, t0, t1, samples: int):
    """Clockwise boundary of [y0, y1] x [t0, t1] starting at (y0, t0), as in h0 v1 h1 v0."""
    if samples < 64:
        raise DomainError("boundary_samples must be at least 64")
    width, height = y1 - y0, math.sqrt(t1 - t0)
    per = max(4, samples // 4)
    # spend samples proportionally to parabolic edge length
    n_h = max(per, int(samples * width / (2 * width + 2 * height)))
    n_v = max(per // 2, int(samples * height / (2 * width + 2 * height)))
    s_h = np.linspace(0.0, 1.0, n_h, endpoint=False)
    s_v = np.linspace(0.0, 1.0, n_v, endpoint=False)
    ys = np.concatenate([y0 + width * s_h, np.full(n_v, y1), y1 - width * s_h, np.full(n_v, y0)])
    ts = np.concatenate([np.full(n_h, t0), t0 + (t1 - t0) * s_v, np.full(n_h, t1), t1 - (t1 - t0) * s_v])
    return np.append(ys, y0), np.append(ts, t0)


def _region_bounds(region):
    if isinstance(region, (ParaBall, ParaRect)):
        return region.bounds()
    y0, y1, t0, t1 = region
    if not (y1 > y0 and t1 > t0):
        raise DomainError("empty box")
    return float(y0), float(y1), float(t0), float(t1)


def enclosed_by_image(f: RugMap, box, theta: float, z: ParaPoint, boundary_samples: int = 256) -> bool:
    """Certify z in Pi_theta(f(box)) by a nonzero winding number of the projected boundary."""
    y0, y1, t0, t1 = _region_bounds(box)
    ys, ts = _box_boundary(y0, y1, t0, t1, boundary_samples)
    s, t = projected_coords(f, ys, ts, theta)
    return winding_number(PlanarLoop(np.column_stack([s, t])), z) != 0


@dataclass(frozen=True)
class ProjectionRaster:
    """Covered cells of the projected image on a res x res grid of its bounding box."""

    mask: np.ndarray
    s_range: tuple[float, float]
    t_range: tuple[float, float]
    samples: int

    @property
    def cell_area(self) -> float:
        res = self.mask.shape[0]
        return (self.s_range[1] - self.s_range[0]) * (self.t_range[1] - self.t_range[0]) / (res * res)

    @property
    def measure(self) -> float:
        return float(self.mask.sum()) * self.cell_area

    def covers(self, z: ParaPoint) -> bool:
        res = self.mask.shape[0]
        i = int((z.y - self.s_range[0]) / (self.s_range[1] - self.s_range[0]) * res)
        j = int((z.t - self.t_range[0]) / (self.t_range[1] - self.t_range[0]) * res)
        if not (0 <= i < res and 0 <= j < res):
            return False
        return bool(self.mask[i, j])


def _raster(s, t, res: int, bbox):
    s0, s1, t0, t1 = bbox
    i = np.clip(((s - s0) / (s1 - s0) * res).astype(int), 0, res - 1)
    j = np.clip(((t - t0) / (t1 - t0) * res).astype(int), 0, res - 1)
    mask = np.zeros((res, res), dtype=bool)
    mask[i.ravel(), j.ravel()] = True
    return mask


def projection_raster(f: RugMap, region, theta: float, resolution: int = 128,
                      tolerance: float = 0.02, max_samples: int = 4096) -> ProjectionRaster:
    """Rasterise Pi_theta(f(region)), doubling the domain sampling until the covered
    measure changes by less than ``tolerance``."""
    if not 64 <= resolution <= 4096:
        raise DomainError("resolution must lie in [64, 4096]")
    y0, y1, t0, t1 = _region_bounds(region)
    n = 2 * resolution
    # bounding box from a fine boundary plus interior sample; fixed across refinements
    yy, tt = np.meshgrid(np.linspace(y0, y1, n), np.linspace(t0, t1, n), indexing="ij")
    s, t = projected_coords(f, yy, tt, theta)
    pad_s = 1e-12 * max(1.0, float(np.abs(s).max()))
    pad_t = 1e-12 * max(1.0, float(np.abs(t).max()))
    bbox = (float(s.min()) - pad_s, float(s.max()) + pad_s, float(t.min()) - pad_t, float(t.max()) + pad_t)
    mask = _raster(s, t, resolution, bbox)
    prev = float(mask.sum())
    while 2 * n <= max_samples:
        n *= 2
        yy, tt = np.meshgrid(np.linspace(y0, y1, n), np.linspace(t0, t1, n), indexing="ij")
        s, t = projected_coords(f, yy, tt, theta)
        s0, s1, q0, q1 = bbox
        keep = (s >= s0) & (s <= s1) & (t >= q0) & (t <= q1)
        mask = mask | _raster(s[keep], t[keep], resolution, bbox)
        cur = float(mask.sum())
        if cur - prev <= tolerance * cur:
            break
        prev = cur
    return ProjectionRaster(mask, (bbox[0], bbox[1]), (bbox[2], bbox[3]), n)


def projected_measure(f: RugMap, region, theta: float = 0.0, resolution: int = 128) -> float:
    """Lebesgue area of the rasterised image, the 3-dimensional measure of W normalised
    so that a parabolic box of side s has measure s^3."""
    return projection_raster(f, region, theta, resolution).measure


def default_bvp_delta(M: float) -> float:
    return TUNABLES.bvp_delta_base / M ** 3


@dataclass(frozen=True)
class BVPResult:
    theta: float
    measure: float
    passed: bool
    measures: tuple[float, ...]


def bvp_check(f: RugMap, Q: ParaRect, theta_grid: int = 16, delta: float | None = None,
              resolution: int = 128) -> BVPResult:
    """Largest projected measure of f(Q) over theta in a grid of [-pi/2, pi/2)."""
    if theta_grid < 8:
        raise DomainError("theta_grid must be at least 8")
    delta = default_bvp_delta(f.M) if delta is None else delta
    thetas = -math.pi / 2 + math.pi * np.arange(theta_grid) / theta_grid
    values = tuple(projected_measure(f, Q, float(th), resolution) for th in thetas)
    best = int(np.argmax(values))
    return BVPResult(float(thetas[best]), values[best], values[best] >= delta * Q.side ** 3, values)


# -- four-slab frame ----------------------------------------------------------

@dataclass(frozen=True)
class SlabFrame:
    """Slabs around the projected boundary of Qhat = [0, H] x [0, 1] in normalised coordinates.

    Horizontal slabs are {|t - centre| <= half}; vertical ones {|y - centre| <= half}.
    The normalisation is f~(w) = delta_{1/l} R_{-theta}(f(w0)^-1 f(w0 + (l y, l^2 t))).
    """

    s1: tuple[float, float]
    s3: tuple[float, float]
    s2: tuple[float, float]
    s4: tuple[float, float]
    rect: tuple[float, float, float, float]
    H: float
    M: float
    theta: float
    base: ParaPoint
    scale: float
    base_image: HPoint

    @property
    def area(self) -> float:
        y0, y1, t0, t1 = self.rect
        return (y1 - y0) * (t1 - t0)

    @property
    def horizontal_separation(self) -> float:
        """Parabolic distance between S1 and S3."""
        return math.sqrt(self.rect[3] - self.rect[2])

    @property
    def vertical_separation(self) -> float:
        return self.rect[1] - self.rect[0]

    def normalised_map(self, f: RugMap) -> RugMap:
        return _normalised_rug(f, self.base, self.scale, self.theta, self.base_image)

    def to_plane(self, z: ParaPoint) -> ParaPoint:
        """Map a normalised point of W to W_theta coordinates of the original picture."""
        h = hc.rotate(-self.theta, self.base_image)
        q = hc.group_mul(h, HPoint(0.0, self.scale * z.y, self.scale ** 2 * z.t))
        y, t = hc.vproj_xyt(q.x, q.y, q.t)
        return ParaPoint(float(y), float(t))

    def grid(self, count: int) -> list[ParaPoint]:
        """count x count interior points of R."""
        y0, y1, t0, t1 = self.rect
        ys = y0 + (y1 - y0) * (np.arange(count) + 0.5) / count
        ts = t0 + (t1 - t0) * (np.arange(count) + 0.5) / count
        return [ParaPoint(float(a), float(b)) for a in ys for b in ts]


def _normalised_rug(f: RugMap, base: ParaPoint, scale: float, theta: float, base_image: HPoint) -> RugMap:
    gx, gy, gt = hc.inv_xyt(*base_image.as_tuple())

    def evaluate(y, t):
        p = f.evaluate_arrays(base.y + scale * y, base.t + scale * scale * t)
        x, yy, tt = hc.rotate_xyt(-theta, *hc.mul_xyt(gx, gy, gt, *p))
        return x / scale, yy / scale, tt / (scale * scale)

    return RugMap(evaluate, f.M, f"normalised({f.name})")


def slab_frame(f: RugMap, Q: ParaRect, theta: float = 0.0, H: float | None = None,
               samples: int = 257) -> SlabFrame:
    """Build S1..S4 and the inner rectangle R for Qhat = lower-left corner of Q times [0, H] x [0, 1]."""
    M = f.M
    H = 20.0 * M * M if H is None else float(H)
    y0, _, t0, _ = Q.bounds()
    base = ParaPoint(y0, t0)
    scale = Q.side
    base_image = f(base)
    g = _normalised_rug(f, base, scale, theta, base_image)

    ys = np.linspace(0.0, H, samples)
    slabs = []
    for level in (0.0, 1.0):
        x, y, t = g.arrays(ys, np.full_like(ys, level))
        fit = fit_horizontal_line([HPoint(float(a), float(b), float(c)) for a, b, c in zip(x, y, t)])
        L = fit.line
        if isinstance(L, hc.XParallelLine):
            raise NotFlatEnoughError("edge image is parallel to the xt-plane")
        _, pt = hc.vproj_xyt(x, y, t)
        half = float(np.abs(pt - L.c).max()) + (TUNABLES.snap_constant * fit.sup_err) ** 2
        slabs.append((float(L.c), half))
    s1, s3 = slabs
    v_H = float(g.arrays(np.array(H), np.array(0.0))[1])
    v_0 = float(g.arrays(np.array(0.0), np.array(0.0))[1])
    s2, s4 = (v_H, M), (v_0, M)

    lo_t, hi_t = sorted([s1, s3])
    lo_y, hi_y = sorted([s2, s4])
    rect = (lo_y[0] + lo_y[1], hi_y[0] - hi_y[1], lo_t[0] + lo_t[1], hi_t[0] - hi_t[1])
    if rect[3] - rect[2] <= 0 or math.sqrt(rect[3] - rect[2]) < 1.0 / (4.0 * M):
        raise NotFlatEnoughError("horizontal slabs are not separated by 1/(4M)")
    if rect[1] - rect[0] < H / (4.0 * M):
        raise NotFlatEnoughError("vertical slabs are not separated by H/(4M)")
    return SlabFrame(s1, s3, s2, s4, rect, H, M, theta, base, scale, base_image)


def frame_winding(frame: SlabFrame, f: RugMap, z: ParaPoint, boundary_samples: int = 1024) -> int:
    """Winding number of Pi(f~(boundary of Qhat)) around a normalised point z."""
    g = frame.normalised_map(f)
    ys, ts = _box_boundary(0.0, frame.H, 0.0, 1.0, boundary_samples)
    x, y, t = g.arrays(ys, ts)
    py, pt = hc.vproj_xyt(x, y, t)
    return winding_number(PlanarLoop(np.column_stack([py, pt])), z)
