"""Arithmetic and geometry of the first Heisenberg group.

Points are written (x, y, t) with the group law

    (x1, y1, t1) . (x2, y2, t2) = (x1 + x2, y1 + y2, t1 + t2 + (x1 y2 - x2 y1) / 2)

and the homogeneous norm ||(x, y, t)|| = max(sqrt(x^2 + y^2), sqrt(|t|)).
The metric is d(p, q) = ||q^-1 . p||.

Every scalar operation has an array twin (suffix ``_xyt``) that works on
broadcastable numpy arrays; the scalar versions are thin wrappers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when an operation is called outside its domain."""


@dataclass(frozen=True)
class HPoint:
    x: float
    y: float
    t: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.t)):
            raise DomainError(f"non-finite point {self!r}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.t)


@dataclass(frozen=True)
class ParaPoint:
    y: float
    t: float


@dataclass(frozen=True)
class HorizontalLine:
    """The horizontal line {(a y + b, y, b y / 2 + c) : y real}."""

    a: float
    b: float
    c: float

    @property
    def slope(self) -> float:
        return abs(self.a)


@dataclass(frozen=True)
class XParallelLine:
    """Horizontal line parallel to the xt-plane: {(s, y0, t0 - y0 s / 2)}.

    Its slope is infinite, so it has no (a, b, c) form.
    """

    y0: float
    t0: float

    @property
    def slope(self) -> float:
        return math.inf


@dataclass(frozen=True)
class VerticalPlane:
    """The vertical plane {(a y + b, y, t)}."""

    a: float
    b: float

    @property
    def slope(self) -> float:
        return abs(self.a)

    @property
    def direction_angle(self) -> float:
        """Angle psi with V parallel to W_psi, i.e. R_psi(W) is parallel to V."""
        return -math.atan(self.a)


ORIGIN = HPoint(0.0, 0.0, 0.0)


# -- array primitives -------------------------------------------------------

def mul_xyt(x1, y1, t1, x2, y2, t2):
    return x1 + x2, y1 + y2, t1 + t2 + 0.5 * (x1 * y2 - x2 * y1)


def inv_xyt(x, y, t):
    return -x, -y, -t


def norm_xyt(x, y, t):
    return np.maximum(np.hypot(x, y), np.sqrt(np.abs(t)))


def dist_xyt(x1, y1, t1, x2, y2, t2):
    """d(p, q) = ||q^-1 p|| for p = (x1, y1, t1), q = (x2, y2, t2)."""
    dx = x1 - x2
    dy = y1 - y2
    dt = (t1 - t2) + 0.5 * (x1 * y2 - x2 * y1)
    return np.maximum(np.hypot(dx, dy), np.sqrt(np.abs(dt)))


def rotate_xyt(theta, x, y, t):
    c, s = math.cos(theta), math.sin(theta)
    return c * x - s * y, s * x + c * y, t


def vproj_xyt(x, y, t):
    """Projection to W along the x-direction, in (y, t) coordinates."""
    return y, t + 0.5 * x * y


def vproj_theta_xyt(theta, x, y, t):
    """R_theta . Pi . R_theta^-1 applied to arrays, returned as (x, y, t)."""
    xr, yr, tr = rotate_xyt(-theta, x, y, t)
    py, pt = vproj_xyt(xr, yr, tr)
    return rotate_xyt(theta, np.zeros_like(py), py, pt)


def line_points_xyt(a, b, c, y):
    return a * y + b, y, 0.5 * b * y + c


def snap_xyt(a, b, c, x, y, t):
    """i_L(p): the point of L at the same height y as p."""
    return line_points_xyt(a, b, c, y)


def snap_dist_xyt(a, b, c, x, y, t):
    """d(p, i_L(p)) = max(|x - a y - b|, sqrt|t + xy/2 - q(y)|) with q = a y^2/2 + b y + c."""
    X, Y, T = line_points_xyt(a, b, c, y)
    return dist_xyt(x, y, t, X, Y, T)


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_SCAN_SAMPLES = 257
_GOLDEN_STEPS = 64
_CHUNK = 4096


def _line_dist_at(a, b, c, x, y, t, ys):
    X, Y, T = line_points_xyt(a, b, c, ys)
    return dist_xyt(x, y, t, X, Y, T)


def dist_to_line_xyt(a, b, c, x, y, t):
    """Vectorised distance from points to horizontal lines.

    The closest point on L lies within |y' - y| <= d(p, i_L p), so a scan of
    the bracket y +- 4 (s + 1) followed by golden-section refinement around
    the best sample finds it.
    """
    a, b, c, x, y, t = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (a, b, c, x, y, t)))
    shape = x.shape
    a, b, c, x, y, t = (v.ravel() for v in (a, b, c, x, y, t))
    out = np.empty(x.size)
    grid = np.linspace(-1.0, 1.0, _SCAN_SAMPLES)
    for lo in range(0, x.size, _CHUNK):
        sl = slice(lo, lo + _CHUNK)
        aa, bb, cc, xx, yy, tt = (v[sl][:, None] for v in (a, b, c, x, y, t))
        s0 = snap_dist_xyt(aa, bb, cc, xx, yy, tt)
        half = 4.0 * (s0 + 1.0)
        ys = yy + half * grid[None, :]
        vals = _line_dist_at(aa, bb, cc, xx, yy, tt, ys)
        j = np.argmin(vals, axis=1)
        rows = np.arange(vals.shape[0])
        best = np.minimum(vals[rows, j], s0[:, 0])
        step = (2.0 * half[:, 0]) / (_SCAN_SAMPLES - 1)
        left = ys[rows, j] - step
        right = ys[rows, j] + step
        args = (aa[:, 0], bb[:, 0], cc[:, 0], xx[:, 0], yy[:, 0], tt[:, 0])
        m1 = right - _GOLDEN * (right - left)
        m2 = left + _GOLDEN * (right - left)
        f1 = _line_dist_at(*args, m1)
        f2 = _line_dist_at(*args, m2)
        for _ in range(_GOLDEN_STEPS):
            go_left = f1 < f2
            right = np.where(go_left, m2, right)
            left = np.where(go_left, left, m1)
            cand_m1 = right - _GOLDEN * (right - left)
            cand_m2 = left + _GOLDEN * (right - left)
            new_m1 = np.where(go_left, cand_m1, m2)
            new_m2 = np.where(go_left, m1, cand_m2)
            probe = np.where(go_left, cand_m1, cand_m2)
            fp = _line_dist_at(*args, probe)
            f1, f2 = np.where(go_left, fp, f2), np.where(go_left, f1, fp)
            m1, m2 = new_m1, new_m2
        best = np.minimum(best, np.minimum(f1, f2))
        out[sl] = best
    return out.reshape(shape)


# -- scalar API -------------------------------------------------------------

def group_mul(p: HPoint, q: HPoint) -> HPoint:
    return HPoint(*(float(v) for v in mul_xyt(*p.as_tuple(), *q.as_tuple())))


def group_inv(p: HPoint) -> HPoint:
    return HPoint(-p.x, -p.y, -p.t)


def hnorm(p: HPoint) -> float:
    return float(norm_xyt(p.x, p.y, p.t))


def hdist(p: HPoint, q: HPoint) -> float:
    return float(dist_xyt(*p.as_tuple(), *q.as_tuple()))


def dilate(r: float, p: HPoint) -> HPoint:
    if not r > 0:
        raise DomainError(f"dilation factor must be positive, got {r}")
    return HPoint(r * p.x, r * p.y, r * r * p.t)


def rotate(theta: float, p: HPoint) -> HPoint:
    return HPoint(*(float(v) for v in rotate_xyt(theta, *p.as_tuple())))


def vproj(p: HPoint) -> ParaPoint:
    y, t = vproj_xyt(p.x, p.y, p.t)
    return ParaPoint(float(y), float(t))


def vproj_theta(theta: float, p: HPoint) -> HPoint:
    return HPoint(*(float(v) for v in vproj_theta_xyt(theta, *p.as_tuple())))


def hproj(p: HPoint) -> float:
    return p.x


def dpar(w1: ParaPoint, w2: ParaPoint) -> float:
    return max(abs(w1.y - w2.y), math.sqrt(abs(w1.t - w2.t)))


def dpar_arr(y1, t1, y2, t2):
    return np.maximum(np.abs(y1 - y2), np.sqrt(np.abs(t1 - t2)))


def _finite_line(L) -> HorizontalLine:
    if isinstance(L, XParallelLine):
        raise DomainError("operation requires a line of finite slope")
    return L


def line_point(L: HorizontalLine, y: float) -> HPoint:
    L = _finite_line(L)
    return HPoint(*(float(v) for v in line_points_xyt(L.a, L.b, L.c, y)))


def line_snap(L: HorizontalLine, p: HPoint) -> HPoint:
    L = _finite_line(L)
    return HPoint(*(float(v) for v in snap_xyt(L.a, L.b, L.c, p.x, p.y, p.t)))


def dist_to_line(p: HPoint, L) -> float:
    if isinstance(L, XParallelLine):
        # L = (0, y0, t0) . (s, 0, 0); the same scan in the rotated frame
        Lr = rotate_line(-math.pi / 2, L)
        pr = rotate(-math.pi / 2, p)
        return dist_to_line(pr, Lr)
    return float(dist_to_line_xyt(L.a, L.b, L.c, p.x, p.y, p.t))


def plane_of_line(L: HorizontalLine) -> VerticalPlane:
    L = _finite_line(L)
    return VerticalPlane(L.a, L.b)


def rotate_line(theta: float, L):
    """Image of a horizontal line under R_theta."""
    cs, sn = math.cos(theta), math.sin(theta)
    if isinstance(L, XParallelLine):
        # direction (1, 0) through (0, y0, t0)
        dx, dy = cs, sn
        px, py = -sn * L.y0, cs * L.y0
        t_base = L.t0
    else:
        dx, dy = L.a * cs - sn, L.a * sn + cs
        px, py = cs * L.b, sn * L.b
        t_base = L.c
    if abs(dy) < 1e-15:
        # x-parallel image: base point shifted to x = 0 along the line
        s = -px / dx
        y0 = py + s * dy
        t0 = t_base + 0.5 * (px * (s * dy) - (s * dx) * py)
        return XParallelLine(y0, t0)
    a_new = dx / dy
    s = -py / dy
    b_new = px + s * dx
    # moving along a horizontal line from (px, py, t_base) by (s dx, s dy)
    t_new = t_base + 0.5 * (px * (s * dy) - (s * dx) * py)
    return HorizontalLine(a_new, b_new, t_new)


def rotate_plane(theta: float, V: VerticalPlane):
    """Image of a vertical plane under R_theta; None when it becomes x-parallel."""
    cs, sn = math.cos(theta), math.sin(theta)
    dx, dy = V.a * cs - sn, V.a * sn + cs
    px, py = cs * V.b, sn * V.b
    if abs(dy) < 1e-15:
        return None
    return VerticalPlane(dx / dy, px - py / dy * dx)


def dilate_plane(r: float, V: VerticalPlane) -> VerticalPlane:
    if not r > 0:
        raise DomainError(f"dilation factor must be positive, got {r}")
    return VerticalPlane(V.a, r * V.b)


def plane_angle_to(V: VerticalPlane, theta: float) -> float:
    """Slope of V relative to W_theta, i.e. slope of R_theta^-1 V."""
    diff = V.direction_angle - theta
    diff = (diff + math.pi / 2) % math.pi - math.pi / 2
    if abs(abs(diff) - math.pi / 2) < 1e-15:
        return math.inf
    return abs(math.tan(diff))
