"""Independent brute-force oracles shared by the tests and scripts/calibrate.py.

None of these call into the routines they check: distances come from dense
nested grids, grid combinatorics from Fraction arithmetic, quadric extrema from
the vertex formula.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np


def hdist_np(x1, y1, t1, x2, y2, t2):
    """d(p, q) = ||q^-1 p|| written out from the group law."""
    dx, dy = x1 - x2, y1 - y2
    dt = t1 - t2 - 0.5 * (x2 * y1 - x1 * y2)
    return np.maximum(np.sqrt(dx * dx + dy * dy), np.sqrt(np.abs(dt)))


def line_distance(a, b, c, x, y, t, grid=2001, rounds=3):
    """min over y' of d(p, (a y' + b, y', b y'/2 + c)) by three nested dense grids.

    The minimiser satisfies |y' - y| <= d(p, i_L p), which fixes the first bracket.
    """
    a, b, c, x, y, t = (np.atleast_1d(np.asarray(v, float)) for v in np.broadcast_arrays(a, b, c, x, y, t))
    s = hdist_np(x, y, t, a * y + b, y, 0.5 * b * y + c)
    lo, hi = y - s, y + s
    best = s.copy()
    u = np.linspace(0.0, 1.0, grid)
    for _ in range(rounds):
        Y = lo[:, None] + (hi - lo)[:, None] * u[None, :]
        d = hdist_np(x[:, None], y[:, None], t[:, None], a[:, None] * Y + b[:, None], Y,
                     0.5 * b[:, None] * Y + c[:, None])
        j = np.argmin(d, axis=1)
        rows = np.arange(d.shape[0])
        best = np.minimum(best, d[rows, j])
        step = (hi - lo) / (grid - 1)
        centre = Y[rows, j]
        lo, hi = centre - step, centre + step
    return best


def quadric_extrema(a, b, c, lo, hi):
    """max |q| and max |q'| over [lo, hi] for q = a y^2/2 + b y + c (exact: ends and vertex)."""
    def q(y):
        return 0.5 * a * y * y + b * y + c

    cand = [np.abs(q(lo)), np.abs(q(hi))]
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(a != 0, -b / np.where(a != 0, a, 1.0), lo)
    inside = (v > lo) & (v < hi)
    cand.append(np.where(inside, np.abs(q(v)), 0.0))
    qmax = np.maximum.reduce(cand)
    dmax = np.maximum(np.abs(a * lo + b), np.abs(a * hi + b))
    return qmax, dmax


def rect_corners(n, k, l):
    """Exact corners of the dyadic rectangle (n, k, l)."""
    h, v = Fraction(1, 2**n) if n >= 0 else Fraction(2**-n), Fraction(1, 4**n) if n >= 0 else Fraction(4**-n)
    return {(k * h, l * v), ((k + 1) * h, l * v), (k * h, (l + 1) * v), ((k + 1) * h, (l + 1) * v)}


def containing_rect(n, y: Fraction, t: Fraction):
    """(k, l) of the generation-n rectangle containing the point (y, t)."""
    h = Fraction(1, 2**n) if n >= 0 else Fraction(2**-n)
    v = h * h
    return (y / h).__floor__(), (t / v).__floor__()


def overlap_count(intervals, ys):
    """Number of closed intervals containing each sample point."""
    ys = np.asarray(ys, float)
    out = np.zeros(ys.shape, int)
    for a, b in intervals:
        out += (ys >= a) & (ys <= b)
    return out


def central_difference(fn, y, h):
    return (fn(y + h) - fn(y - h)) / (2 * h)


def _snap_objective(A, B, x, y, t):
    """max over points of the snap distance to (A, B, c*) with the best c, for grids A, B."""
    pt = t + 0.5 * x * y
    r = pt[None, :] - 0.5 * A[:, None] * y * y - B[:, None] * y
    hi, lo = r.max(1), r.min(1)
    horiz = np.abs(x[None, :] - A[:, None] * y - B[:, None]).max(1)
    return np.maximum(horiz, np.sqrt(0.5 * (hi - lo))), 0.5 * (hi + lo)


def minimax_line_fit(points, box=2.0, step=1e-2, fine=1e-3, keep=8):
    """Brute-force minimax horizontal line over (a, b) in [-box, box]^2.

    c is exact for the snap objective (mid-range of the vertical residuals); the
    best grid candidates are refined on a finer local grid and scored with the
    true sup distance from ``line_distance``.  Returns (sup distance, (a, b, c)).
    """
    pts = np.asarray(points, float)
    x, y, t = pts[:, 0], pts[:, 1], pts[:, 2]
    g = np.arange(-box, box + step / 2, step)
    A, B = (v.ravel() for v in np.meshgrid(g, g, indexing="ij"))
    vals = np.concatenate([_snap_objective(A[i:i + 20000], B[i:i + 20000], x, y, t)[0]
                           for i in range(0, A.size, 20000)])
    best = (np.inf, None)
    local = np.arange(-2 * step, 2 * step + fine / 2, fine)
    for j in np.argsort(vals)[:keep]:
        LA, LB = (v.ravel() for v in np.meshgrid(A[j] + local, B[j] + local, indexing="ij"))
        lv, lc = _snap_objective(LA, LB, x, y, t)
        i = int(np.argmin(lv))
        a, b, c = LA[i], LB[i], lc[i]
        d = float(line_distance(a, b, c, x, y, t).max())
        if d < best[0]:
            best = (d, (float(a), float(b), float(c)))
    return best
