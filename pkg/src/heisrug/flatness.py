"""Flatness coefficients of rug maps: horizontal-line fits, ruler coefficients,
horizontal and strong vertical beta numbers, and Carleson sums.

Fits minimise the snap surrogate max_i d(p_i, i_L(p_i)).  For fixed (a, b) the
best constant c is explicit: with r_i = (t_i + x_i y_i / 2) - a y_i^2 / 2 - b y_i
the surrogate is max(max|x_i - a y_i - b|, sqrt(halfrange(r))) at c = midrange(r).
Both terms have convex sublevel sets in (a, b), so a simplex search over (a, b)
finds the global minimum.  The reported sup_err is the true distance of the
points to the chosen line, which never exceeds the surrogate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from . import heis_core as hc
from .heis_core import DomainError, HorizontalLine, HPoint, ParaPoint, VerticalPlane, XParallelLine
from .para_grid import ParaBall, ParaRect, children, lambda_ball
from .tunables import TUNABLES


@dataclass(frozen=True)
class RugMap:
    """A parametrised surface f: W -> H, vectorised over (y, t) arrays."""

    evaluate_arrays: Callable
    M: float
    name: str

    def __call__(self, w: ParaPoint) -> HPoint:
        x, y, t = self.evaluate_arrays(np.asarray(w.y, float), np.asarray(w.t, float))
        return HPoint(float(x), float(y), float(t))

    def arrays(self, y, t):
        y = np.asarray(y, dtype=float)
        t = np.asarray(t, dtype=float)
        y, t = np.broadcast_arrays(y, t)
        return self.evaluate_arrays(y, t)


@dataclass(frozen=True)
class LineFit:
    line: object  # HorizontalLine or XParallelLine
    sup_err: float
    surrogate_err: float


@dataclass(frozen=True)
class PlaneFit:
    """Best vertical plane for a ball, stored in a rotated frame.

    ``plane`` and the per-line fits are expressed in coordinates of R_{-frame} f;
    the plane in original coordinates is R_frame(plane).
    """

    frame: float
    plane: VerticalPlane
    beta: float
    per_line_fits: dict = field(default_factory=dict)
    ball: ParaBall | None = None

    @property
    def angle(self) -> float:
        """psi such that the fitted plane is parallel to W_psi."""
        return self.frame + self.plane.direction_angle

    def plane_original(self):
        return hc.rotate_plane(self.frame, self.plane)


# -- sampling ---------------------------------------------------------------

def ball_grid(ball: ParaBall, lines: int, samples: int):
    """(t_values, y_values) of the equispaced sample grid in a ball."""
    y0, y1, t0, t1 = ball.bounds()
    return np.linspace(t0, t1, lines), np.linspace(y0, y1, samples)


def _frame_angle(x, y) -> float:
    """Direction (measured from the y-axis) of the principal axis of the (x, y) shadow."""
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy, sxy = float(xc @ xc), float(yc @ yc), float(xc @ yc)
    if sxx + syy == 0.0:
        return 0.0
    phi = 0.5 * math.atan2(2.0 * sxy, syy - sxx)
    # the principal axis makes angle phi with the y-axis towards -x after R_phi
    return -phi


def _surrogate_ab(a, b, x, y, pt):
    """Surrogate error and best c for one line, vectorised over leading axes of a, b."""
    r = pt - 0.5 * a[..., None] * y * y - b[..., None] * y
    hi, lo = r.max(axis=-1), r.min(axis=-1)
    plane_err = np.abs(x - a[..., None] * y - b[..., None]).max(axis=-1)
    return np.maximum(plane_err, np.sqrt(0.5 * (hi - lo))), 0.5 * (hi + lo)


def _normalise(x, y, t):
    """Left translate by the centroid and dilate to unit scale."""
    g = (float(x.mean()), float(y.mean()), float(t.mean()))
    xs, ys, ts = hc.mul_xyt(*hc.inv_xyt(*g), x, y, t)
    scale = float(hc.norm_xyt(xs, ys, ts).max())
    if scale == 0.0:
        scale = 1.0
    return g, scale, xs / scale, ys / scale, ts / scale**2


def translate_line(g, L):
    """Left translate a horizontal line by g = (gx, gy, gt)."""
    if isinstance(L, XParallelLine):
        px, py, pt = hc.mul_xyt(*g, 0.0, L.y0, L.t0)
        # shift base point back to x = 0 along the x-direction
        return XParallelLine(py, pt + 0.5 * px * py)
    px, py, pt = hc.mul_xyt(*g, *hc.line_points_xyt(L.a, L.b, L.c, 0.0))
    b = px - L.a * py
    return HorizontalLine(L.a, b, pt - 0.5 * b * py)


def dilate_line(r, L):
    if isinstance(L, XParallelLine):
        return XParallelLine(r * L.y0, r * r * L.t0)
    return HorizontalLine(L.a, r * L.b, r * r * L.c)


def fit_horizontal_line(points) -> LineFit:
    """Minimax horizontal line through a point cloud.

    Least-squares seed, then Nelder-Mead on (a, b) with the explicit c, restarted
    from the incumbent.  Work happens in a normalised, principal-axis frame so
    steep and x-parallel lines are handled uniformly.
    """
    pts = np.array([p.as_tuple() if isinstance(p, HPoint) else p for p in points], dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise DomainError("at least two points are needed for a line fit")
    x, y, t = pts[:, 0], pts[:, 1], pts[:, 2]
    g, scale, xn, yn, tn = _normalise(x, y, t)
    phi = _frame_angle(xn, yn)
    xr, yr, tr = hc.rotate_xyt(-phi, xn, yn, tn)
    pt = tr + 0.5 * xr * yr

    def objective(v):
        e, _ = _surrogate_ab(np.asarray(v[0]), np.asarray(v[1]), xr, yr, pt)
        return float(e)

    A = np.column_stack([yr, np.ones_like(yr)])
    seed = np.linalg.lstsq(A, xr, rcond=None)[0]
    best = np.array(seed, dtype=float)
    best_val = objective(best)
    tun = TUNABLES
    for restart in range(tun.nm_restarts):
        step = tun.nm_initial_step / (4.0**restart)
        simplex = np.array([best, best + [step, 0.0], best + [0.0, step]])
        res = minimize(objective, best, method="Nelder-Mead",
                       options={"maxiter": tun.nm_iterations, "initial_simplex": simplex,
                                "xatol": 1e-13, "fatol": 1e-15})
        if res.fun < best_val:
            best, best_val = np.asarray(res.x, float), float(res.fun)
    a, b = float(best[0]), float(best[1])
    _, c = _surrogate_ab(np.asarray(a), np.asarray(b), xr, yr, pt)
    frame_line = HorizontalLine(a, b, float(c))
    dist = hc.dist_to_line_xyt(a, b, float(c), xr, yr, tr)
    sup_err = float(dist.max()) * scale
    surrogate = best_val * scale
    line = hc.rotate_line(phi, frame_line)
    line = translate_line(g, dilate_line(scale, line))
    fit = LineFit(line, min(sup_err, surrogate), surrogate)
    return _interpolation_candidate(x, y, t, fit)


def _interpolation_candidate(x, y, t, fit: LineFit) -> LineFit:
    """The line through the two y-extreme points, scored in original coordinates.

    The normalised search leaves an ulp-level error in (a, b), which the square
    root in the metric inflates to ~1e-8; exact data is matched exactly here.
    """
    i, j = int(np.argmin(y)), int(np.argmax(y))
    if y[j] - y[i] <= 0.0:
        return fit
    a = (x[j] - x[i]) / (y[j] - y[i])
    b = x[i] - a * y[i]
    c = t[i] - 0.5 * b * y[i]
    sup_err = float(hc.dist_to_line_xyt(a, b, c, x, y, t).max())
    if not sup_err < fit.sup_err:
        return fit
    surrogate = float(hc.snap_dist_xyt(a, b, c, x, y, t).max())
    return LineFit(HorizontalLine(float(a), float(b), float(c)), min(sup_err, surrogate), surrogate)


def horizontal_beta(curve, interval_length: float) -> float:
    if interval_length <= 0:
        raise DomainError("interval length must be positive")
    return fit_horizontal_line(curve).sup_err / interval_length


def _line_points(f: RugMap, t: float, ys):
    x, y, tt = f.arrays(ys, np.full_like(ys, t))
    return np.column_stack([x, y, tt])


def ruler_coeff(f: RugMap, ball: ParaBall, lines: int = 5, samples: int = 9) -> float:
    if lines < 3 or samples < 8:
        raise DomainError("ruler coefficient needs lines >= 3 and samples >= 8")
    ts, ys = ball_grid(ball, lines, samples)
    worst = 0.0
    for t in ts:
        fit = fit_horizontal_line(_line_points(f, t, ys))
        worst = max(worst, fit.sup_err)
    return worst / ball.radius


def alpha_coeff(f: RugMap, Q: ParaRect, C: float = 1.0, t_samples: int = 8, samples: int = 9) -> float:
    """L^4 mean over lines of CQ of the per-line horizontal beta over pi_1(CQ)."""
    if t_samples < 4:
        raise DomainError("alpha coefficient needs at least 4 lines")
    ball = lambda_ball(Q, C)
    ts, ys = ball_grid(ball, t_samples, samples)
    betas = np.array([horizontal_beta(_line_points(f, t, ys), 2.0 * ball.radius) for t in ts])
    return float(np.mean(betas**4) ** 0.25)


# -- plane fitting ----------------------------------------------------------

def _plane_objective(a, b, x, y, pt):
    """Surrogate strong beta for plane (a, b); data arrays shaped (..., lines, samples)."""
    aa = a[..., None, None]
    bb = b[..., None, None]
    plane_err = np.abs(x - aa * y - bb).max(axis=(-1, -2))
    r = pt - 0.5 * aa * y * y - bb * y
    hi, lo = r.max(axis=-1), r.min(axis=-1)
    line_err = np.sqrt(0.5 * (hi - lo)).max(axis=-1)
    return np.maximum(plane_err, line_err), 0.5 * (hi + lo)


def _joint_seed(x, y, pt, weight_t):
    """Batched least squares for x ~ a y + b and pt ~ a y^2/2 + b y + c_j.

    The per-line constants c_j are eliminated by centring each line, which
    leaves a 2 x 2 normal system in (a, b).
    """
    w2 = weight_t * weight_t
    B = x.shape[0]
    y_f, x_f = y.reshape(B, -1), x.reshape(B, -1)
    n = y_f.shape[1]
    q = 0.5 * y * y
    qc = q - q.mean(axis=-1, keepdims=True)
    yc = y - y.mean(axis=-1, keepdims=True)
    pc = pt - pt.mean(axis=-1, keepdims=True)
    axes = (-1, -2)
    # columns: (y, 1) for the x rows and (qc, yc) for the centred t rows
    m_aa = (y_f * y_f).sum(1) + w2 * (qc * qc).sum(axes)
    m_ab = y_f.sum(1) + w2 * (qc * yc).sum(axes)
    m_bb = n + w2 * (yc * yc).sum(axes)
    r_a = (y_f * x_f).sum(1) + w2 * (qc * pc).sum(axes)
    r_b = x_f.sum(1) + w2 * (yc * pc).sum(axes)
    m_aa = m_aa + 1e-14
    m_bb = m_bb + 1e-14
    det = m_aa * m_bb - m_ab * m_ab
    return (m_bb * r_a - m_ab * r_b) / det, (m_aa * r_b - m_ab * r_a) / det


def batch_nelder_mead(func, x0, step, iterations):
    """Nelder-Mead over a batch of independent 2-parameter problems.

    ``func`` maps an array (B, 2) to values (B,).  Standard reflection,
    expansion, contraction and shrink moves, applied per row.
    """
    B = x0.shape[0]
    simplex = np.stack([x0, x0 + [step, 0.0], x0 + [0.0, step]], axis=1)
    vals = np.stack([func(simplex[:, i]) for i in range(3)], axis=1)
    rows = np.arange(B)
    for _ in range(iterations):
        order = np.argsort(vals, axis=1, kind="stable")
        simplex = simplex[rows[:, None], order]
        vals = vals[rows[:, None], order]
        centroid = simplex[:, :2].mean(axis=1)
        worst = simplex[:, 2]
        xr = centroid + (centroid - worst)
        fr = func(xr)
        xe = centroid + 2.0 * (centroid - worst)
        fe = func(xe)
        xc = centroid + 0.5 * (worst - centroid)
        fc = func(xc)
        new_pt = worst.copy()
        new_val = vals[:, 2].copy()
        expand = (fr < vals[:, 0]) & (fe < fr)
        reflect = (fr < vals[:, 1]) & ~expand
        contract = ~expand & ~reflect & (fc < vals[:, 2])
        shrink = ~expand & ~reflect & ~contract
        new_pt[expand], new_val[expand] = xe[expand], fe[expand]
        new_pt[reflect], new_val[reflect] = xr[reflect], fr[reflect]
        new_pt[contract], new_val[contract] = xc[contract], fc[contract]
        simplex[:, 2] = new_pt
        vals[:, 2] = new_val
        if shrink.any():
            best = simplex[shrink, 0][:, None, :]
            simplex[shrink] = best + 0.5 * (simplex[shrink] - best)
            vals[shrink, 1] = func(simplex[:, 1])[shrink]
            vals[shrink, 2] = func(simplex[:, 2])[shrink]
    j = np.argmin(vals, axis=1)
    return simplex[rows, j], vals[rows, j]


@dataclass
class BatchPlaneFits:
    """Plane fits for a batch of balls; all quantities in original units."""

    frame: np.ndarray  # (B,)
    a: np.ndarray  # (B,) plane slope in the frame
    b: np.ndarray  # (B,) plane offset in the frame
    c: np.ndarray  # (B, L) per-line constants in the frame
    beta: np.ndarray  # (B,) surrogate strong beta
    t_lines: np.ndarray  # (B, L)

    @property
    def angle(self):
        return self.frame - np.arctan(self.a)


def batch_plane_fit(f: RugMap, centers_y, centers_t, radii, lines: int, samples: int,
                    polish_above: float | None = None, polish_iterations: int | None = None,
                    line_offsets=None, polish_below: float | None = None) -> BatchPlaneFits:
    """Strong vertical beta on many balls at once.

    Each ball's data is translated to its centre image, dilated to unit radius and
    rotated to its principal frame; a joint least-squares seed is then polished by
    batched Nelder-Mead wherever the seed's value is at least ``polish_above``
    and, if given, below ``polish_below``.
    """
    cy = np.asarray(centers_y, float)
    ct = np.asarray(centers_t, float)
    r = np.asarray(radii, float)
    B = cy.size
    u = np.linspace(-1.0, 1.0, lines) if line_offsets is None else np.asarray(line_offsets, float)
    lines = u.size
    v = np.linspace(-1.0, 1.0, samples)
    T = ct[:, None, None] + (r * r)[:, None, None] * u[None, :, None] + 0.0 * v[None, None, :]
    Y = cy[:, None, None] + r[:, None, None] * v[None, None, :] + 0.0 * u[None, :, None]
    x, y, t = f.arrays(Y, T)
    g = f.arrays(cy, ct)
    gx, gy, gt = (c[:, None, None] for c in g)
    xs, ys, ts = hc.mul_xyt(-gx, -gy, -gt, x, y, t)
    rr = r[:, None, None]
    xs, ys, ts = xs / rr, ys / rr, ts / rr**2
    # principal frame per ball
    xm = xs.reshape(B, -1)
    ym = ys.reshape(B, -1)
    xc = xm - xm.mean(axis=1, keepdims=True)
    yc = ym - ym.mean(axis=1, keepdims=True)
    sxx, syy, sxy = (xc * xc).sum(1), (yc * yc).sum(1), (xc * yc).sum(1)
    frame = -0.5 * np.arctan2(2.0 * sxy, syy - sxx)
    cs, sn = np.cos(-frame)[:, None, None], np.sin(-frame)[:, None, None]
    xr, yr = cs * xs - sn * ys, sn * xs + cs * ys
    pt = ts + 0.5 * xr * yr
    a0, b0 = _joint_seed(xr, yr, pt, TUNABLES.seed_t_weight)
    val, cvals = _plane_objective(a0, b0, xr, yr, pt)
    a_best, b_best = a0.copy(), b0.copy()
    if polish_above is not None:
        want = val >= polish_above
        if polish_below is not None:
            want &= val < polish_below
        todo = np.nonzero(want)[0]
        iters = polish_iterations or TUNABLES.batch_nm_iterations
        for lo in range(0, todo.size, TUNABLES.batch_chunk):
            idx = todo[lo:lo + TUNABLES.batch_chunk]
            xi, yi, pi = xr[idx], yr[idx], pt[idx]

            def func(p, xi=xi, yi=yi, pi=pi):
                return _plane_objective(p[:, 0], p[:, 1], xi, yi, pi)[0]

            start = np.column_stack([a0[idx], b0[idx]])
            sol, sval = batch_nelder_mead(func, start, TUNABLES.nm_initial_step, iters)
            better = sval < val[idx]
            sel = idx[better]
            a_best[sel], b_best[sel] = sol[better, 0], sol[better, 1]
        val, cvals = _plane_objective(a_best, b_best, xr, yr, pt)
    # back to original units: the frame is about the centre image g
    # plane (a, b) in the rotated, centred, unit frame -> rotated frame about the origin
    # undo dilation: b -> r b, c -> r^2 c; undo translation by R_{-frame} g
    gxr = np.cos(-frame) * g[0] - np.sin(-frame) * g[1]
    gyr = np.sin(-frame) * g[0] + np.cos(-frame) * g[1]
    gtr = g[2]
    bb = r * b_best
    cc = (r * r)[:, None] * cvals
    # left translation of the line L(a, bb, cc) by (gxr, gyr, gtr)
    px = gxr + bb
    py = gyr
    ptt = gtr[:, None] + cc + 0.5 * (gxr * 0.0 - bb * gyr)[:, None]
    frame_b = px - a_best * py
    frame_c = ptt - 0.5 * (frame_b * py)[:, None]
    t_lines = ct[:, None] + (r * r)[:, None] * u[None, :]
    return BatchPlaneFits(frame, a_best, frame_b, frame_c, val, t_lines)


def strong_vertical_beta(f: RugMap, ball: ParaBall, lines: int = 5, samples: int = 9,
                         sigma_max: float | None = None) -> PlaneFit:
    """Best vertical plane for f on a ball, with per-line in-plane line fits.

    Coarse (a, b) grid search in the principal frame, Nelder-Mead polish, then the
    per-line residuals are recomputed with the true distance to the fitted lines.
    """
    if lines < 3 or samples < 8:
        raise DomainError("strong beta needs lines >= 3 and samples >= 8")
    sigma_max = TUNABLES.sigma_grid_max if sigma_max is None else sigma_max
    ts, ys = ball_grid(ball, lines, samples)
    Y = np.broadcast_to(ys, (lines, samples))
    T = np.broadcast_to(ts[:, None], (lines, samples))
    x, y, t = f.arrays(Y, T)
    r = ball.radius
    g = tuple(float(v) for v in f.arrays(ball.center.y, ball.center.t))
    xs, ys_, ts_ = hc.mul_xyt(*hc.inv_xyt(*g), x, y, t)
    xs, ys_, ts_ = xs / r, ys_ / r, ts_ / r**2
    phi = _frame_angle(xs.ravel(), ys_.ravel())
    xr, yr, tr = hc.rotate_xyt(-phi, xs, ys_, ts_)
    pt = tr + 0.5 * xr * yr
    a0, b0 = _joint_seed(xr[None], yr[None], pt[None], TUNABLES.seed_t_weight)
    # coarse grid around the seed
    na = TUNABLES.grid_half_steps
    a_grid = a0[0] + np.linspace(-sigma_max, sigma_max, 2 * na + 1)
    b_grid = b0[0] + np.linspace(-1.0, 1.0, 2 * na + 1)
    AA, BB = np.meshgrid(a_grid, b_grid, indexing="ij")
    vals = _plane_objective(AA.ravel(), BB.ravel(), xr[None], yr[None], pt[None])[0]
    seed_val = _plane_objective(a0, b0, xr[None], yr[None], pt[None])[0][0]
    starts = [np.array([a0[0], b0[0]])]
    if vals.min() < seed_val:
        j = int(np.argmin(vals))
        starts.append(np.array([AA.ravel()[j], BB.ravel()[j]]))

    def objective(p):
        return float(_plane_objective(np.asarray([p[0]]), np.asarray([p[1]]), xr[None], yr[None], pt[None])[0][0])

    best, best_val = starts[0], objective(starts[0])
    for s in starts:
        cur = s
        for restart in range(TUNABLES.nm_restarts):
            step = TUNABLES.nm_initial_step / (4.0**restart)
            simplex = np.array([cur, cur + [step, 0.0], cur + [0.0, step]])
            res = minimize(objective, cur, method="Nelder-Mead",
                           options={"maxiter": TUNABLES.nm_iterations, "initial_simplex": simplex,
                                    "xatol": 1e-13, "fatol": 1e-15})
            cur = np.asarray(res.x, float)
            if res.fun < best_val or (res.fun == best_val and (abs(res.x[0]), res.x[1]) < (abs(best[0]), best[1])):
                best, best_val = cur, float(res.fun)
    a, b = float(best[0]), float(best[1])
    _, cvals = _plane_objective(np.asarray([a]), np.asarray([b]), xr[None], yr[None], pt[None])
    cvals = cvals[0]
    # true distances of the samples to their in-plane lines
    d = hc.dist_to_line_xyt(a, b, cvals[:, None], xr, yr, tr)
    # express lines and plane in the frame R_{-phi}, original scale and position
    gr = hc.rotate_xyt(-phi, *g)
    per_line = {}
    plane_line = None
    for j, tval in enumerate(ts):
        Lj = translate_line(gr, dilate_line(r, HorizontalLine(a, b, float(cvals[j]))))
        plane_line = Lj
        sur = _surrogate_ab(np.asarray(a), np.asarray(b), xr[j], yr[j], pt[j])[0]
        per_line[float(tval)] = LineFit(Lj, float(d[j].max()) * r, float(sur) * r)
    plane = VerticalPlane(plane_line.a, plane_line.b)
    beta = max(fit.sup_err for fit in per_line.values()) / r
    return PlaneFit(phi, plane, beta, per_line, ball)


def carleson_sum(f: RugMap, Q0: ParaRect, depth: int, coefficient: str = "ruler",
                 threshold: float = 0.0, C: float = 1.0, lines: int = 5, samples: int = 9):
    """Sum of l(Q)^3 over Q inside Q0 (to ``depth`` generations) flagged by the coefficient."""
    if depth > 10:
        raise DomainError("carleson_sum is limited to depth 10")
    if coefficient not in ("ruler", "beta"):
        raise DomainError(f"unknown coefficient {coefficient!r}")
    total = 0.0
    level = [Q0]
    for _ in range(depth + 1):
        if threshold <= 0.0:
            total += len(level) * level[0].measure
        else:
            cy = np.array([Q.center.y for Q in level])
            ct = np.array([Q.center.t for Q in level])
            rad = np.full(cy.size, C * level[0].side)
            if coefficient == "beta":
                vals = batch_plane_fit(f, cy, ct, rad, lines, samples, polish_above=threshold).beta
            else:
                vals = batch_ruler(f, cy, ct, rad, lines, samples, polish_above=threshold)
            total += int((vals >= threshold).sum()) * level[0].measure
        level = [c for Q in level for c in children(Q)]
    return total, total / Q0.measure


def batch_ruler(f: RugMap, centers_y, centers_t, radii, lines: int, samples: int,
                polish_above: float = 0.0):
    """Surrogate ruler coefficients for many balls: independent plane per line.

    Seeds below ``polish_above`` are accepted as they are; they are already upper
    bounds, so this only matters for values compared against that threshold.
    """
    cy = np.asarray(centers_y, float)
    ct = np.asarray(centers_t, float)
    r = np.asarray(radii, float)
    out = np.zeros(cy.size)
    for u in np.linspace(-1.0, 1.0, lines):
        fits = batch_plane_fit(f, cy, ct, r, 1, samples, polish_above=polish_above, line_offsets=[u])
        out = np.maximum(out, fits.beta)
    return out
