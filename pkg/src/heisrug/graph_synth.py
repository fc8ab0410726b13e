"""Synthesis of an intrinsic graph approximating one corona tree.

The tree is first normalised so that its top is [0, 1)^2 and its plane is the
xt-plane:

    g(y, t) = delta_{1/l0} R_{-psi} f(y0 + l0 y, t0 + l0^2 t),

composed with (x, y, t) -> (x, -y, -t) when the tree's signature is negative.
Every horizontal line {t = j 2^-n} of level n then carries a C^2 function
tau_n(j)(y) of the image coordinate y.  Level 0 uses approximate quadrics of
the top; level n blends approximate quadrics near the corners of generation
ceil(n / 2) rectangles into the previous level with a partition of unity.

Two evaluators are provided and must agree: ``LevelGrid`` computes every line
of every level on a common y grid, and ``Synthesis.evaluate`` recurses per
query point, visiting at most two lines per level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import heis_core as hc
from .corona import CoronaDecomposition, CoronaParams, Tree
from .flatness import PlaneFit, RugMap, batch_nelder_mead
from .heis_core import DomainError, HPoint
from .para_grid import ParaRect
from .tunables import TUNABLES

KAPPA0 = 0.5 * (1.0 + 0.8 * math.sqrt(2.0))


class TreeTruncated(DomainError):
    """A level needs rectangles below the analysed depth."""


# -- quadrics ------------------------------------------------------------------

@dataclass(frozen=True)
class Quadric:
    """q(y) = a y^2 / 2 + b y + c."""

    a: float
    b: float
    c: float

    def __call__(self, y):
        return 0.5 * self.a * y * y + self.b * y + self.c

    def first(self, y):
        return self.a * y + self.b

    def second(self, y):
        return self.a + 0.0 * np.asarray(y, float)

    def evaluate(self, y):
        y = np.asarray(y, float)
        return self(y), self.first(y), self.second(y)

    def __sub__(self, other: "Quadric") -> "Quadric":
        return Quadric(self.a - other.a, self.b - other.b, self.c - other.c)


def _fit_frame(fit):
    if isinstance(fit, PlaneFit):
        return fit.frame, fit.plane.a, fit.plane.b
    return fit.frame, fit.a, fit.b


def approx_quadric(f: RugMap, Q: ParaRect, t_line: float, fit, H: float, samples: int | None = None) -> Quadric:
    """The (Q, line)-approximate quadric in the coordinates of R_{-frame} f.

    ``t_line`` is the height of the horizontal line in the domain.  The constant
    is the midrange fit of the plane's line through the samples of that line
    inside HQ.
    """
    frame, a, b = _fit_frame(fit)
    c_t = Q.center.t
    half = H * Q.side
    if abs(t_line - c_t) > half * half * (1 + 1e-12):
        raise DomainError("line misses HQ")
    ys = np.linspace(Q.center.y - half, Q.center.y + half, samples or TUNABLES.quadric_samples)
    x, y, t = f.arrays(ys, np.full(ys.shape, float(t_line)))
    xr, yr, tr = hc.rotate_xyt(-frame, x, y, t)
    r = tr + 0.5 * xr * yr - 0.5 * a * yr * yr - b * yr
    return Quadric(float(a), float(b), 0.5 * float(r.max() + r.min()))


@dataclass(frozen=True)
class QuadricEnvelope:
    m: float
    mdot: float
    length: float
    C: tuple

    def bounds(self, r: float) -> tuple[float, float, float]:
        """Bounds on |q|, |q'| and |q''| anywhere in rI."""
        C1, C2, C3 = self.C
        L = self.length
        return (C1 * (self.m + L * self.mdot) * r * r,
                C2 * (self.mdot + self.m / L) * r,
                C3 * (self.m / L**2 + self.mdot / L))


def quadric_envelope(q: Quadric, interval, r: float = 1.0) -> QuadricEnvelope:
    a1, a2 = (float(v) for v in interval)
    if not a2 > a1:
        raise DomainError("interval must have positive length")
    if r < 1:
        raise DomainError("dilation factor must be at least 1")
    ends = np.array([a1, a2])
    m = float(np.abs(q(ends)).max())
    mdot = float(np.abs(q.first(ends)).max())
    C = (TUNABLES.quadric_c1, TUNABLES.quadric_c2, TUNABLES.quadric_c3)
    return QuadricEnvelope(m, mdot, a2 - a1, C)


def dilated_interval(interval, r: float):
    a1, a2 = interval
    mid, half = 0.5 * (a1 + a2), 0.5 * (a2 - a1)
    return mid - r * half, mid + r * half


def quadrics_compatible(q1: Quadric, q2: Quadric, y, n: int, tol) -> bool:
    """The level-n closeness relation at y with tolerances (eps1, eps2, eps3)."""
    e1, e2, e3 = tol
    y = np.asarray(y, float)
    d = q1 - q2
    return bool(np.all(np.abs(d(y)) <= e1 * 2.0**-n)
                and np.all(np.abs(d.first(y)) <= e2 * 2.0 ** (-n / 2))
                and abs(d.a) <= e3)


# -- intervals and bumps -----------------------------------------------------------

def prune_intervals(raw) -> list:
    """Drop intervals covered by the remaining ones, scanning left to right.

    For equal lengths an interval is covered by the others exactly when the
    nearest kept interval on its left and the next one on its right overlap
    across it (or one of them coincides with it).
    """
    items = sorted(((float(a), float(b)) for a, b in raw), key=lambda I: (I[0], 0.5 * (I[0] + I[1])))
    if not items:
        return []
    lengths = np.array([b - a for a, b in items])
    if np.ptp(lengths) > 1e-12 * max(1.0, lengths.max()):
        raise DomainError("prune_intervals expects equal-length intervals")
    kept = []
    for i, (a, b) in enumerate(items):
        left = kept[-1] if kept else None
        right = items[i + 1] if i + 1 < len(items) else None
        covered = False
        if right is not None and right[0] <= a:
            covered = True
        elif left is not None and right is not None and left[1] >= right[0] and left[0] <= a and right[1] >= b:
            covered = True
        elif left is not None and left[1] >= b:
            covered = True
        if not covered:
            kept.append((a, b))
    return kept


def smoothstep(u):
    """Quintic C^2 ramp with its first two derivatives, clipped to [0, 1]."""
    u = np.clip(u, 0.0, 1.0)
    s = u**3 * (10.0 - 15.0 * u + 6.0 * u * u)
    ds = 30.0 * u * u * (1.0 - u) ** 2
    dds = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
    return s, ds, dds


def bump(y, center, radius):
    """C^2 bump equal to 1 on [c - R, c + R] and 0 outside kappa0 times that interval."""
    w = (KAPPA0 - 1.0) * radius
    left = (y - (center - KAPPA0 * radius)) / w
    right = ((center + KAPPA0 * radius) - y) / w
    sl, dl, ddl = smoothstep(left)
    sr, dr, ddr = smoothstep(right)
    use_left = y < center
    val = np.where(use_left, sl, sr)
    d1 = np.where(use_left, dl / w, -dr / w)
    d2 = np.where(use_left, ddl / (w * w), ddr / (w * w))
    return val, d1, d2


@dataclass(frozen=True)
class BumpFamily:
    """Stick-breaking partition of unity over pruned intervals of one line.

    phi_i = psi_i prod_{j < i} (1 - psi_j) in ascending order, so the bumps sum to
    1 - prod (1 - psi_j): equal to 1 on the union of the intervals and 0 off the
    union of their kappa0 enlargements.  phi_line is the remaining product.
    """

    centers: np.ndarray
    radius: float

    @property
    def intervals(self):
        return [(c - self.radius, c + self.radius) for c in self.centers]

    def evaluate(self, y):
        """(phi, dphi, ddphi) with shape (k, ...) and (rest, drest, ddrest)."""
        y = np.asarray(y, float)
        P, dP, ddP = np.ones(y.shape), np.zeros(y.shape), np.zeros(y.shape)
        phis = []
        for c in self.centers:
            psi, dpsi, ddpsi = bump(y, c, self.radius)
            phis.append((psi * P, dpsi * P + psi * dP, ddpsi * P + 2 * dpsi * dP + psi * ddP))
            P, dP, ddP = P * (1 - psi), dP * (1 - psi) - P * dpsi, ddP * (1 - psi) - 2 * dP * dpsi - P * ddpsi
        if phis:
            stacked = tuple(np.stack([p[i] for p in phis]) for i in range(3))
        else:
            stacked = tuple(np.zeros((0,) + y.shape) for _ in range(3))
        return stacked, (P, dP, ddP)


def blend(bumps, quads, prev):
    """sum phi_I q_I + phi_line prev with value, first and second derivative."""
    (phi, dphi, ddphi), (rest, drest, ddrest) = bumps
    q, dq, ddq = quads
    p, dp, ddp = prev
    val = (phi * q).sum(0) + rest * p
    d1 = (dphi * q + phi * dq).sum(0) + drest * p + rest * dp
    d2 = (ddphi * q + 2 * dphi * dq + phi * ddq).sum(0) + ddrest * p + 2 * drest * dp + rest * ddp
    return val, d1, d2


# -- normalised tree data ------------------------------------------------------------

@dataclass(frozen=True)
class SynthParams:
    eps1: float = 1e-2
    eps2: float = 1e-2
    eps3: float = 1e-2
    eta: float = 0.1
    y_margin: float = 2.0
    levels: int | None = None
    cone_limit: float | None = None
    max_spread: float = 10.0

    def as_dict(self) -> dict:
        return {"eps1": self.eps1, "eps2": self.eps2, "eps3": self.eps3, "eta": self.eta,
                "y_margin": self.y_margin, "levels": self.levels, "cone_limit": self.cone_limit,
                "max_spread": self.max_spread}


class TreeChart:
    """The normalised rug of a tree and its members' planes in that frame."""

    def __init__(self, f: RugMap, tree_id: int, top: ParaRect, psi: float, signature: str, H: float,
                 member: list, a: list, b: list):
        if signature not in ("+", "-"):
            raise DomainError(f"tree {tree_id} has no signature")
        self.f = f
        self.tree_id = tree_id
        self.top = top
        self.scale = top.side
        self.y0 = float(top.y_range[0])
        self.t0 = float(top.t_range[0])
        self.psi = psi
        self.signature = signature
        self.reflect = signature == "-"
        self.H = H
        self.depth = len(member) - 1
        self.member, self.a, self.b = member, a, b

    @classmethod
    def from_tree(cls, f: RugMap, dec: CoronaDecomposition, tree: Tree) -> "TreeChart":
        top = tree.root
        member, aa, bb = [], [], []
        reflect = tree.signature == "-"
        for m in range(tree.depth + 1):
            g = dec.generation(top.n + m)
            ks = (top.k << m) + np.arange(2**m)
            ls = (top.l << (2 * m)) + np.arange(4**m)
            idx = ((ks - g.k0)[:, None] * 4**g.d + (ls - g.l0)[None, :])
            member.append(g.tree[idx] == tree.tree_id)
            a, b = _rotate_planes(g.frame[idx] - tree.angle, g.a[idx], g.b[idx])
            b = b / top.side
            if reflect:
                a = -a
            aa.append(a)
            bb.append(b)
        return cls(f, tree.tree_id, top, tree.angle, tree.signature, dec.H, member, aa, bb)

    def to_dict(self) -> dict:
        gens = []
        for m in range(self.depth + 1):
            k, l = np.nonzero(self.member[m])
            gens.append({"k": k.tolist(), "l": l.tolist(),
                         "a": self.a[m][k, l].tolist(), "b": self.b[m][k, l].tolist()})
        return {"tree": self.tree_id, "top": [self.top.n, self.top.k, self.top.l], "angle": self.psi,
                "signature": self.signature, "H": self.H, "members": gens}

    @classmethod
    def from_dict(cls, f: RugMap, data: dict) -> "TreeChart":
        member, aa, bb = [], [], []
        for m, g in enumerate(data["members"]):
            shape = (2**m, 4**m)
            mem = np.zeros(shape, bool)
            a, b = np.zeros(shape), np.zeros(shape)
            k, l = np.asarray(g["k"], np.int64), np.asarray(g["l"], np.int64)
            mem[k, l] = True
            a[k, l], b[k, l] = g["a"], g["b"]
            member.append(mem)
            aa.append(a)
            bb.append(b)
        return cls(f, data["tree"], ParaRect(*data["top"]), data["angle"], data["signature"], data["H"],
                   member, aa, bb)

    def evaluate(self, y, t):
        x, yy, tt = self.f.arrays(self.y0 + self.scale * np.asarray(y, float),
                                  self.t0 + self.scale**2 * np.asarray(t, float))
        x, yy, tt = hc.rotate_xyt(-self.psi, x, yy, tt)
        s = self.scale
        x, yy, tt = x / s, yy / s, tt / (s * s)
        if self.reflect:
            yy, tt = -yy, -tt
        return x, yy, tt

    def rug(self) -> RugMap:
        return RugMap(self.evaluate, self.f.M, f"chart({self.f.name})")

    def to_original(self, x, y, t):
        """Inverse of the image normalisation."""
        if self.reflect:
            y, t = -y, -t
        s = self.scale
        return hc.rotate_xyt(self.psi, s * x, s * y, s * s * t)

    def is_member(self, m: int, k, l):
        k = np.asarray(k)
        l = np.asarray(l)
        ok = (m <= self.depth) & (k >= 0) & (k < 2**m) & (l >= 0) & (l < 4**m)
        out = np.zeros(np.shape(k), bool)
        if m > self.depth:
            return out
        out[ok] = self.member[m][k[ok], l[ok]]
        return out

    def quadric_constants(self, m: int, k, l, t_line):
        """Midrange constants c_{Q, line} for member rectangles (m, k, l) and lines t."""
        k = np.atleast_1d(np.asarray(k, np.int64))
        l = np.atleast_1d(np.asarray(l, np.int64))
        t_line = np.broadcast_to(np.asarray(t_line, float), k.shape)
        if k.size == 0:
            return np.zeros(0)
        side = 2.0**-m
        v = np.linspace(-1.0, 1.0, TUNABLES.quadric_samples)
        Y = ((k + 0.5) * side)[:, None] + self.H * side * v[None, :]
        T = np.broadcast_to(t_line[:, None], Y.shape)
        x, y, t = self.evaluate(Y, T)
        a = self.a[m][k, l][:, None]
        b = self.b[m][k, l][:, None]
        r = t + 0.5 * x * y - 0.5 * a * y * y - b * y
        return 0.5 * (r.max(axis=1) + r.min(axis=1))

    def quadric(self, m: int, k: int, l: int, t_line: float) -> Quadric:
        c = float(self.quadric_constants(m, [k], [l], t_line)[0])
        return Quadric(float(self.a[m][k, l]), float(self.b[m][k, l]), c)


def _rotate_planes(theta, a, b):
    cs, sn = np.cos(theta), np.sin(theta)
    dx, dy = a * cs - sn, a * sn + cs
    px, py = cs * b, sn * b
    return dx / dy, px - py / dy * dx


# -- levels --------------------------------------------------------------------------

@dataclass
class CornerSet:
    """Corners of generation-m member rectangles on one horizontal line."""

    k: np.ndarray
    l: int
    owner_k: np.ndarray
    owner_l: np.ndarray
    f2: np.ndarray


@dataclass
class TauLevel:
    n: int
    lines: dict  # j -> (centers, quad a, b, c) for lines with a nonempty bump family
    radius: float
    prev: "TauLevel | None"
    base: dict | None = None  # level 0: {j: Quadric} and step
    step: float = 0.0

    def table(self):
        """Padded arrays (lines, centers, a, b, c) for vectorised evaluation."""
        if not self.lines:
            return None
        if getattr(self, "_table", None) is None:
            js = np.array(sorted(self.lines), dtype=np.int64)
            width = max(len(self.lines[j][0]) for j in js)
            shape = (js.size, width)
            centers = np.full(shape, np.nan)
            qa, qb, qc = np.zeros(shape), np.zeros(shape), np.zeros(shape)
            for r, j in enumerate(js):
                cen, a, b, c = self.lines[int(j)][:4]
                centers[r, :cen.size] = cen
                qa[r, :cen.size], qb[r, :cen.size], qc[r, :cen.size] = a, b, c
            self._table = (js, centers, qa, qb, qc)
        return self._table

    def base_quadric(self, j: int) -> Quadric:
        if j in self.base:
            return self.base[j]
        q0 = self.base[0]
        return Quadric(q0.a, q0.b, q0.c + self.step * j)

    def provenance(self) -> dict:
        out = {}
        for j, (centers, qa, qb, qc, owners) in self.lines.items():
            out[str(j)] = {"centers": centers.tolist(), "owners": [list(o) for o in owners],
                           "quadrics": np.column_stack([qa, qb, qc]).tolist()}
        return out


def _corner_sets(chart: TreeChart, m: int, row: int) -> CornerSet | None:
    """Member corners on the line t = row 4^-m (row in [0, 4^m])."""
    if m > chart.depth:
        raise TreeTruncated(f"generation {m} is below the tree depth {chart.depth}")
    kc = np.arange(2**m + 1)
    owner_k = np.full(kc.shape, -1)
    owner_l = np.full(kc.shape, -1)
    # candidate owners in lexicographic (k, l) order
    for dk, dl in ((-1, -1), (-1, 0), (0, -1), (0, 0)):
        mem = chart.is_member(m, kc + dk, np.full(kc.shape, row + dl))
        take = mem & (owner_k < 0)
        owner_k[take] = kc[take] + dk
        owner_l[take] = row + dl
    has = owner_k >= 0
    if not has.any():
        return None
    ks = kc[has]
    ys = ks * 2.0**-m
    _, f2, _ = chart.evaluate(ys, np.full(ys.shape, row * 4.0**-m))
    return CornerSet(ks, row, owner_k[has], owner_l[has], f2)


def line_window(n: int) -> range:
    return range(-2, 2**n + 3)


def build_tau0(chart: TreeChart) -> TauLevel:
    base = {}
    for j in (-1, 0, 1, 2):
        base[j] = chart.quadric(0, 0, 0, float(j))
    step = (base[2].c - base[-1].c) / 3.0
    return TauLevel(0, {}, 0.0, None, base=base, step=step)


def measured_theta(level0: TauLevel) -> float:
    """Half the tightest bracket [theta, 1/theta] containing the level-0 line gaps."""
    c = [level0.base[j].c for j in (-1, 0, 1, 2)]
    gaps = np.diff(c)
    if gaps.min() <= 0:
        raise DomainError("level-0 quadrics are not increasing in t")
    return 0.5 * min(float(gaps.min()), 1.0 / float(gaps.max()))


def build_tau_level(prev: TauLevel, chart: TreeChart, p: CoronaParams) -> TauLevel:
    n = prev.n + 1
    m = -(-n // 2)
    if m > chart.depth:
        raise TreeTruncated(f"level {n} needs generation {m} below the tree depth {chart.depth}")
    R = p.K * 2.0 ** (-n / 2)
    step_rows = 2 ** (2 * m - n)  # rows of generation m between lines of L_n
    corner_cache = {}

    def corners_on(j):
        t = j * 2.0**-n
        if t < 0 or t > 1:
            return None
        row = j * step_rows
        if row not in corner_cache:
            corner_cache[row] = _corner_sets(chart, m, row)
        return corner_cache[row]

    lines = {}
    for j in line_window(n):
        sets = [cs for cs in (corners_on(j - 1), corners_on(j), corners_on(j + 1)) if cs is not None]
        if not sets:
            continue
        f2 = np.concatenate([cs.f2 for cs in sets])
        owners = np.concatenate([np.column_stack([cs.owner_k, cs.owner_l]) for cs in sets])
        order = np.lexsort((owners[:, 1], owners[:, 0], f2))
        f2, owners = f2[order], owners[order]
        kept = prune_intervals([(c - R, c + R) for c in f2])
        centers = np.array([0.5 * (a + b) for a, b in kept])
        # map each kept interval back to its first (lowest-owner) generating corner
        pick = np.searchsorted(f2, centers - 1e-12 * max(1.0, R))
        pick = np.minimum(pick, f2.size - 1)
        own = owners[pick]
        t_line = j * 2.0**-n
        qc = chart.quadric_constants(m, own[:, 0], own[:, 1], t_line)
        qa = chart.a[m][own[:, 0], own[:, 1]]
        qb = chart.b[m][own[:, 0], own[:, 1]]
        lines[j] = (centers, qa, qb, qc, [tuple(int(v) for v in o) for o in own])
    return TauLevel(n, lines, R, prev)


def _level_values(level: TauLevel, j: int, y, prev_vals):
    entry = level.lines.get(j)
    if entry is None:
        return prev_vals
    centers, qa, qb, qc = entry[:4]
    fam = BumpFamily(centers, level.radius)
    bumps = fam.evaluate(y)
    yy = y[None, ...]
    quads = (0.5 * qa[:, None] * yy * yy + qb[:, None] * yy + qc[:, None],
             qa[:, None] * yy + qb[:, None], qa[:, None] + 0.0 * yy)
    return blend(bumps, quads, prev_vals)


def _inherited(prev_get, j):
    if j % 2 == 0:
        return prev_get(j // 2)
    lo, hi = prev_get((j - 1) // 2), prev_get((j + 1) // 2)
    return tuple(0.5 * (u + v) for u, v in zip(lo, hi))


# -- evaluators -----------------------------------------------------------------------

class LevelGrid:
    """All lines of all levels on one y grid (full-grid route)."""

    def __init__(self, levels: list, ys):
        self.ys = np.asarray(ys, float)
        self.values = []  # per level: dict j -> (v, d1, d2)
        for level in levels:
            if level.n == 0:
                vals = {j: level.base_quadric(j).evaluate(self.ys) for j in line_window(0)}
            else:
                prev = self.values[-1]

                def get(jj, prev=prev, base=levels[0]):
                    if jj in prev:
                        return prev[jj]
                    raise DomainError(f"line {jj} outside the grid window")

                vals = {j: _level_values(level, j, self.ys, _inherited(get, j)) for j in line_window(level.n)}
            self.values.append(vals)

    def level(self, n: int) -> dict:
        return self.values[n]


def evaluate_points(levels: list, n: int, j, y):
    """tau_n(line j)(y) for arrays j (int) and y, by recursion over levels.

    Each point needs at most two consecutive lines of any coarser level, so the
    recursion works on de-duplicated (line, point) pairs.
    """
    j = np.asarray(j, np.int64).ravel()
    y = np.asarray(y, float).ravel()
    pts = np.arange(y.size)
    return _eval_pairs(levels, n, j, pts, y)


def _eval_pairs(levels, n, j, pts, Y):
    level = levels[n]
    y = Y[pts]
    if n == 0:
        q0 = level.base[0]
        a = np.full(j.shape, q0.a)
        b = np.full(j.shape, q0.b)
        c = q0.c + level.step * j.astype(float)
        for jj, q in level.base.items():
            sel = j == jj
            a[sel], b[sel], c[sel] = q.a, q.b, q.c
        return 0.5 * a * y * y + b * y + c, a * y + b, a + 0.0 * y
    lo = np.where(j % 2 == 0, j // 2, (j - 1) // 2)
    hi = np.where(j % 2 == 0, j // 2, (j + 1) // 2)
    need_j = np.concatenate([lo, hi])
    need_p = np.concatenate([pts, pts])
    base = need_j.min()
    key = (need_j - base) * Y.size + need_p
    uniq, inv = np.unique(key, return_inverse=True)
    vals = _eval_pairs(levels, n - 1, uniq // Y.size + base, uniq % Y.size, Y)
    k = j.size
    prev = tuple(0.5 * (v[inv[:k]] + v[inv[k:]]) for v in vals)
    table = level.table()
    if table is None:
        return prev
    js, centers, qa, qb, qc = table
    row = np.searchsorted(js, j)
    row = np.minimum(row, js.size - 1)
    has = js[row] == j
    if not has.any():
        return prev
    out = [np.array(v, copy=True) for v in prev]
    r = row[has]
    yh = y[has]
    P, dP, ddP = np.ones(yh.shape), np.zeros(yh.shape), np.zeros(yh.shape)
    acc = [np.zeros(yh.shape) for _ in range(3)]
    for i in range(centers.shape[1]):
        c = centers[r, i]
        ok = np.isfinite(c)
        psi, dpsi, ddpsi = bump(yh, np.where(ok, c, 0.0), level.radius)
        psi, dpsi, ddpsi = psi * ok, dpsi * ok, ddpsi * ok
        a, b, cc = qa[r, i], qb[r, i], qc[r, i]
        q, dq, ddq = 0.5 * a * yh * yh + b * yh + cc, a * yh + b, a
        phi, dphi, ddphi = psi * P, dpsi * P + psi * dP, ddpsi * P + 2 * dpsi * dP + psi * ddP
        acc[0] += phi * q
        acc[1] += dphi * q + phi * dq
        acc[2] += ddphi * q + 2 * dphi * dq + phi * ddq
        P, dP, ddP = P * (1 - psi), dP * (1 - psi) - P * dpsi, ddP * (1 - psi) - 2 * dP * dpsi - P * ddpsi
    p0, p1, p2 = (v[has] for v in prev)
    out[0][has] = acc[0] + P * p0
    out[1][has] = acc[1] + dP * p0 + P * p1
    out[2][has] = acc[2] + ddP * p0 + 2 * dP * p1 + P * p2
    return tuple(out)


# -- axioms ---------------------------------------------------------------------------

@dataclass
class AxiomReport:
    n: int
    values: dict
    bounds: dict
    passed: dict

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())

    def as_dict(self) -> dict:
        return {"n": self.n, "values": self.values, "bounds": self.bounds, "passed": self.passed}


def _corner_owners(chart: TreeChart, m: int, row: int):
    """(f2 of corner, owner k, owner l) for every member rectangle at every corner of a row."""
    kc = np.arange(2**m + 1)
    f2 = None
    out = []
    for dk, dl in ((-1, -1), (-1, 0), (0, -1), (0, 0)):
        mem = chart.is_member(m, kc + dk, np.full(kc.shape, row + dl))
        if mem.any():
            out.append((kc[mem], kc[mem] + dk, np.full(int(mem.sum()), row + dl)))
    if not out:
        return None
    ks = np.concatenate([o[0] for o in out])
    ok = np.concatenate([o[1] for o in out])
    ol = np.concatenate([o[2] for o in out])
    _, f2, _ = chart.evaluate(ks * 2.0**-m, np.full(ks.shape, row * 4.0**-m))
    return f2, ok, ol


def _corner_closeness(chart: TreeChart, n: int, vals: dict, ys, inside, R: float, y_samples: int):
    """Worst |tau_n - q|, |tau_n' - q'|, |tau_n'' - q''| over corner windows of every line."""
    m = -(-n // 2)
    h = 2.0**-n
    idx = np.nonzero(inside)[0]
    stride = max(1, idx.size // max(y_samples, 64))
    idx = idx[::stride]
    yc = ys[idx]
    step_rows = 2 ** (2 * m - n) if n > 0 else 1
    rows = {}
    for jj in range(0, 2**n + 1):
        rows[jj] = _corner_owners(chart, m, jj * step_rows)
    e = [0.0, 0.0, 0.0]
    for j in sorted(vals):
        parts = [rows.get(jj) for jj in (j - 1, j, j + 1)]
        parts = [q for q in parts if q is not None]
        if not parts:
            continue
        f2 = np.concatenate([q[0] for q in parts])
        ok = np.concatenate([q[1] for q in parts])
        ol = np.concatenate([q[2] for q in parts])
        # one window per owner: the hull of its corners' R-windows, which is their
        # union once K exceeds the bilipschitz constant
        key = ok * (4**m + 1) + ol
        order = np.argsort(key, kind="stable")
        key, f2, ok, ol = key[order], f2[order], ok[order], ol[order]
        start = np.r_[0, np.nonzero(np.diff(key))[0] + 1]
        lo = np.minimum.reduceat(f2, start) - R
        hi = np.maximum.reduceat(f2, start) + R
        ok, ol = ok[start], ol[start]
        near = (yc[None, :] >= lo[:, None]) & (yc[None, :] <= hi[:, None])
        keep = near.any(axis=1)
        if not keep.any():
            continue
        ok, ol, near = ok[keep], ol[keep], near[keep]
        c = chart.quadric_constants(m, ok, ol, j * h)
        a = chart.a[m][ok, ol][:, None]
        b = chart.b[m][ok, ol][:, None]
        Y = yc[None, :]
        v, d1, d2 = (vals[j][i][idx][None, :] for i in range(3))
        e[0] = max(e[0], float(np.where(near, np.abs(v - (0.5 * a * Y * Y + b * Y + c[:, None])), 0).max()))
        e[1] = max(e[1], float(np.where(near, np.abs(d1 - (a * Y + b)), 0).max()))
        e[2] = max(e[2], float(np.where(near, np.abs(d2 - a), 0).max()))
    return e


def _check_level(levels, grid: LevelGrid, n: int, chart: TreeChart, p: CoronaParams,
                 sp: SynthParams, theta: float, window, y_samples: int = 65) -> AxiomReport:
    ys = grid.ys
    inside = (ys >= window[0]) & (ys <= window[1])
    vals = grid.level(n)
    js = sorted(vals)
    V = np.stack([vals[j][0][inside] for j in js])
    D1 = np.stack([vals[j][1][inside] for j in js])
    D2 = np.stack([vals[j][2][inside] for j in js])
    h = 2.0**-n
    values, bounds = {}, {}
    values["X1"] = float(np.abs(D2).max())
    bounds["X1"] = 2 * p.Sigma
    gaps = np.diff(V, axis=0) / h
    values["X2_low"] = float(gaps.min())
    values["X2_high"] = float(gaps.max())
    bounds["X2_low"] = theta
    bounds["X2_high"] = 1 / theta
    values["X3"] = float(np.abs(np.diff(D1, axis=0)).max())
    bounds["X3"] = p.delta * 2 ** (-n / 2)
    if n >= 1:
        prev = grid.level(n - 1)
        dv = dd = 0.0
        for j in js:
            if j % 2 == 0 and j // 2 in prev:
                dv = max(dv, float(np.abs(vals[j][0] - prev[j // 2][0])[inside].max()))
                dd = max(dd, float(np.abs(vals[j][1] - prev[j // 2][1])[inside].max()))
        values["X4_value"], values["X4_slope"] = dv, dd
        bounds["X4_value"], bounds["X4_slope"] = p.delta * h, p.delta * 2 ** (-n / 2)
    # closeness to approximate quadrics near corners, on a thinned grid
    e = _corner_closeness(chart, n, vals, ys, inside, p.K * 2.0 ** (-n / 2), y_samples)
    values["X5_value"], values["X5_slope"], values["X5_curvature"] = e
    bounds["X5_value"] = sp.eps1 * h
    bounds["X5_slope"] = sp.eps2 * 2 ** (-n / 2)
    bounds["X5_curvature"] = sp.eps3
    passed = {}
    for key in values:
        if key == "X2_low":
            passed[key] = values[key] >= bounds[key]
        else:
            passed[key] = values[key] <= bounds[key]
    return AxiomReport(n, values, bounds, passed)


def check_axioms(synth: "Synthesis", n: int | None = None) -> list:
    """Axiom reports for level n, or for every level when n is None."""
    ns = range(len(synth.levels)) if n is None else [n]
    return [_check_level(synth.levels, synth.grid, k, synth.chart, synth.params, synth.sparams,
                         synth.theta, synth.y_window) for k in ns]


# -- the synthesis and its limit -----------------------------------------------------

def _level_grid(levels: list, window, K: float) -> LevelGrid:
    """Grid fine enough to resolve the narrowest bump ramp eight times over."""
    ramp = (KAPPA0 - 1.0) * K * 2.0 ** (-(len(levels) - 1) / 2)
    count = int(math.ceil((window[1] - window[0]) / (ramp / 8.0))) + 1
    return LevelGrid(levels, np.linspace(window[0], window[1], max(count, 257)))


@dataclass
class Synthesis:
    chart: TreeChart
    params: CoronaParams
    sparams: SynthParams
    levels: list
    theta: float
    y_window: tuple
    grid: LevelGrid
    reports: list = field(default_factory=list)

    @property
    def n_max(self) -> int:
        return len(self.levels) - 1

    def evaluate(self, n: int, j, y):
        if n > self.n_max:
            raise TreeTruncated(f"level {n} beyond the synthesised {self.n_max}")
        return evaluate_points(self.levels, n, j, y)

    def to_dict(self) -> dict:
        return {
            "chart": self.chart.to_dict(),
            "theta": self.theta,
            "y_window": list(self.y_window),
            "corona_params": self.params.as_dict(),
            "params": self.sparams.as_dict(),
            "levels": [{"n": lv.n, "radius": lv.radius,
                        "base": {str(j): [q.a, q.b, q.c] for j, q in (lv.base or {}).items()},
                        "step": lv.step, "lines": lv.provenance()} for lv in self.levels],
            "axioms": [r.as_dict() for r in self.reports],
        }

    @classmethod
    def from_dict(cls, f: RugMap, data: dict) -> "Synthesis":
        """Rebuild from ``to_dict`` output; ``f`` may differ from the rug it was built on."""
        chart = TreeChart.from_dict(f, data["chart"])
        levels = []
        for rec in data["levels"]:
            prev = levels[-1] if levels else None
            if rec["n"] == 0:
                base = {int(j): Quadric(*q) for j, q in rec["base"].items()}
                levels.append(TauLevel(0, {}, 0.0, None, base=base, step=rec["step"]))
                continue
            lines = {}
            for j, ln in rec["lines"].items():
                quads = np.asarray(ln["quadrics"], float).reshape(-1, 3)
                lines[int(j)] = (np.asarray(ln["centers"], float), quads[:, 0], quads[:, 1], quads[:, 2],
                                 [tuple(o) for o in ln["owners"]])
            levels.append(TauLevel(rec["n"], lines, rec["radius"], prev))
        sp = SynthParams(**data["params"])
        window = tuple(data["y_window"])
        synth = cls(chart, CoronaParams(**data["corona_params"]), sp, levels, data["theta"], window,
                    _level_grid(levels, window, data["corona_params"]["K"]))
        synth.reports = [AxiomReport(r["n"], r["values"], r["bounds"], r["passed"]) for r in data["axioms"]]
        return synth


def synthesize(f: RugMap, dec: CoronaDecomposition, tree: Tree, sp: SynthParams | None = None,
               levels: int | None = None, check: bool = True) -> Synthesis:
    sp = sp or SynthParams()
    p = dec.params
    chart = TreeChart.from_tree(f, dec, tree)
    n_levels = levels if levels is not None else (sp.levels if sp.levels is not None else 2 * chart.depth)
    if n_levels > 2 * chart.depth:
        raise TreeTruncated(f"{n_levels} levels need depth {-(-n_levels // 2)}, tree has {chart.depth}")
    lv = [build_tau0(chart)]
    theta = measured_theta(lv[0])
    for _ in range(n_levels):
        lv.append(build_tau_level(lv[-1], chart, p))
    # y window: image of the top's corners' lines plus a margin
    ys_top = np.linspace(0.0, 1.0, 65)
    Yt, Tt = np.meshgrid(ys_top, np.linspace(0.0, 1.0, 17))
    _, f2, _ = chart.evaluate(Yt, Tt)
    window = (float(f2.min()) - sp.y_margin, float(f2.max()) + sp.y_margin)
    grid = _level_grid(lv, window, p.K)
    synth = Synthesis(chart, p, sp, lv, theta, window, grid)
    if check:
        synth.reports = check_axioms(synth)
    return synth


@dataclass
class IntrinsicGraph:
    """tau(y, t) from the deepest level, interpolated linearly between its lines."""

    synth: Synthesis
    error_budget: float

    @property
    def n(self) -> int:
        return self.synth.n_max

    def _check(self, y, t):
        lo, hi = self.synth.y_window
        if np.any((t < -1) | (t > 2) | (y < lo) | (y > hi)):
            raise DomainError("query outside the analysis window")

    def tau(self, y, t):
        """(tau, d tau / dy) at arrays y, t."""
        y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
        self._check(y, t)
        scale = 2.0**self.n
        j = np.floor(t * scale).astype(np.int64)
        s = t * scale - j
        lo = self.synth.evaluate(self.n, j.ravel(), y.ravel())
        hi = self.synth.evaluate(self.n, j.ravel() + 1, y.ravel())
        sv = s.ravel()
        val = (1 - sv) * lo[0] + sv * hi[0]
        der = (1 - sv) * lo[1] + sv * hi[1]
        return val.reshape(y.shape), der.reshape(y.shape)

    def tau_second(self, y, t):
        y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
        self._check(y, t)
        scale = 2.0**self.n
        j = np.floor(t * scale).astype(np.int64)
        s = (t * scale - j).ravel()
        lo = self.synth.evaluate(self.n, j.ravel(), y.ravel())
        hi = self.synth.evaluate(self.n, j.ravel() + 1, y.ravel())
        return ((1 - s) * lo[2] + s * hi[2]).reshape(y.shape)

    def psi_arrays(self, y, t):
        """Psi(y, t) = (0, y, tau) . (d tau / dy, 0, 0) in the tree frame."""
        val, der = self.tau(y, t)
        y = np.asarray(y, float)
        return der, y + 0.0 * val, val - 0.5 * y * der

    def Psi(self, y: float, t: float) -> HPoint:
        x, yy, tt = self.psi_arrays(np.array([y]), np.array([t]))
        return HPoint(float(x[0]), float(yy[0]), float(tt[0]))

    def invert_t(self, y, s):
        """t with tau(y, t) = s.

        The deepest-level line values increase with the line index, so an
        integer bisection finds the bracketing pair and the linear
        interpolation is solved exactly.
        """
        y, s = np.broadcast_arrays(np.asarray(y, float), np.asarray(s, float))
        shape = y.shape
        y, s = y.ravel(), s.ravel()
        scale = 2**self.n
        lo = np.full(y.shape, -scale, np.int64)
        hi = np.full(y.shape, 2 * scale, np.int64)
        vlo = self.synth.evaluate(self.n, lo, y)[0]
        vhi = self.synth.evaluate(self.n, hi, y)[0]
        if np.any((s < vlo) | (s > vhi)):
            raise DomainError("value outside the graph's t-range")
        while np.any(hi - lo > 1):
            mid = (lo + hi) // 2
            vm = self.synth.evaluate(self.n, mid, y)[0]
            below = vm <= s
            lo = np.where(below, mid, lo)
            vlo = np.where(below, vm, vlo)
            hi = np.where(below, hi, mid)
            vhi = np.where(below, vhi, vm)
        frac = np.where(vhi > vlo, (s - vlo) / np.where(vhi > vlo, vhi - vlo, 1.0), 0.0)
        return ((lo + frac) / scale).reshape(shape)

    def Phi_arrays(self, y, s):
        """Intrinsic graph map (0, y, s) -> (0, y, s) . (phi(y, s), 0, 0)."""
        t = self.invert_t(y, s)
        _, der = self.tau(y, t)
        y = np.asarray(y, float)
        return der, y + 0.0 * der, np.asarray(s, float) - 0.5 * y * der


def limit_tau(synth: Synthesis) -> IntrinsicGraph:
    if len(synth.levels) < 2:
        raise DomainError("the limit needs at least two levels")
    n = synth.n_max
    p = synth.params
    # remaining Cauchy tail plus linear interpolation across one line gap
    budget = p.delta * 2.0**-n + 2.0**-n / synth.theta
    return IntrinsicGraph(synth, budget)


# -- graph verification ------------------------------------------------------------

@dataclass
class GraphReport:
    approximation: dict
    bilipschitz: dict
    cone: dict
    tau_properties: dict

    @property
    def passed(self) -> bool:
        return (self.approximation["passed"] and self.bilipschitz["passed"] and self.cone["passed"]
                and all(v["passed"] for v in self.tau_properties.values()))

    def as_dict(self) -> dict:
        return {"approximation": self.approximation, "bilipschitz": self.bilipschitz, "cone": self.cone,
                "tau_properties": self.tau_properties, "passed": self.passed}


def distance_to_graph(G: IntrinsicGraph, x, y, t, polish: bool = True):
    """Distance from points (x, y, t) of the tree frame to the graph, per point.

    The seed is the graph point with the same vertical projection, at distance
    |x - phi|; a batched simplex search over (y', t') then looks for closer points.
    """
    x, y, t = (np.asarray(v, float) for v in (x, y, t))
    s = t + 0.5 * x * y
    tt = G.invert_t(y, s)
    _, der = G.tau(y, tt)
    best = np.abs(x - der)
    if not polish or best.size == 0:
        return best
    lo, hi = G.synth.y_window

    def func(pq):
        yy = np.clip(pq[:, 0], lo, hi)
        ts = np.clip(pq[:, 1], -1.0, 2.0)
        gx, gy, gt = G.psi_arrays(yy, ts)
        return hc.dist_xyt(x, y, t, gx, gy, gt)

    start = np.column_stack([y, tt])
    step = float(max(np.median(best), 1e-6))
    _, val = batch_nelder_mead(func, start, step, 40)
    return np.minimum(best, val)


def verify_graph(G: IntrinsicGraph, pair_samples: int = 1000, rect_samples: int = 200,
                 seed: int = 0) -> GraphReport:
    if pair_samples < 1000:
        raise DomainError("verify_graph needs at least 1000 pairs")
    synth = G.synth
    chart = synth.chart
    p, sp = synth.params, synth.sparams
    rng = np.random.default_rng(seed)
    # (A) approximation on 2Q for sampled members
    members = [(m, k, l) for m in range(chart.depth + 1) for k, l in zip(*np.nonzero(chart.member[m]))]
    pick = rng.choice(len(members), size=min(rect_samples, len(members)), replace=False)
    pick.sort()
    ms = np.array([members[i][0] for i in pick])
    ks = np.array([members[i][1] for i in pick])
    ls = np.array([members[i][2] for i in pick])
    side = 2.0**-ms
    per = 4
    u = rng.uniform(-1, 1, (pick.size, per))
    v = rng.uniform(-1, 1, (pick.size, per))
    wy = ((ks + 0.5) * side)[:, None] + side[:, None] * u
    wt = ((ls + 0.5) * side * side)[:, None] + (side * side)[:, None] * v
    fx, fy, ft = chart.evaluate(wy, wt)
    dist = distance_to_graph(G, fx.ravel(), fy.ravel(), ft.ravel()).reshape(wy.shape)
    ratio = dist / (sp.eta * side[:, None])
    approximation = {"samples": int(dist.size), "worst_ratio": float(ratio.max()),
                     "worst_distance": float(dist.max()), "passed": bool(ratio.max() <= 1.0)}
    # (B) bilipschitz ratios of Psi on pairs at all scales
    lo, hi = synth.y_window
    ylo, yhi = lo + sp.y_margin, hi - sp.y_margin
    y1 = rng.uniform(ylo, yhi, pair_samples)
    t1 = rng.uniform(0.0, 1.0, pair_samples)
    stepsize = 10.0 ** rng.uniform(-3, 0, pair_samples)
    ang = rng.uniform(0, 2 * math.pi, pair_samples)
    y2 = np.clip(y1 + stepsize * np.cos(ang), ylo, yhi)
    t2 = np.clip(t1 + np.sign(np.sin(ang)) * (stepsize * np.sin(ang)) ** 2, 0.0, 1.0)
    keep = hc.dpar_arr(y1, t1, y2, t2) > 0
    y1, t1, y2, t2 = y1[keep], t1[keep], y2[keep], t2[keep]
    P1 = G.psi_arrays(y1, t1)
    P2 = G.psi_arrays(y2, t2)
    r = hc.dist_xyt(*P1, *P2) / hc.dpar_arr(y1, t1, y2, t2)
    spread = float(r.max() / r.min())
    bilipschitz = {"pairs": int(r.size), "low": float(r.min()), "high": float(r.max()), "spread": spread,
                   "passed": bool(spread <= sp.max_spread)}
    # (C) cone condition on graph pairs
    dx = P2[0] - P1[0]
    dy = P2[1] - P1[1]
    dt = P2[2] - P1[2] - 0.5 * (P1[0] * P2[1] - P2[0] * P1[1])
    proj = np.maximum(np.abs(dy), np.sqrt(np.abs(dt + 0.5 * dx * dy)))
    L = float((np.abs(dx) / proj).max())
    limit = sp.cone_limit if sp.cone_limit is not None else 2 * p.Sigma + 1
    cone = {"L": L, "limit": limit, "passed": bool(L <= limit)}
    # tau properties on a grid
    ys = np.linspace(ylo, yhi, 129)
    ts = np.linspace(0.0, 1.0, 65)
    Y, T = np.meshgrid(ys, ts)
    val, der = G.tau(Y, T)
    curv = G.tau_second(Y, T)
    gap = np.diff(val, axis=0) / np.diff(ts)[:, None]
    holder = np.abs(np.diff(der, axis=0)) / np.sqrt(np.diff(ts))[:, None]
    th = synth.theta
    tau_props = {
        "curvature": {"value": float(np.abs(curv).max()), "bound": 2 * p.Sigma,
                      "passed": bool(np.abs(curv).max() <= 2 * p.Sigma)},
        "t_separation": {"low": float(gap.min()), "high": float(gap.max()), "theta": th,
                         "passed": bool(gap.min() >= th and gap.max() <= 1 / th)},
        "holder": {"value": float(holder.max()), "bound": sp.eta, "passed": bool(holder.max() <= sp.eta)},
    }
    tau_props["corner_quadrics"] = _corner_quadric_check(G, ms, ks, ls, ylo, yhi)
    return GraphReport(approximation, bilipschitz, cone, tau_props)


def _corner_quadric_check(G: IntrinsicGraph, ms, ks, ls, ylo, yhi, samples: int = 33) -> dict:
    """Limit tau against each sampled member's quadric near its corners' images."""
    chart = G.synth.chart
    p, sp = G.synth.params, G.synth.sparams
    m = np.repeat(np.asarray(ms), 4)
    k = np.repeat(np.asarray(ks), 4)
    l = np.repeat(np.asarray(ls), 4)
    dk = np.tile([0, 0, 1, 1], len(ms))
    dl = np.tile([0, 1, 0, 1], len(ms))
    side = 2.0**-m
    cy, ct = (k + dk) * side, (l + dl) * side * side
    _, f2, _ = chart.evaluate(cy, ct)
    Y = f2[:, None] + (p.K * side)[:, None] * np.linspace(-1.0, 1.0, samples)[None, :]
    ok = (Y >= ylo) & (Y <= yhi)
    Yc = np.clip(Y, ylo, yhi)
    T = np.broadcast_to(ct[:, None], Y.shape)
    val, der = G.tau(Yc, T)
    c = np.empty(m.size)
    a = np.empty(m.size)
    b = np.empty(m.size)
    for gen in np.unique(m):
        sel = m == gen
        c[sel] = chart.quadric_constants(int(gen), k[sel], l[sel], ct[sel])
        a[sel] = chart.a[gen][k[sel], l[sel]]
        b[sel] = chart.b[gen][k[sel], l[sel]]
    q = 0.5 * a[:, None] * Yc * Yc + b[:, None] * Yc + c[:, None]
    dq = a[:, None] * Yc + b[:, None]
    rv = np.where(ok, np.abs(val - q), 0.0).max(axis=1) / side**2
    rd = np.where(ok, np.abs(der - dq), 0.0).max(axis=1) / side
    worst_v, worst_d = float(rv.max(initial=0.0)), float(rd.max(initial=0.0))
    return {"corners": int(ok.any(axis=1).sum()), "value_ratio": worst_v, "slope_ratio": worst_d,
            "bound": sp.eta, "passed": bool(worst_v <= sp.eta and worst_d <= sp.eta)}
