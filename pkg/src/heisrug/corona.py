"""Corona decomposition of a rug over one dyadic root.

Rectangles below the root are classified Good or Bad by the strong vertical beta
of their dilated ball HQ.  Good rectangles are grouped into coherent trees: a
Good rectangle joins its parent's tree unless the parent is Bad or a leaf, and a
member becomes a leaf when one of its children is Bad or its plane turns by at
least Sigma / 2 away from the tree's plane.  Rectangles of the last analysed
generation are leaves tagged ``cutoff``.

Everything per generation is held in flat arrays indexed by
``ik * 4**d + il`` where (ik, il) is the offset of (k, l) from the root's
descendants of that generation, so the (k, l) lexicographic order is the array
order.
"""

from __future__ import annotations

import math
import multiprocessing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import heis_core as hc
from .flatness import PlaneFit, RugMap, batch_plane_fit, strong_vertical_beta
from .heis_core import DomainError, ParaPoint, VerticalPlane
from .para_grid import ParaBall, ParaRect, contains, lambda_ball
from .tunables import TUNABLES

SCHEMA_VERSION = 1
MAX_DEPTH = 10

BAD, GOOD = 0, 1
LEAF_NONE, LEAF_BAD_CHILD, LEAF_STEEP, LEAF_CUTOFF = 0, 1, 2, 3
LEAF_NAMES = {LEAF_BAD_CHILD: "bad-child", LEAF_STEEP: "steep-angle", LEAF_CUTOFF: "cutoff"}


class SignatureUndetermined(DomainError):
    """The vertical probe sequence is neither increasing nor decreasing."""


class LineUnavailable(DomainError):
    """A per-line constant was requested for a line that misses the fitted ball."""


@dataclass(frozen=True)
class CoronaParams:
    eps: float = 0.5
    H: float | None = None
    Sigma: float = 2.0
    K: float = 64.0
    delta: float = 1e-2
    B: float = 5.0
    depth: int = 6
    A: float = 1.0
    kappa: float = 0.25

    def N(self, M: float) -> float:
        return self.A * (1.0 + self.Sigma) * M

    def resolved_H(self, M: float) -> float:
        if self.H is not None:
            return float(self.H)
        N = self.N(M)
        return self.A * max(N * N, self.K * N)

    def bad_threshold(self, M: float) -> float:
        return self.eps / (self.resolved_H(M) * self.A**2 * (1.0 + self.Sigma) ** 2)

    def hierarchy(self, M: float) -> tuple[list[str], list[str]]:
        """(errors, warnings) for the constant hierarchy at bilipschitz constant M."""
        errors, warns = [], []
        H, N = self.resolved_H(M), self.N(M)
        if not 0 <= self.depth <= MAX_DEPTH:
            errors.append(f"depth {self.depth} outside [0, {MAX_DEPTH}]")
        if not (self.eps > 0 and self.Sigma > 0 and self.K > 0 and self.delta > 0 and self.A > 0):
            errors.append("eps, Sigma, K, delta and A must be positive")
        if not 0 < self.kappa < 0.5:
            errors.append("kappa must lie in (0, 1/2)")
        if H < self.A * max(N * N, self.K * N) * (1 - 1e-12):
            errors.append(f"H = {H:g} is below A max(N^2, K N) = {self.A * max(N * N, self.K * N):g}")
        if self.B < 5:
            errors.append("B must be at least 5")
        if H < self.A * (1 + self.Sigma) * M * M * self.B:
            errors.append("H must be at least A (1 + Sigma) M^2 B")
        if self.eps >= min(self.delta * 100, M, self.Sigma, self.K):
            warns.append(f"eps = {self.eps:g} is not small against delta, M, Sigma and K")
        return errors, warns

    def as_dict(self) -> dict:
        return {"eps": self.eps, "H": self.H, "Sigma": self.Sigma, "K": self.K, "delta": self.delta,
                "B": self.B, "depth": self.depth, "A": self.A, "kappa": self.kappa}


# -- per-rectangle fits --------------------------------------------------------

@dataclass(frozen=True)
class RectFit:
    """Plane of a rectangle as found by the batched sweep.

    ``a`` and ``b`` describe the plane in the coordinates of R_{-frame} f.
    """

    frame: float
    a: float
    b: float
    beta: float

    @property
    def angle(self) -> float:
        return self.frame - math.atan(self.a)

    def plane(self):
        return hc.rotate_plane(self.frame, VerticalPlane(self.a, self.b))


def relative_slope(angle: float, reference: float) -> float:
    """|tan| of the angle between W_angle and W_reference, infinite when orthogonal."""
    diff = (angle - reference + math.pi / 2) % math.pi - math.pi / 2
    if abs(abs(diff) - math.pi / 2) < 1e-15:
        return math.inf
    return abs(math.tan(diff))


def _relative_slope_arr(angle, reference):
    diff = np.mod(angle - reference + np.pi / 2, np.pi) - np.pi / 2
    return np.abs(np.tan(diff))


@dataclass(frozen=True)
class Classification:
    status: str
    beta: float
    threshold: float
    fit: object  # RectFit or PlaneFit

    @property
    def good(self) -> bool:
        return self.status == "good"

    @property
    def plane(self):
        if isinstance(self.fit, PlaneFit):
            return self.fit.plane_original()
        return self.fit.plane()

    @property
    def W_angle(self) -> float:
        return self.fit.angle


def classify_rect(f: RugMap, Q: ParaRect, p: CoronaParams, exact: bool = False) -> Classification:
    """Good or Bad by comparing the strong beta of HQ with eps / (H A^2 (1 + Sigma)^2).

    ``exact=False`` uses the same batched fit as build_corona, so the answer
    matches the decomposition; ``exact=True`` runs the full grid search.
    """
    thr = p.bad_threshold(f.M)
    ball = lambda_ball(Q, p.resolved_H(f.M))
    if exact:
        fit = strong_vertical_beta(f, ball, TUNABLES.corona_lines, TUNABLES.corona_samples)
        beta = fit.beta
    else:
        fits = _fit_rects(f, Q.n, np.array([Q.k]), np.array([Q.l]), ball.radius, thr)
        beta = float(fits[3][0])
        fit = RectFit(float(fits[0][0]), float(fits[1][0]), float(fits[2][0]), beta)
    return Classification("bad" if beta >= thr else "good", beta, thr, fit)


def _fit_rects(f: RugMap, n: int, ks, ls, radius: float, threshold: float):
    side = 2.0 ** -n
    cy = (ks + 0.5) * side
    ct = (ls + 0.5) * side * side
    fits = batch_plane_fit(f, cy, ct, np.full(cy.size, radius), TUNABLES.corona_lines,
                           TUNABLES.corona_samples, polish_above=threshold,
                           polish_below=TUNABLES.polish_ceiling * threshold)
    return fits.frame, fits.a, fits.b, fits.beta


_WORKER: dict = {}


def _worker_chunk(args):
    n, ks, ls, radius, threshold = args
    return _fit_rects(_WORKER["f"], n, ks, ls, radius, threshold)


def _generation_indices(root: ParaRect, d: int):
    ik, il = np.divmod(np.arange(8**d), 4**d)
    return (root.k << d) + ik, (root.l << (2 * d)) + il


def _classify_generation(f, root, d, radius, threshold, pool):
    ks, ls = _generation_indices(root, d)
    n = root.n + d
    chunk = TUNABLES.sweep_chunk
    jobs = [(n, ks[i:i + chunk], ls[i:i + chunk], radius, threshold) for i in range(0, ks.size, chunk)]
    if pool is None:
        parts = [_fit_rects(f, *job) for job in jobs]
    else:
        parts = list(pool.map(_worker_chunk, jobs))
    return tuple(np.concatenate([part[i] for part in parts]) for i in range(4))


# -- decomposition -------------------------------------------------------------

@dataclass
class Generation:
    n: int
    k0: int
    l0: int
    d: int
    status: np.ndarray
    beta: np.ndarray
    frame: np.ndarray
    a: np.ndarray
    b: np.ndarray
    tree: np.ndarray  # tree id, -1 for Bad
    leaf: np.ndarray  # LEAF_* code
    sign: np.ndarray  # +1, -1, 0 undetermined, 2 not computed

    @property
    def angle(self):
        return self.frame - np.arctan(self.a)

    def rect(self, idx: int) -> ParaRect:
        ik, il = divmod(int(idx), 4**self.d)
        return ParaRect(self.n, self.k0 + ik, self.l0 + il)

    def index(self, Q: ParaRect) -> int:
        return (Q.k - self.k0) * 4**self.d + (Q.l - self.l0)

    def fit(self, idx: int) -> RectFit:
        return RectFit(float(self.frame[idx]), float(self.a[idx]), float(self.b[idx]), float(self.beta[idx]))


@dataclass
class Tree:
    tree_id: int
    root: ParaRect
    angle: float  # psi with W_T = W_psi
    signature: str
    _decomp: "CoronaDecomposition" = field(repr=False)

    def _rows(self):
        for g in self._decomp.generations:
            idx = np.nonzero(g.tree == self.tree_id)[0]
            if idx.size:
                yield g, idx

    @property
    def stats(self) -> dict:
        return self._decomp.tree_stats(self.tree_id)

    @property
    def members(self) -> set:
        return {g.rect(i) for g, idx in self._rows() for i in idx}

    @property
    def leaf_reason(self) -> dict:
        out = {}
        for g, idx in self._rows():
            for i in idx[g.leaf[idx] != LEAF_NONE]:
                out[g.rect(i)] = LEAF_NAMES[int(g.leaf[i])]
        return out

    @property
    def leaves(self) -> set:
        return set(self.leaf_reason)

    @property
    def planes(self) -> dict:
        return {g.rect(i): g.fit(i).plane() for g, idx in self._rows() for i in idx}

    @property
    def fits(self) -> dict:
        return {g.rect(i): g.fit(i) for g, idx in self._rows() for i in idx}

    @property
    def plane_W(self) -> VerticalPlane:
        return VerticalPlane(-math.tan(self.angle), 0.0)

    @property
    def depth(self) -> int:
        return self.stats["depth"]

    def member_count(self) -> int:
        return self.stats["members"]

    def leaf_measure(self, reasons) -> float:
        return float(sum(self.stats["leaf_measure"][LEAF_NAMES[r]] for r in reasons))

    def uncovered_measure(self) -> float:
        """|Q(T) minus the union of its (D3) leaves|; cutoff leaves count as uncovered."""
        return self.root.measure - self.leaf_measure((LEAF_BAD_CHILD, LEAF_STEEP))

    def signature_agreement(self) -> tuple[int, int]:
        """(members whose probe signature matches the tree's, members with a determined signature)."""
        st = self.stats
        return (st["plus"], st["plus"] + st["minus"]) if self.signature != "-" else \
            (st["minus"], st["plus"] + st["minus"])


@dataclass
class CoronaDecomposition:
    root: ParaRect
    params: CoronaParams
    M: float
    H: float
    threshold: float
    generations: list
    trees: list = field(default_factory=list)
    packing_report: tuple = (0.0, 0.0)
    tree_types: dict = field(default_factory=dict)
    bvp: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    rug_name: str = ""
    _stats: dict | None = field(default=None, repr=False)

    def tree_stats(self, tree_id: int) -> dict:
        if self._stats is None:
            self._stats = _aggregate_trees(self.generations, len(self.trees))
        st = self._stats
        return {
            "members": int(st["members"][tree_id]),
            "depth": int(st["depth"][tree_id]) + self.root.n - self.trees[tree_id].root.n,
            "leaf_measure": {name: float(st[name][tree_id]) for name in LEAF_NAMES.values()},
            "plus": int(st["plus"][tree_id]),
            "minus": int(st["minus"][tree_id]),
        }

    @property
    def bad(self) -> set:
        return {g.rect(i) for g in self.generations for i in np.nonzero(g.status == BAD)[0]}

    def bad_count(self) -> int:
        return int(sum((g.status == BAD).sum() for g in self.generations))

    def generation(self, n: int) -> Generation:
        return self.generations[n - self.root.n]

    def locate(self, Q: ParaRect) -> tuple[Generation, int]:
        if not contains(self.root, Q) or Q.n - self.root.n >= len(self.generations):
            raise DomainError(f"{Q} is outside the analysed window")
        g = self.generation(Q.n)
        return g, g.index(Q)

    def status_of(self, Q: ParaRect) -> str:
        g, i = self.locate(Q)
        return "good" if g.status[i] == GOOD else "bad"

    def tree_of(self, Q: ParaRect):
        g, i = self.locate(Q)
        tid = int(g.tree[i])
        return None if tid < 0 else self.trees[tid]

    def fit_of(self, Q: ParaRect) -> RectFit:
        g, i = self.locate(Q)
        return g.fit(i)

    def tops(self) -> list:
        return [T.root for T in self.trees]

    def to_dict(self) -> dict:
        gens = []
        for g in self.generations:
            gens.append({
                "n": g.n, "k0": g.k0, "l0": g.l0,
                "status": g.status.tolist(), "beta": g.beta.tolist(),
                "slope": np.abs(np.tan(g.angle)).tolist(),
                "frame": g.frame.tolist(), "a": g.a.tolist(), "b": g.b.tolist(),
                "tree": g.tree.tolist(), "leaf": g.leaf.tolist(), "sign": g.sign.tolist(),
            })
        trees = []
        for T in self.trees:
            trees.append({
                "id": T.tree_id, "root": [T.root.n, T.root.k, T.root.l], "angle": T.angle,
                "signature": T.signature, "members": T.member_count(), "depth": T.depth,
                "type": self.tree_types.get(T.tree_id),
                "bvp": self.bvp.get(T.tree_id),
                "leaf_measure": T.stats["leaf_measure"],
            })
        return {
            "schema_version": SCHEMA_VERSION,
            "rug": self.rug_name,
            "root": [self.root.n, self.root.k, self.root.l],
            "params": self.params.as_dict(),
            "M": self.M, "H": self.H, "threshold": self.threshold,
            "packing": {"C1": self.packing_report[0], "C2": self.packing_report[1]},
            "warnings": list(self.warnings),
            "tunables": TUNABLES.as_dict(),
            "trees": trees,
            "rectangles": gens,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CoronaDecomposition":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise DomainError(f"unsupported corona schema {data.get('schema_version')!r}")
        root = ParaRect(*data["root"])
        gens = []
        for d, g in enumerate(data["rectangles"]):
            gens.append(Generation(
                g["n"], g["k0"], g["l0"], d,
                np.asarray(g["status"], np.int8), np.asarray(g["beta"], float),
                np.asarray(g["frame"], float), np.asarray(g["a"], float), np.asarray(g["b"], float),
                np.asarray(g["tree"], np.int64), np.asarray(g["leaf"], np.int8), np.asarray(g["sign"], np.int8)))
        dec = cls(root, CoronaParams(**data["params"]), data["M"], data["H"], data["threshold"], gens,
                  packing_report=(data["packing"]["C1"], data["packing"]["C2"]),
                  warnings=list(data["warnings"]), rug_name=data["rug"])
        for rec in data["trees"]:
            dec.trees.append(Tree(rec["id"], ParaRect(*rec["root"]), rec["angle"], rec["signature"], dec))
            dec.tree_types[rec["id"]] = rec["type"]
            dec.bvp[rec["id"]] = rec["bvp"]
        return dec


def _aggregate_trees(gens: list, count: int) -> dict:
    out = {key: np.zeros(count) for key in ("members", "plus", "minus", *LEAF_NAMES.values())}
    out["depth"] = np.zeros(count, np.int64)
    for g in gens:
        member = g.tree >= 0
        ids = g.tree[member]
        out["members"] += np.bincount(ids, minlength=count)
        out["plus"] += np.bincount(ids, weights=(g.sign[member] == 1), minlength=count)
        out["minus"] += np.bincount(ids, weights=(g.sign[member] == -1), minlength=count)
        for code, name in LEAF_NAMES.items():
            out[name] += np.bincount(ids, weights=(g.leaf[member] == code) * 8.0**-g.n, minlength=count)
        present = np.bincount(ids, minlength=count) > 0
        out["depth"][present] = np.maximum(out["depth"][present], g.d)
    return out


def _grow_trees(gens: list, Sigma: float):
    """Assign tree ids and leaf codes generation by generation; returns tree (top idx, gen, angle)."""
    tops = []
    depth = len(gens) - 1
    for d, g in enumerate(gens):
        good = g.status == GOOD
        if d == 0:
            inherit = np.zeros(good.shape, bool)
            parent = None
        else:
            ik, il = np.divmod(np.arange(g.status.size), 4**d)
            parent = (ik // 2) * 4 ** (d - 1) + il // 4
            up = gens[d - 1]
            inherit = good & (up.status[parent] == GOOD) & (up.leaf[parent] == LEAF_NONE)
            g.tree[inherit] = up.tree[parent[inherit]]
        angles = g.angle
        for i in np.nonzero(good & ~inherit)[0]:
            g.tree[i] = len(tops)
            tops.append((d, int(i), float(angles[i])))
        # leaves: cutoff, then a Bad child, then a steep plane
        if d == depth:
            g.leaf[good] = LEAF_CUTOFF
            continue
        nxt = gens[d + 1]
        ik, il = np.divmod(np.arange(nxt.status.size), 4 ** (d + 1))
        parent_next = (ik // 2) * 4**d + il // 4
        bad_child = np.zeros(g.status.size, bool)
        np.logical_or.at(bad_child, parent_next, nxt.status == BAD)
        tree_angle = np.array([t[2] for t in tops])
        rel = np.zeros(g.status.size)
        rel[good] = _relative_slope_arr(angles[good], tree_angle[g.tree[good]])
        g.leaf[good & bad_child] = LEAF_BAD_CHILD
        g.leaf[good & ~bad_child & (rel >= Sigma / 2)] = LEAF_STEEP
    return tops


def classify_tree_type(T: Tree, kappa: float) -> str:
    if not 0 < kappa < 0.5:
        raise DomainError("kappa must lie in (0, 1/2)")
    whole = T.root.measure
    if T.uncovered_measure() >= kappa * whole:
        return "i"
    if T.leaf_measure((LEAF_BAD_CHILD,)) >= kappa * whole:
        return "ii"
    if T.leaf_measure((LEAF_STEEP,)) >= (1 - 2 * kappa) * whole:
        return "iii"
    # unreachable when leaves of different reasons tile the top; kept explicit
    return "unclassified"


def _measure_inside(d: CoronaDecomposition, probe: ParaRect, mask_of) -> float:
    total = 0.0
    for g in d.generations:
        if g.n < probe.n:
            continue
        dd = g.n - probe.n
        ik, il = np.divmod(np.arange(g.status.size), 4**g.d)
        inside = ((g.k0 + ik) >> dd == probe.k) & ((g.l0 + il) >> (2 * dd) == probe.l)
        total += float((mask_of(g) & inside).sum()) * 8.0**-g.n
    return total


def verify_packing(d: CoronaDecomposition, probes) -> tuple[float, float]:
    """Max over probes of |bad inside| / |probe| and |tree tops inside| / |probe|."""
    top_masks = {}
    for T in d.trees:
        g, i = d.locate(T.root)
        top_masks.setdefault(g.n, np.zeros(g.status.size, bool))[i] = True
    C1 = C2 = 0.0
    for P in probes:
        d.locate(P)
        C1 = max(C1, _measure_inside(d, P, lambda g: g.status == BAD) / P.measure)
        C2 = max(C2, _measure_inside(d, P, lambda g: top_masks.get(g.n, np.zeros(g.status.size, bool)))
                 / P.measure)
    return C1, C2


# -- F_Q and signatures ----------------------------------------------------------

def _line_constants(f: RugMap, frame, a, b, ys, ts):
    """Midrange c of the plane's line through each sample row.

    Arrays broadcast as (..., lines, samples); frame, a, b carry a trailing
    (1, 1) so each batch entry uses its own plane.
    """
    x, y, t = f.arrays(ys, ts)
    xr, yr, tr = _rot(-frame, x, y, t)
    pt = tr + 0.5 * xr * yr
    r = pt - 0.5 * a * yr * yr - b * yr
    return 0.5 * (r.max(axis=-1) + r.min(axis=-1))


def _rot(theta, x, y, t):
    c, s = np.cos(theta), np.sin(theta)
    return c * x - s * y, s * x + c * y, t


def _fit_params(fit):
    if isinstance(fit, PlaneFit):
        return fit.frame, fit.plane.a, fit.plane.b, fit.ball
    return fit.frame, fit.a, fit.b, None


@dataclass(frozen=True)
class FQMap:
    """w -> (f_2(w), c_{Q, l_t}) in the coordinates of R_{-frame} f.

    c for the line through w is the midrange constant of the fitted plane on
    that line, computed on demand from samples over the ball's y-range.
    """

    f: RugMap
    frame: float
    a: float
    b: float
    ball: ParaBall
    samples: int

    def second(self, y, t):
        x, yy, tt = self.f.arrays(y, t)
        return _rot(-self.frame, x, yy, tt)[1]

    def line_constant(self, t):
        t = np.atleast_1d(np.asarray(t, float))
        y0, y1, t0, t1 = self.ball.bounds()
        slack = 1e-12 * max(1.0, abs(t0), abs(t1))
        if np.any((t < t0 - slack) | (t > t1 + slack)):
            raise LineUnavailable("queried line misses the fitted ball")
        ys = np.linspace(y0, y1, self.samples)
        Y = np.broadcast_to(ys, t.shape + (self.samples,))
        T = np.broadcast_to(t[..., None], Y.shape)
        return _line_constants(self.f, self.frame, self.a, self.b, Y, T)

    def __call__(self, y, t):
        y, t = np.broadcast_arrays(np.asarray(y, float), np.asarray(t, float))
        uniq, inv = np.unique(t, return_inverse=True)
        c = self.line_constant(uniq)[inv.reshape(t.shape)]
        return self.second(y, t), c

    def point(self, w: ParaPoint) -> ParaPoint:
        a, c = self(w.y, w.t)
        return ParaPoint(float(a), float(c))


def fq_map(f: RugMap, Q: ParaRect, fit, H: float | None = None, samples: int | None = None) -> FQMap:
    frame, a, b, ball = _fit_params(fit)
    if ball is None:
        if H is None:
            raise DomainError("a sweep fit needs H to locate its ball")
        ball = lambda_ball(Q, H)
    return FQMap(f, float(frame), float(a), float(b), ball, samples or TUNABLES.quadric_samples)


def _probe_lines(Q: ParaRect, B: float):
    j = np.arange(-int(B), int(B) + 1)
    return Q.center.t + j * Q.side**2


def _signs_from_constants(c):
    diff = np.diff(c, axis=-1)
    up = (diff > 0).all(axis=-1)
    down = (diff < 0).all(axis=-1)
    return np.where(up, 1, np.where(down, -1, 0)).astype(np.int8)


def signature(f: RugMap, Q: ParaRect, fit, p: CoronaParams) -> str:
    """'+' when t -> c_{Q, l_t} increases along lines l(Q)^2 apart in BQ, '-' when it decreases."""
    F = fq_map(f, Q, fit, H=p.resolved_H(f.M), samples=TUNABLES.corona_samples)
    c = F.line_constant(_probe_lines(Q, p.B))
    s = int(_signs_from_constants(c))
    if s == 0:
        raise SignatureUndetermined(f"mixed vertical order on {Q}")
    return "+" if s > 0 else "-"


def _batch_signatures(f: RugMap, g: Generation, idx, H: float, B: float):
    side = 2.0 ** -g.n
    out = np.empty(idx.size, np.int8)
    v = np.linspace(-1.0, 1.0, TUNABLES.corona_samples)
    j = np.arange(-int(B), int(B) + 1)
    step = max(1, TUNABLES.sweep_chunk // 4)
    for lo in range(0, idx.size, step):
        sel = idx[lo:lo + step]
        ik, il = np.divmod(sel, 4**g.d)
        cy = (g.k0 + ik + 0.5) * side
        ct = (g.l0 + il + 0.5) * side * side
        Y = cy[:, None, None] + H * side * v[None, None, :] + 0.0 * j[None, :, None]
        T = ct[:, None, None] + j[None, :, None] * side * side + 0.0 * v[None, None, :]
        col = (slice(None), None, None)
        c = _line_constants(f, g.frame[sel][col], g.a[sel][col], g.b[sel][col], Y, T)
        out[lo:lo + step] = _signs_from_constants(c)
    return out


def plane_fit_in_frame(fit: RectFit, angle: float) -> RectFit:
    """The same plane re-expressed in the coordinates of R_{-angle} f."""
    V = hc.rotate_plane(fit.frame - angle, VerticalPlane(fit.a, fit.b))
    if V is None:
        raise DomainError("plane is orthogonal to the requested frame")
    return RectFit(angle, V.a, V.b, fit.beta)


# -- the sweep ------------------------------------------------------------------

def build_corona(f: RugMap, root: ParaRect, p: CoronaParams, probes=(), jobs: int = 1,
                 signatures: bool = True, bvp: bool = True, bvp_limit: int = 64) -> CoronaDecomposition:
    errors, warns = p.hierarchy(f.M)
    if errors:
        raise DomainError("; ".join(errors))
    H = p.resolved_H(f.M)
    thr = p.bad_threshold(f.M)
    pool = None
    if jobs > 1:
        _WORKER["f"] = f
        pool = ProcessPoolExecutor(jobs, mp_context=multiprocessing.get_context("fork"))
    gens = []
    try:
        for d in range(p.depth + 1):
            n = root.n + d
            frame, a, b, beta = _classify_generation(f, root, d, H * 2.0**-n, thr, pool)
            size = beta.size
            gens.append(Generation(n, root.k << d, root.l << (2 * d), d,
                                   np.where(beta >= thr, BAD, GOOD).astype(np.int8), beta, frame, a, b,
                                   np.full(size, -1, np.int64), np.zeros(size, np.int8),
                                   np.full(size, 2, np.int8)))
    finally:
        if pool is not None:
            pool.shutdown()
            _WORKER.clear()
    tops = _grow_trees(gens, p.Sigma)
    dec = CoronaDecomposition(root, p, f.M, H, thr, gens, warnings=list(warns), rug_name=f.name)
    if signatures:
        for g in gens:
            idx = np.nonzero(g.status == GOOD)[0]
            if idx.size:
                g.sign[idx] = _batch_signatures(f, g, idx, H, p.B)
    for tid, (d, i, angle) in enumerate(tops):
        top = gens[d].rect(i)
        s = int(gens[d].sign[i])
        sig = {1: "+", -1: "-"}.get(s, "?")
        dec.trees.append(Tree(tid, top, angle, sig, dec))
    for T in dec.trees:
        kind = classify_tree_type(T, p.kappa)
        dec.tree_types[T.tree_id] = kind
        if kind == "iii":
            dec.warnings.append(f"tree {T.tree_id} at {T.root.key()} is of type (iii)")
        if signatures:
            agree, total = T.signature_agreement()
            if T.signature == "?" or agree != total:
                dec.warnings.append(f"tree {T.tree_id}: signature agreement {agree}/{total}")
    if bvp:
        from .projections_winding import bvp_check

        order = sorted(dec.trees, key=lambda T: (T.root.n, T.tree_id))
        for T in order[bvp_limit:]:
            dec.bvp[T.tree_id] = {"skipped": True}
        for T in order[:bvp_limit]:
            res = bvp_check(f, T.root, theta_grid=8, resolution=64)
            dec.bvp[T.tree_id] = {"theta": res.theta, "ratio": res.measure / T.root.measure,
                                  "passed": bool(res.passed)}
            if not res.passed:
                dec.warnings.append(f"tree {T.tree_id}: big vertical projection not certified")
    dec.packing_report = verify_packing(dec, [root, *probes])
    for msg in dec.warnings:
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    return dec


# -- quasi-isometric embedding audits -------------------------------------------

@dataclass
class SubAudit:
    checked: int = 0
    violations: int = 0
    worst: float = 0.0  # largest amount by which the conclusion failed, 0 if none

    def record(self, excess):
        excess = np.asarray(excess, float)
        self.checked += excess.size
        bad = excess > 0
        self.violations += int(bad.sum())
        if bad.any():
            self.worst = max(self.worst, float(excess[bad].max()))


@dataclass
class QIEReport:
    M: float
    eps: float
    pairs: int
    lower_violation: float
    upper_violation: float
    violations: int
    horizontal: bool
    sub: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    @property
    def sub_violations(self) -> int:
        return sum(s.violations for s in self.sub.values())


def _float_slack(*scales) -> float:
    return 1e-12 * max(1.0, *(float(np.max(np.abs(s))) for s in scales))


def _audit_interval(fn, lo, hi, M, eps, pairs, rng, report: QIEReport, grid: int = 2001):
    x = np.linspace(lo, hi, grid)
    fx = np.asarray(fn(x), float)
    slack = _float_slack(x, fx)
    i, j = rng.integers(0, grid, (2, pairs))
    dx, df = np.abs(x[i] - x[j]), np.abs(fx[i] - fx[j])
    low = dx / M - eps - df
    high = df - M * dx - eps
    report.lower_violation = max(report.lower_violation, float(low.max()))
    report.upper_violation = max(report.upper_violation, float(high.max()))
    report.violations += int(((low > slack) | (high > slack)).sum())
    # 2 eps M monotone: the sign of f(b) - f(a) is the same for every far pair
    a, b = np.minimum(i, j), np.maximum(i, j)
    far = (x[b] - x[a]) > 2 * eps * M + slack
    sgn = np.sign(fx[b] - fx[a])[far]
    mono = report.sub.setdefault("monotone", SubAudit())
    if sgn.size:
        major = 1.0 if (sgn > 0).sum() >= (sgn < 0).sum() else -1.0
        mono.record(np.where(sgn == major, 0.0, 1.0))
    # eps dense: every value between f(a) and f(b) is within eps of f([a, b]);
    # the sampled image adds at most half the largest jump between neighbours
    dense = report.sub.setdefault("dense", SubAudit())
    gap_slack = 0.5 * float(np.abs(np.diff(fx)).max(initial=0.0))
    for a0, b0 in zip(a[:200], b[:200]):
        seg = np.sort(fx[a0:b0 + 1])
        lo_v, hi_v = sorted((fx[a0], fx[b0]))
        inside = seg[(seg >= lo_v) & (seg <= hi_v)]
        pts = np.concatenate([[lo_v], inside, [hi_v]])
        dense.record([0.5 * float(np.diff(pts).max(initial=0.0)) - eps - gap_slack - slack])
    # betweenness: b in (a + 2 M eps, c - 2 M eps) puts f(b) strictly between
    btw = report.sub.setdefault("between", SubAudit())
    k = rng.integers(0, grid, (3, pairs))
    k.sort(axis=0)
    ia, ib, ic = k
    ok = (x[ib] - x[ia] > 2 * M * eps + slack) & (x[ic] - x[ib] > 2 * M * eps + slack)
    lo_v = np.minimum(fx[ia], fx[ic])[ok]
    hi_v = np.maximum(fx[ia], fx[ic])[ok]
    mid = fx[ib][ok]
    btw.record(np.where((mid > lo_v) & (mid < hi_v), 0.0, 1.0))


def _is_horizontal(F, y0, y1, t0, t1) -> bool:
    ys = np.linspace(y0, y1, 9)
    ts = np.linspace(t0, t1, 5)
    Y, T = np.meshgrid(ys, ts)
    _, c = F(Y, T)
    spread = np.ptp(c, axis=1).max()
    return bool(spread <= _float_slack(c))


def _audit_plane(F, bounds, M, eps, pairs, rng, report: QIEReport):
    y0, y1, t0, t1 = bounds
    ya, yb = rng.uniform(y0, y1, (2, pairs))
    ta, tb = rng.uniform(t0, t1, (2, pairs))
    # half the pairs share a line or a column so both directions are exercised
    q = pairs // 4
    tb[:q] = ta[:q]
    yb[q:2 * q] = ya[q:2 * q]
    pa, ca = F(ya, ta)
    pb, cb = F(yb, tb)
    dw = hc.dpar_arr(ya, ta, yb, tb)
    di = hc.dpar_arr(pa, ca, pb, cb)
    slack = _float_slack(pa, ca, ya, ta)
    low = dw / M - eps - di
    high = di - M * dw - eps
    report.lower_violation = max(report.lower_violation, float(low.max()))
    report.upper_violation = max(report.upper_violation, float(high.max()))
    report.violations += int(((low > slack) | (high > slack)).sum())
    report.horizontal = _is_horizontal(F, y0, y1, t0, t1)
    if not report.horizontal:
        return
    yspan = y1 - y0
    # induced map t -> pi_2 F on the root metric, needs |I| > 2 M^2 sqrt|J| + 4 M eps
    induced = report.sub.setdefault("induced", SubAudit())
    if yspan > 2 * M * M * math.sqrt(t1 - t0) + 4 * M * eps:
        ya2 = np.full(pairs, 0.5 * (y0 + y1))
        _, c1 = F(ya2, ta)
        _, c2 = F(ya2, tb)
        ds = np.sqrt(np.abs(ta - tb))
        dc = np.sqrt(np.abs(c1 - c2))
        induced.record(np.maximum(ds / M - 2 * eps - dc, dc - M * ds - 2 * eps) - slack)
        # vertical monotonicity at scale 4 M eps in the root metric
        vert = report.sub.setdefault("vertical", SubAudit())
        far = ds > 4 * M * eps + slack
        sg = np.sign((c2 - c1) * (tb - ta))[far]
        if sg.size:
            major = 1.0 if (sg > 0).sum() >= (sg < 0).sum() else -1.0
            vert.record(np.where(sg == major, 0.0, 1.0))
    # horizontal separation for pairs with a large y gap
    sep = report.sub.setdefault("separation", SubAudit())
    gap = np.abs(yb - ya)
    ok = gap > np.maximum(8 * M * eps, 4 * M * M * np.sqrt(np.abs(ta - tb))) + slack
    sep.record((gap / (2 * M) - np.abs(pb - pa))[ok] - slack)


def qie_audit(mapping, domain, M: float, eps: float, pairs: int = 1000, seed: int = 0) -> QIEReport:
    """Check M^-1 d - eps <= d'(F(x), F(y)) <= M d + eps on random pairs.

    ``domain`` is an interval (lo, hi) for real maps, or a ParaBall or a
    rectangle (y0, y1, t0, t1) for maps W -> W given as F(y, t) -> (y', t')
    on arrays.  Interval maps also get the
    monotonicity, density and betweenness audits; horizontal maps of the plane
    get the induced-map, vertical-monotonicity and separation audits.  The
    sub-audits check consequences of the QIE property, so they are only
    meaningful when the main check passes.
    """
    if pairs < 100:
        raise DomainError("qie_audit needs at least 100 pairs")
    rng = np.random.default_rng(seed)
    report = QIEReport(M, eps, pairs, -math.inf, -math.inf, 0, False)
    if isinstance(domain, ParaBall):
        _audit_plane(mapping, domain.bounds(), M, eps, pairs, rng, report)
    elif len(domain) == 4:
        y0, y1, t0, t1 = (float(v) for v in domain)
        if not (y1 > y0 and t1 > t0):
            raise DomainError("empty rectangle")
        _audit_plane(mapping, (y0, y1, t0, t1), M, eps, pairs, rng, report)
    else:
        lo, hi = (float(v) for v in domain)
        if not hi > lo:
            raise DomainError("empty interval")
        _audit_interval(mapping, lo, hi, M, eps, pairs, rng, report)
    return report
