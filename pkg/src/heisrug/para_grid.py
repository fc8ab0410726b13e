"""Dyadic parabolic rectangles, dyadic horizontal lines and their corner combinatorics.

A rectangle (n, k, l) is [k 2^-n, (k+1) 2^-n) x [l 4^-n, (l+1) 4^-n).  All grid
predicates are exact: rectangles and lines are integer triples and points are
compared as Fractions.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Iterator

from .heis_core import DomainError, ParaPoint

MAX_GENERATION = 30


def _check_gen(n: int) -> None:
    if abs(n) > MAX_GENERATION:
        raise DomainError(f"generation {n} outside |n| <= {MAX_GENERATION}")


def _pow2(e: int) -> Fraction:
    return Fraction(2) ** e


@dataclass(frozen=True, order=True)
class ParaRect:
    n: int
    k: int
    l: int

    def __post_init__(self):
        _check_gen(self.n)

    @property
    def side(self) -> float:
        return 2.0 ** -self.n

    @property
    def measure(self) -> float:
        return 8.0 ** -self.n

    @property
    def y_range(self) -> tuple[Fraction, Fraction]:
        h = _pow2(-self.n)
        return self.k * h, (self.k + 1) * h

    @property
    def t_range(self) -> tuple[Fraction, Fraction]:
        h = _pow2(-2 * self.n)
        return self.l * h, (self.l + 1) * h

    @property
    def center(self) -> ParaPoint:
        y0, y1 = self.y_range
        t0, t1 = self.t_range
        return ParaPoint(float((y0 + y1) / 2), float((t0 + t1) / 2))

    def bounds(self) -> tuple[float, float, float, float]:
        y0, y1 = self.y_range
        t0, t1 = self.t_range
        return float(y0), float(y1), float(t0), float(t1)

    def key(self) -> str:
        return f"{self.n},{self.k},{self.l}"


@dataclass(frozen=True)
class DyadicLine:
    """The horizontal line R x {k 2^-n} of the parabolic plane."""

    n: int
    k: int

    def __post_init__(self):
        _check_gen(self.n)

    @property
    def height(self) -> Fraction:
        return self.k * _pow2(-self.n)

    @property
    def t(self) -> float:
        return float(self.height)

    def up(self) -> "DyadicLine":
        return DyadicLine(self.n, self.k + 1)

    def down(self) -> "DyadicLine":
        return DyadicLine(self.n, self.k - 1)

    def in_generation(self, m: int) -> bool:
        """True when the line also belongs to L_m."""
        return (self.height * _pow2(m)).denominator == 1

    def same_set(self, other: "DyadicLine") -> bool:
        return self.height == other.height

    def key(self) -> str:
        return f"{self.n},{self.k}"


@dataclass(frozen=True)
class ParaBall:
    """Closed d_par ball: the Euclidean rectangle [y-r, y+r] x [t-r^2, t+r^2]."""

    center: ParaPoint
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise DomainError(f"ball radius must be positive, got {self.radius}")

    def bounds(self) -> tuple[float, float, float, float]:
        c, r = self.center, self.radius
        return c.y - r, c.y + r, c.t - r * r, c.t + r * r


def parent(Q: ParaRect) -> ParaRect:
    return ParaRect(Q.n - 1, Q.k // 2, Q.l // 4)


def children(Q: ParaRect) -> list[ParaRect]:
    return [ParaRect(Q.n + 1, 2 * Q.k + i, 4 * Q.l + j) for i in range(2) for j in range(4)]


def descendants(Q: ParaRect, generation: int) -> Iterator[ParaRect]:
    """All rectangles of a given generation inside Q, in (k, l) order."""
    d = generation - Q.n
    if d < 0:
        raise DomainError("generation above the rectangle")
    for k in range(Q.k << d, (Q.k + 1) << d):
        for l in range(Q.l << (2 * d), (Q.l + 1) << (2 * d)):
            yield ParaRect(generation, k, l)


def contains(outer: ParaRect, inner: ParaRect) -> bool:
    d = inner.n - outer.n
    if d < 0:
        return False
    return (inner.k >> d) == outer.k and (inner.l >> (2 * d)) == outer.l


def disjoint_or_nested(Q1: ParaRect, Q2: ParaRect) -> str:
    if contains(Q1, Q2) or contains(Q2, Q1):
        return "nested"
    return "disjoint"


def lambda_ball(Q: ParaRect, lam: float) -> ParaBall:
    if not lam > 0:
        raise DomainError(f"dilation factor must be positive, got {lam}")
    return ParaBall(Q.center, lam * Q.side)


def corners_exact(Q: ParaRect) -> list[tuple[Fraction, Fraction]]:
    y0, y1 = Q.y_range
    t0, t1 = Q.t_range
    return [(y0, t0), (y1, t0), (y0, t1), (y1, t1)]


def corners(Q: ParaRect) -> list[ParaPoint]:
    return [ParaPoint(float(y), float(t)) for y, t in corners_exact(Q)]


def ceil_half(n: int) -> int:
    return -((-n) // 2)


def edge_line_of(Q: ParaRect, n: int) -> DyadicLine:
    """A line of L_n carrying a horizontal edge of Q, Q of generation ceil(n/2).

    For even n both edges qualify and the lower one is returned.
    """
    if Q.n != ceil_half(n):
        raise DomainError(f"rectangle generation {Q.n} is not ceil({n}/2)")
    for row in (Q.l, Q.l + 1):
        height = row * _pow2(-2 * Q.n)
        scaled = height * _pow2(n)
        if scaled.denominator == 1:
            return DyadicLine(n, int(scaled))
    raise AssertionError("no horizontal edge on L_n")  # unreachable by parity


def corner_case(n: int, line: DyadicLine) -> str:
    """Case label a-e of the corner lemma for a line of L_n."""
    if n % 2 == 0:
        if not line.in_generation(n - 1):
            return "a"
        if not line.in_generation(n - 2):
            return "b"
        return "c"
    return "e" if line.in_generation(n - 1) else "d"


def _as_fraction_point(w) -> tuple[Fraction, Fraction]:
    if isinstance(w, ParaPoint):
        return Fraction(w.y), Fraction(w.t)
    y, t = w
    return Fraction(y), Fraction(t)


def guaranteed_edge_heights(n: int, line: DyadicLine, parent_bottom: Fraction) -> list[Fraction]:
    """Heights that the corner lemma asserts carry an edge of the parent rectangle."""
    h = _pow2(-n)
    ell = line.height
    case = corner_case(n, line)
    if case == "a":
        if ell - parent_bottom == h:
            return [ell - h, ell + 3 * h]
        return [ell + h, ell - 3 * h]
    if case == "b":
        return [ell - 2 * h, ell + 2 * h]
    if case == "d":
        return [ell - h, ell + h]
    return [ell]


def parent_corner_lines(lines: Iterable[DyadicLine], w, Q: ParaRect | None = None) -> tuple[DyadicLine, ...]:
    """Lines among (l2, l4) carrying a corner of the dyadic parent of Q.

    ``lines`` are five consecutive lines of L_n with l2, l4 in L_(n-1); ``w`` is a
    corner of Q in D_ceil(n/2) lying on one of them.  When Q is omitted the
    rectangle having w as its upper-right corner is used (the lowest (k, l)).
    """
    lines = tuple(lines)
    if len(lines) != 5:
        raise DomainError("expected five consecutive lines")
    n = lines[0].n
    for i, ln in enumerate(lines):
        if ln.n != n:
            raise DomainError("lines must share a generation")
        if i and ln.k != lines[i - 1].k + 1:
            raise DomainError("lines must be consecutive")
    if not (lines[1].in_generation(n - 1) and lines[3].in_generation(n - 1)):
        raise DomainError("second and fourth lines must belong to L_(n-1)")
    m = ceil_half(n)
    wy, wt = _as_fraction_point(w)
    on = [ln for ln in lines if ln.height == wt]
    sy, st = wy * _pow2(m), wt * _pow2(2 * m)
    if not on or sy.denominator != 1 or st.denominator != 1:
        raise DomainError("w is not a generation-ceil(n/2) corner on the given lines")
    if Q is None:
        Q = ParaRect(m, int(sy) - 1, int(st) - 1)
    elif Q.n != m or (wy, wt) not in corners_exact(Q):
        raise DomainError("w is not a corner of Q")
    Qh = parent(Q)
    bottom, top = Qh.t_range
    edges = {bottom, top}
    picked = tuple(ln for ln in (lines[1], lines[3]) if ln.height in edges)
    window = {lines[1].height, lines[3].height}
    lemma = {e for e in guaranteed_edge_heights(n, on[0], bottom) if e in window}
    if not lemma <= {ln.height for ln in picked} or not picked:
        raise AssertionError("corner lemma violated")  # would indicate a grid bug
    return picked
