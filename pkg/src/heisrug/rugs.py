"""Built-in rug families and the bilipschitz audit.

Most families are "flags": for a C^{1,1} function g on the line,

    f(y, t) = (g'(y), y, g(y) + t - y g'(y) / 2),

whose horizontal lines {t = const} go to horizontal curves and whose vertical
projection is (y, g(y) + t).  If g' is kappa-Lipschitz then f is
M-bilipschitz with M = max(sqrt(1 + kappa^2), 1 + sqrt(kappa / 2)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import heis_core as hc
from .flatness import RugMap
from .heis_core import DomainError


def flag_constant(kappa: float) -> float:
    return max(math.sqrt(1.0 + kappa * kappa), 1.0 + math.sqrt(kappa / 2.0))


def _flag(slope_fn, primitive_fn):
    def evaluate(y, t):
        gd = slope_fn(y)
        return gd, y + 0.0 * t, primitive_fn(y) + t - 0.5 * y * gd

    return evaluate


def identity_rug() -> RugMap:
    return RugMap(lambda y, t: (np.zeros(np.shape(y)), y + 0.0 * t, t + 0.0 * y), 1.0, "identity")


def plane_rug(a: float, b: float, c: float) -> RugMap:
    """V(y, t) = (0, y, q(y) + t) . (q'(y), 0, 0) for q = a y^2/2 + b y + c."""

    def evaluate(y, t):
        return a * y + b + 0.0 * t, y + 0.0 * t, 0.5 * b * y + c + t

    return RugMap(evaluate, math.sqrt(1.0 + a * a), f"plane({a:g},{b:g},{c:g})")


def sine_rug(amplitude: float, frequency: float) -> RugMap:
    """Flag over g(y) = -(amplitude / frequency) cos(frequency y)."""
    if frequency <= 0:
        raise DomainError("frequency must be positive")
    lam, om = amplitude, frequency
    evaluate = _flag(lambda y: lam * np.sin(om * y), lambda y: -(lam / om) * np.cos(om * y))
    return RugMap(evaluate, flag_constant(abs(lam) * om), f"sine({lam:g},{om:g})")


def piecewise_rug(breaks, slopes, offset: float = 0.0) -> RugMap:
    """Flag whose g'' equals slopes[i] on [breaks[i-1], breaks[i]); g'(0) = offset, g(0) = 0.

    Two slopes and one break give two planes glued along a vertical line.
    """
    breaks = np.asarray(breaks, dtype=float)
    slopes = np.asarray(slopes, dtype=float)
    if slopes.size != breaks.size + 1:
        raise DomainError("need one more slope than breaks")
    knots = np.concatenate([[-np.inf], breaks, [np.inf]])

    def gd(y):
        y = np.asarray(y, float)
        out = np.full(y.shape, offset)
        for i, s in enumerate(slopes):
            # integral of g'' over [0, y] restricted to this piece
            a0 = np.clip(0.0, knots[i], knots[i + 1])
            a1 = np.clip(y, knots[i], knots[i + 1])
            out = out + s * (a1 - a0)
        return out

    def g(y):
        y = np.asarray(y, float)
        out = offset * y
        for i, s in enumerate(slopes):
            lo, hi = knots[i], knots[i + 1]
            a0 = np.clip(0.0, lo, hi)
            a1 = np.clip(y, lo, hi)
            # int_0^y s * (clip(u) - a0) du, split at the piece boundaries
            out = out + s * (0.5 * (a1 - a0) ** 2 + (a1 - a0) * (y - a1))
        return out

    kappa = float(np.abs(slopes).max())
    return RugMap(_flag(gd, g), flag_constant(kappa), f"piecewise({breaks.tolist()},{slopes.tolist()})")


def translated_rug(inner: RugMap, g) -> RugMap:
    gx, gy, gt = g

    def evaluate(y, t):
        return hc.mul_xyt(gx, gy, gt, *inner.evaluate_arrays(y, t))

    return RugMap(evaluate, inner.M, f"translated({inner.name})")


def rotated_rug(inner: RugMap, theta: float) -> RugMap:
    def evaluate(y, t):
        return hc.rotate_xyt(theta, *inner.evaluate_arrays(y, t))

    return RugMap(evaluate, inner.M, f"rotated({inner.name},{theta:g})")


def reflected_rug(inner: RugMap) -> RugMap:
    """Compose with the automorphism (x, y, t) -> (x, -y, -t)."""

    def evaluate(y, t):
        x, yy, tt = inner.evaluate_arrays(y, t)
        return x, -yy, -tt

    return RugMap(evaluate, inner.M, f"reflected({inner.name})")


def dilated_domain_rug(inner: RugMap, y0: float, t0: float, scale: float) -> RugMap:
    """w -> delta_{1/scale} f(y0 + scale y, t0 + scale^2 t); same bilipschitz constant."""

    def evaluate(y, t):
        x, yy, tt = inner.evaluate_arrays(y0 + scale * y, t0 + scale * scale * t)
        return x / scale, yy / scale, tt / (scale * scale)

    return RugMap(evaluate, inner.M, f"rescaled({inner.name})")


@dataclass(frozen=True)
class RugSpec:
    family: str
    params: dict = field(default_factory=dict)
    inner: "RugSpec | None" = None

    def build(self) -> RugMap:
        p = self.params
        fam = self.family
        if fam == "identity":
            return identity_rug()
        if fam == "plane":
            return plane_rug(float(p.get("a", 0.0)), float(p.get("b", 0.0)), float(p.get("c", 0.0)))
        if fam == "sine_perturbed":
            return sine_rug(float(p.get("amplitude", 0.05)), float(p.get("frequency", DEFAULT_SINE_FREQUENCY)))
        if fam == "composite":
            return piecewise_rug(p.get("breaks", [0.5]), p.get("slopes", [-1.5, 1.5]), float(p.get("offset", 0.0)))
        if fam in ("translated", "rotated", "reflected"):
            if self.inner is None:
                raise DomainError(f"{fam} rug needs an inner rug")
            inner = self.inner.build()
            if fam == "translated":
                return translated_rug(inner, tuple(float(v) for v in p.get("g", (0.0, 0.0, 0.0))))
            if fam == "rotated":
                return rotated_rug(inner, float(p.get("theta", 0.0)))
            return reflected_rug(inner)
        raise DomainError(f"unknown rug family {fam!r}")

    def as_dict(self) -> dict:
        out = {"family": self.family, "params": dict(self.params)}
        if self.inner is not None:
            out["inner"] = self.inner.as_dict()
        return out


DEFAULT_SINE_FREQUENCY = 3e-3


def builtin_family() -> list[RugMap]:
    """The rugs every family-wide calibration and audit runs over."""
    return [
        identity_rug(),
        plane_rug(0.5, 0.3, -0.2),
        plane_rug(-2.0, 0.1, 0.4),
        sine_rug(0.05, DEFAULT_SINE_FREQUENCY),
        sine_rug(0.1, 1.0),
        sine_rug(0.3, 2.0),
        piecewise_rug([0.5], [-1.5, 1.5]),
        rotated_rug(plane_rug(1.0, 0.0, 0.0), 0.7),
        translated_rug(sine_rug(0.2, 1.5), (0.3, -0.4, 0.2)),
    ]


def audit_bilipschitz(f: RugMap, M: float | None = None, pairs: int = 4000, seed: int = 0,
                      extent: float = 4.0, slack: float = 1e-9):
    """Empirical check of M^-1 d_par <= d(f(w1), f(w2)) <= M d_par on random pairs.

    Pairs mix all scales: one endpoint uniform in [-extent, extent]^2, the other
    displaced by a log-uniform parabolic step.  Returns (passed, low, high).
    """
    M = f.M if M is None else M
    rng = np.random.default_rng(seed)
    y1 = rng.uniform(-extent, extent, pairs)
    t1 = rng.uniform(-extent, extent, pairs)
    step = 10.0 ** rng.uniform(-4, math.log10(2 * extent), pairs)
    ang = rng.uniform(0.0, 2.0 * math.pi, pairs)
    y2 = y1 + step * np.cos(ang)
    t2 = t1 + np.sign(np.sin(ang)) * (step * np.sin(ang)) ** 2
    d_dom = hc.dpar_arr(y1, t1, y2, t2)
    p = f.arrays(y1, t1)
    q = f.arrays(y2, t2)
    d_img = hc.dist_xyt(*p, *q)
    ratio = d_img / d_dom
    low, high = float(ratio.min()), float(ratio.max())
    passed = high <= M * (1 + slack) and low >= (1 - slack) / M
    return passed, low, high
