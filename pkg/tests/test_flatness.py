import math

import numpy as np
import pytest

import oracles
from heisrug import heis_core as hc
from heisrug.flatness import (RugMap, alpha_coeff, ball_grid, carleson_sum, fit_horizontal_line,
                              horizontal_beta, ruler_coeff, strong_vertical_beta)
from heisrug.heis_core import DomainError, HorizontalLine, HPoint, ParaPoint
from heisrug.para_grid import ParaBall, ParaRect, lambda_ball
from heisrug.rugs import (audit_bilipschitz, builtin_family, dilated_domain_rug, identity_rug, plane_rug,
                          rotated_rug, sine_rug)
from heisrug.tunables import TUNABLES

UNIT_BALL = ParaBall(ParaPoint(0.0, 0.0), 1.0)


def line_samples(L, ys):
    return [hc.line_point(L, float(y)) for y in ys]


def test_fit_recovers_exact_line():
    # dyadic samples keep every coordinate exact, so zero error is representable
    fit = fit_horizontal_line(line_samples(HorizontalLine(1, 2, 3), np.linspace(-1, 2, 13)))
    assert fit.sup_err <= 1e-9
    assert (fit.line.a, fit.line.b, fit.line.c) == pytest.approx((1, 2, 3), abs=1e-6)


def test_fit_through_two_points():
    p = HPoint(0.5, -1.0, 2.0)
    # q = p . (h, k, 0) is joined to p by a horizontal segment
    q = hc.group_mul(p, HPoint(-0.75, 1.5, 0.0))
    fit = fit_horizontal_line([p, q])
    assert fit.sup_err <= 1e-9


def test_fit_of_rounded_data_sits_at_the_precision_floor():
    # non-dyadic samples are rounded in t; the metric square-roots that to ~1e-8
    fit = fit_horizontal_line(line_samples(HorizontalLine(1, 2, 3), np.linspace(-1, 2, 12)))
    assert fit.sup_err <= 1e-7


def test_fit_needs_two_points():
    with pytest.raises(DomainError):
        fit_horizontal_line([HPoint(0, 0, 0)])


def test_fit_with_outlier_matches_grid_minimax():
    pts = line_samples(HorizontalLine(0, 0, 0), np.linspace(-1, 1, 9)) + [HPoint(0.0, 0.3, 0.01)]
    fit = fit_horizontal_line(pts)
    oracle, _ = oracles.minimax_line_fit([p.as_tuple() for p in pts])
    assert fit.sup_err == pytest.approx(oracle, rel=0.1)
    # the report is witnessed by the returned line
    d = max(hc.dist_to_line(p, fit.line) for p in pts)
    assert fit.sup_err == pytest.approx(d, rel=1e-9, abs=1e-12)
    assert fit.sup_err <= fit.surrogate_err


def test_fit_handles_x_parallel_data():
    L = hc.XParallelLine(1.0, 0.5)
    pts = [HPoint(s, 1.0, 0.5 - 0.5 * s) for s in np.linspace(-1, 1, 9)]
    fit = fit_horizontal_line(pts)
    assert fit.sup_err <= 1e-9
    assert fit.line == L


def test_horizontal_beta_zero_on_line():
    assert horizontal_beta(line_samples(HorizontalLine(0.375, -1, 2), np.linspace(0, 1, 9)), 1.0) <= 1e-9


def lifted_arc(radius, s0, s1, count=17):
    s = np.linspace(s0, s1, count)
    return np.column_stack([radius * np.cos(s), radius * np.sin(s), 0.5 * radius**2 * s])


def test_horizontal_beta_dilation_invariant():
    arc = lifted_arc(1.0, 0.0, 0.5)
    beta = horizontal_beta(arc, 0.5)
    scaled = np.column_stack([3 * arc[:, 0], 3 * arc[:, 1], 9 * arc[:, 2]])
    assert horizontal_beta(scaled, 1.5) == pytest.approx(beta, rel=1e-9)


def test_horizontal_beta_of_circle_arc_matches_grid_minimax():
    arc = lifted_arc(1.0, 0.0, 0.5)
    oracle, _ = oracles.minimax_line_fit(arc)
    assert horizontal_beta(arc, 0.5) == pytest.approx(oracle / 0.5, rel=0.1)


def test_ruler_zero_on_flat_rugs():
    assert ruler_coeff(identity_rug(), UNIT_BALL) <= 1e-9
    for a in (0.0, 0.5, -2.0):
        assert ruler_coeff(plane_rug(a, 0.25, -0.125), UNIT_BALL) <= 1e-9
        # rounded coefficients: bounded by the square-root precision floor
        assert ruler_coeff(plane_rug(a, 0.3, -0.1), UNIT_BALL) <= 1e-7
    with pytest.raises(DomainError):
        ruler_coeff(identity_rug(), UNIT_BALL, lines=2)


def test_ruler_of_sine_matches_grid_minimax():
    f = sine_rug(0.1, 1.0)
    ts, ys = ball_grid(UNIT_BALL, 5, 9)
    worst = 0.0
    for t in ts:
        pts = np.column_stack(f.arrays(ys, np.full_like(ys, t)))
        worst = max(worst, oracles.minimax_line_fit(pts)[0])
    rho = ruler_coeff(f, UNIT_BALL)
    assert rho > 0
    assert rho == pytest.approx(worst, rel=0.1)


def test_ruler_scale_covariance():
    f = sine_rug(0.3, 2.0)
    y0, t0, s = 0.4, -0.2, 0.25
    g = dilated_domain_rug(f, y0, t0, s)
    ball = ParaBall(ParaPoint(0.5, 0.3), 0.8)
    big = ParaBall(ParaPoint(y0 + s * 0.5, t0 + s * s * 0.3), s * 0.8)
    assert ruler_coeff(g, ball) == pytest.approx(ruler_coeff(f, big), rel=1e-9, abs=1e-12)


def test_alpha_zero_on_plane():
    assert alpha_coeff(plane_rug(0.5, 0.125, 0.25), ParaRect(0, 0, 0)) <= 1e-9
    with pytest.raises(DomainError):
        alpha_coeff(identity_rug(), ParaRect(0, 0, 0), t_samples=3)


def varying_sine():
    """A rug whose lines bend more with t, so alpha is a genuine average."""
    def evaluate(y, t):
        amp = 0.1 * (1.5 + t)
        gd = amp * np.sin(y)
        return gd, y + 0.0 * t, -amp * np.cos(y) + t - 0.5 * y * gd
    return RugMap(evaluate, 2.0, "varying-sine")


def test_alpha_bounded_by_max_line_beta():
    f = varying_sine()
    Q = ParaRect(0, 0, 0)
    ball = lambda_ball(Q, 1.0)
    ts, ys = ball_grid(ball, 8, 9)
    betas = [horizontal_beta(np.column_stack(f.arrays(ys, np.full_like(ys, t))), 2 * ball.radius) for t in ts]
    assert alpha_coeff(f, Q) <= max(betas) * (1 + 1e-12)


def test_alpha_matches_refined_quadrature():
    f = varying_sine()
    Q = ParaRect(0, 0, 0)
    ball = lambda_ball(Q, 1.0)
    ts, ys = ball_grid(ball, 32, 9)
    betas = np.array([oracles.minimax_line_fit(np.column_stack(f.arrays(ys, np.full_like(ys, t))))[0]
                      for t in ts]) / (2 * ball.radius)
    oracle = float(np.mean(betas**4) ** 0.25)
    assert alpha_coeff(f, Q, t_samples=8) == pytest.approx(oracle, rel=0.05)


def test_strong_beta_recovers_plane():
    for a0 in (0.0, 0.5, -2.0, 1.3):
        fit = strong_vertical_beta(plane_rug(a0, 0.2, -0.4), ParaBall(ParaPoint(0.3, 0.1), 0.7))
        assert fit.beta <= 1e-6
        V = fit.plane_original()
        assert V.a == pytest.approx(a0, abs=1e-3)


def test_strong_beta_identity():
    fit = strong_vertical_beta(identity_rug(), UNIT_BALL)
    assert fit.beta <= 1e-9
    V = fit.plane_original()
    assert (V.a, V.b) == pytest.approx((0.0, 0.0), abs=1e-9)


def test_strong_beta_is_max_of_line_fits():
    f = sine_rug(0.3, 2.0)
    fit = strong_vertical_beta(f, UNIT_BALL)
    assert fit.beta == max(lf.sup_err for lf in fit.per_line_fits.values()) / UNIT_BALL.radius
    V = fit.plane
    for lf in fit.per_line_fits.values():
        assert lf.sup_err <= lf.surrogate_err * (1 + 1e-12)
        # every line lies in the common plane
        assert (lf.line.a, lf.line.b) == pytest.approx((V.a, V.b), abs=1e-9)


@pytest.mark.parametrize("theta", [0.3, -0.9, 1.4])
def test_strong_beta_rotation_covariance(theta):
    for f in (plane_rug(0.5, 0.1, 0.0), sine_rug(0.3, 2.0)):
        base = strong_vertical_beta(f, UNIT_BALL)
        rot = strong_vertical_beta(rotated_rug(f, theta), UNIT_BALL)
        assert rot.beta == pytest.approx(base.beta, abs=1e-6)
        assert hc.plane_angle_to(rot.plane_original(), theta) == pytest.approx(
            hc.plane_angle_to(base.plane_original(), 0.0), abs=1e-4)


def test_ruler_to_beta_on_sample_balls():
    T = TUNABLES
    rng = np.random.default_rng(3)
    checked = 0
    for f in builtin_family():
        for _ in range(3):
            w = ParaPoint(*rng.uniform(-2, 2, 2))
            r = 10.0 ** rng.uniform(-3, 0)
            if ruler_coeff(f, ParaBall(w, T.ruler_to_beta_C * r)) < T.ruler_to_beta_delta:
                checked += 1
                assert strong_vertical_beta(f, ParaBall(w, r)).beta < T.ruler_to_beta_eps
    assert checked > 0


def test_carleson_sum_examples():
    Q0 = ParaRect(0, 0, 0)
    assert carleson_sum(plane_rug(0.5, 0.0, 0.0), Q0, 3, "beta", 1e-3)[0] == 0.0
    assert carleson_sum(plane_rug(0.5, 0.0, 0.0), Q0, 3, "ruler", 1e-3)[0] == 0.0
    total, ratio = carleson_sum(sine_rug(0.3, 2.0), ParaRect(1, 0, 0), 3, "ruler", 0.0)
    assert ratio == 4.0
    assert total == pytest.approx(4 * ParaRect(1, 0, 0).measure)
    with pytest.raises(DomainError):
        carleson_sum(identity_rug(), Q0, 11)


def carleson_ratios(f, depth):
    return [carleson_sum(f, ParaRect(0, k, 0), depth, "beta", 0.02, 1.0)[1] for k in range(4)]


def test_carleson_ratio_stable_across_roots():
    ratios = carleson_ratios(sine_rug(0.05, 2.0), 4)
    assert min(ratios) > 0
    assert max(ratios) <= 2 * min(ratios)


@pytest.mark.slow
def test_carleson_ratio_stable_at_default_frequency():
    ratios = carleson_ratios(sine_rug(0.05, 3e-3), 6)
    assert max(ratios) <= 2 * min(ratios)


def test_builtin_family_is_bilipschitz():
    for f in builtin_family():
        passed, low, high = audit_bilipschitz(f, pairs=2000, seed=1)
        assert passed, (f.name, low, high)
        assert math.isfinite(f.M) and f.M >= 1
