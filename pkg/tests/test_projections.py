import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heisrug.heis_core import DomainError, ParaPoint, VerticalPlane
from heisrug.para_grid import ParaBall, ParaRect, lambda_ball
from heisrug.projections_winding import (NotFlatEnoughError, OnBoundaryError, PlanarLoop, bvp_check,
                                         default_bvp_delta, enclosed_by_image, frame_winding,
                                         projected_measure, projection_raster, slab_frame, winding_number)
from heisrug.rugs import builtin_family, identity_rug, plane_rug, rotated_rug, sine_rug
from heisrug.tunables import TUNABLES

SQUARE = [(-1, -1), (1, -1), (1, 1), (-1, 1)]


def test_winding_examples():
    loop = PlanarLoop(np.array(SQUARE, float))
    assert winding_number(loop, ParaPoint(0, 0)) == 1
    assert winding_number(loop, ParaPoint(5, 5)) == 0
    assert winding_number(PlanarLoop(np.array(SQUARE * 2, float)), ParaPoint(0, 0)) == 2
    assert winding_number(PlanarLoop(np.array(SQUARE[::-1], float)), ParaPoint(0.3, -0.2)) == -1


def test_winding_on_boundary_raises():
    loop = PlanarLoop(np.array(SQUARE, float))
    with pytest.raises(OnBoundaryError):
        winding_number(loop, ParaPoint(1.0, 0.0))
    with pytest.raises(OnBoundaryError):
        winding_number(loop, ParaPoint(-1.0, -1.0))


def test_loop_validation():
    with pytest.raises(DomainError):
        PlanarLoop(np.array([(0, 0), (1, 0), (0, 1)], float))
    with pytest.raises(DomainError):
        PlanarLoop(np.array([(0, 0), (1, 0), (1, math.nan), (0, 1)], float))
    loop = PlanarLoop(np.array(SQUARE, float))
    assert np.array_equal(loop.vertices[0], loop.vertices[-1])


def segment_distance(v, z):
    a, d = v[:-1], v[1:] - v[:-1]
    s = np.clip(((z - a) * d).sum(1) / np.maximum((d * d).sum(1), 1e-300), 0, 1)
    return np.hypot(*(a + s[:, None] * d - z).T).min()


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_winding_is_homotopy_stable(seed):
    """Moving each vertex by less than half the loop's distance to z keeps the winding number."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(4, 30))
    ang = np.sort(rng.uniform(0, 2 * np.pi, count)) * rng.choice([-1, 1])
    rad = rng.uniform(0.2, 2.0, count)
    v = np.column_stack([rad * np.cos(ang), rad * np.sin(ang)])
    if rng.random() < 0.3:
        v = np.vstack([v, v])
    z = rng.uniform(-1.5, 1.5, 2)
    loop = PlanarLoop(v)
    gap = segment_distance(loop.vertices, z)
    if gap < 1e-6:
        return
    w = winding_number(loop, ParaPoint(*z))
    step = rng.normal(size=v.shape)
    step *= (rng.uniform(0, 0.5, (len(v), 1)) * gap) / np.linalg.norm(step, axis=1, keepdims=True)
    assert winding_number(PlanarLoop(v + step), ParaPoint(*z)) == w


def test_enclosed_by_identity_image():
    f = identity_rug()
    H = 20.0
    assert enclosed_by_image(f, (0.0, H, 0.0, 1.0), 0.0, ParaPoint(H / 2, 0.5))
    assert not enclosed_by_image(f, (0.0, H, 0.0, 1.0), 0.0, ParaPoint(100.0, 50.0))
    with pytest.raises(DomainError):
        enclosed_by_image(f, (0.0, H, 0.0, 1.0), 0.0, ParaPoint(1.0, 0.5), boundary_samples=32)


def test_slab_frame_identity_area():
    frame = slab_frame(identity_rug(), ParaRect(0, 0, 0))
    assert frame.H == 20.0
    assert frame.area >= frame.H / 16
    assert frame.horizontal_separation >= 1 / 4
    assert frame.vertical_separation >= frame.H / 4


@pytest.mark.parametrize("Q", [ParaRect(0, 0, 0), ParaRect(2, 1, -3)])
def test_slab_frame_plane_rug_windings(Q):
    f = plane_rug(0.5, 0.2, -0.3)
    # the frame works in the picture where the rug's plane is rotated onto W
    theta = VerticalPlane(0.5, 0.2).direction_angle
    frame = slab_frame(f, Q, theta)
    assert frame.area >= frame.H / (16 * f.M**2)
    grid = frame.grid(16)
    assert all(abs(frame_winding(frame, f, z)) == 1 for z in grid)
    # the same points, mapped back to W, are certified and rasterised in the original picture
    y0, _, t0, _ = Q.bounds()
    box = (y0, y0 + Q.side * frame.H, t0, t0 + Q.side**2)
    raster = projection_raster(f, box, theta, resolution=256)
    for z in grid[::7]:
        w = frame.to_plane(z)
        assert enclosed_by_image(f, box, theta, w, boundary_samples=1024)
        assert raster.covers(w)


def test_slab_frame_rejects_wiggly_rug():
    with pytest.raises(NotFlatEnoughError):
        slab_frame(sine_rug(0.3, 2.0), ParaRect(0, 0, 0))


def test_projected_measure_identity_ball():
    value = projected_measure(identity_rug(), ParaBall(ParaPoint(0, 0), 1.0), 0.0)
    assert value == pytest.approx(4.0, rel=0.05)


def test_projected_measure_monotone_in_region():
    f = sine_rug(0.3, 2.0)
    small = projected_measure(f, ParaBall(ParaPoint(0.2, 0.1), 0.5), 0.3)
    large = projected_measure(f, ParaBall(ParaPoint(0.2, 0.1), 1.0), 0.3)
    assert small <= large * 1.02


def test_projected_measure_plane_rug_big_projection():
    Q = ParaRect(0, 0, 0)
    for a in (0.0, 0.5, -1.0):
        assert projected_measure(plane_rug(a, 0.4, 0.1), lambda_ball(Q, 4.0), 0.0) >= Q.side**3


def test_projected_measure_resolution_bounds():
    with pytest.raises(DomainError):
        projected_measure(identity_rug(), ParaRect(0, 0, 0), 0.0, resolution=32)
    with pytest.raises(DomainError):
        projected_measure(identity_rug(), ParaRect(0, 0, 0), 0.0, resolution=8192)


@pytest.mark.parametrize("theta", [0.4, -1.0])
def test_projected_measure_conjugation(theta):
    f = plane_rug(0.5, 0.1, 0.2)
    region = ParaRect(0, 0, 0)
    direct = projected_measure(f, region, theta, 256)
    conj = projected_measure(rotated_rug(f, -theta), region, 0.0, 256)
    assert direct == pytest.approx(conj, rel=0.03)


def test_projection_does_not_inflate_measure():
    for f in builtin_family():
        for Q in (ParaRect(0, 0, 0), ParaRect(2, 1, 3)):
            for theta in (-1.0, 0.0, 0.7):
                value = projected_measure(f, Q, theta)
                assert value <= TUNABLES.projection_c * Q.measure * f.M**3


def test_certificates_agree_with_raster():
    rng = np.random.default_rng(5)
    f = plane_rug(0.8, -0.2, 0.3)
    box = (0.0, 2.0, 0.0, 1.0)
    raster = projection_raster(f, box, 0.2, resolution=512)
    s0, s1 = raster.s_range
    t0, t1 = raster.t_range
    cell = math.hypot((s1 - s0) / 512, (t1 - t0) / 512)
    checked = 0
    for _ in range(300):
        z = ParaPoint(rng.uniform(s0, s1), rng.uniform(t0, t1))
        try:
            inside = enclosed_by_image(f, box, 0.2, z, boundary_samples=2048)
        except OnBoundaryError:
            continue
        if inside:
            assert raster.covers(z)
        checked += 1
    assert checked > 250
    assert cell < 0.01


def test_bvp_identity():
    res = bvp_check(identity_rug(), ParaRect(0, 0, 0), delta=0.5)
    assert res.passed
    assert res.theta == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(DomainError):
        bvp_check(identity_rug(), ParaRect(0, 0, 0), theta_grid=4)


def test_bvp_rotated_identity():
    res = bvp_check(rotated_rug(identity_rug(), math.pi / 4), ParaRect(0, 0, 0), delta=0.5)
    assert res.passed
    assert res.theta == pytest.approx(math.pi / 4, abs=1e-12)


def test_bvp_steep_plane_default_delta():
    f = plane_rug(2.0, 0.1, -0.2)
    assert default_bvp_delta(f.M) == TUNABLES.bvp_delta_base / f.M**3
    assert bvp_check(f, ParaRect(1, 0, 1)).passed
