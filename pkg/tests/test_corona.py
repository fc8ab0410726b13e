import json
import math
import warnings

import numpy as np
import pytest
from scipy.special import erf

from heisrug import heis_core as hc
from heisrug.corona import (LEAF_NAMES, CoronaDecomposition, CoronaParams, RectFit, SignatureUndetermined,
                            build_corona, classify_rect, classify_tree_type, fq_map, plane_fit_in_frame,
                            qie_audit, relative_slope, signature, verify_packing)
from heisrug.flatness import RugMap
from heisrug.heis_core import DomainError, ParaPoint
from heisrug.para_grid import ParaBall, ParaRect, children, contains, lambda_ball, parent
from heisrug.rugs import identity_rug, piecewise_rug, plane_rug, sine_rug

ROOT = ParaRect(0, 0, 0)


def bump_rug(height, center=0.5, width=0.02):
    """Flag over a Gaussian bump in g'; flat away from y = center."""
    def evaluate(y, t):
        y = np.asarray(y, float)
        gd = height * np.exp(-((y - center) / width) ** 2)
        g = height * width * math.sqrt(math.pi) / 2 * erf((y - center) / width)
        return gd, y + 0.0 * t, g + t - 0.5 * y * gd
    return RugMap(evaluate, 1.0 + 2 * height / width, f"bump({height:g})")


def flipped_identity():
    return RugMap(lambda y, t: (0.0 * y, y + 0.0 * t, -t + 0.0 * y), 1.0, "flipped")


def build(f, p, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return build_corona(f, ROOT if "root" not in kw else kw.pop("root"), p, bvp=kw.pop("bvp", False), **kw)


@pytest.fixture(scope="module")
def bump_decomposition():
    return build(bump_rug(1e-3), CoronaParams(depth=4))


@pytest.fixture(scope="module")
def sine_decomposition():
    return build(sine_rug(0.05, 0.006), CoronaParams(depth=4))


def all_rects(d):
    return {g.rect(i) for g in d.generations for i in range(g.status.size)}


def test_params_hierarchy():
    p = CoronaParams()
    M = 1.5
    N = p.A * (1 + p.Sigma) * M
    assert p.N(M) == N
    assert p.resolved_H(M) == p.A * max(N * N, p.K * N)
    assert p.bad_threshold(M) == pytest.approx(p.eps / (p.resolved_H(M) * p.A**2 * (1 + p.Sigma) ** 2))
    assert p.hierarchy(M) == ([], [])
    assert p.hierarchy(M)[0] == CoronaParams(**p.as_dict()).hierarchy(M)[0]
    for bad in (dict(depth=11), dict(kappa=0.5), dict(B=4.0), dict(H=10.0), dict(eps=-1.0)):
        assert CoronaParams(**bad).hierarchy(M)[0], bad
    assert CoronaParams(eps=3.0).hierarchy(M)[1]
    with pytest.raises(DomainError):
        build_corona(identity_rug(), ROOT, CoronaParams(depth=11))


def test_plane_rug_is_one_tree():
    f = plane_rug(0.5, 0.3, -0.2)
    p = CoronaParams(depth=3)
    d = build(f, p)
    assert len(d.trees) == 1 and d.bad_count() == 0
    T = d.trees[0]
    assert T.root == ROOT and T.members == all_rects(d)
    assert set(T.leaf_reason.values()) == {"cutoff"}
    assert {Q.n for Q in T.leaves} == {3}
    assert d.tree_types == {0: "i"} and T.signature == "+"
    assert d.packing_report == (0.0, 1.0)
    # one plane for every member, and it is W_T
    planes = list(T.planes.values())
    for V in planes:
        assert (V.a, V.b) == pytest.approx((planes[0].a, planes[0].b), abs=1e-6)
    assert hc.plane_angle_to(planes[0], T.angle) == pytest.approx(0.0, abs=1e-6)
    assert T.uncovered_measure() == pytest.approx(ROOT.measure)


def check_tree_axioms(d):
    every = all_rects(d)
    seen = set()
    last = d.root.n + len(d.generations) - 1
    for T in d.trees:
        members = T.members
        assert not (members & seen), "trees overlap"
        seen |= members
        reasons = T.leaf_reason
        for Q in members:
            assert contains(T.root, Q)  # T1
            if Q != T.root:
                assert parent(Q) in members  # T2
            kids = set(children(Q)) if Q.n < last else set()
            inside = kids & members
            if Q in reasons:
                assert not inside  # T3: a leaf keeps no children
            else:
                assert inside == kids  # T3: all children or none
            # leaf reasons match the rule that produced them
            bad_child = any(d.status_of(c) == "bad" for c in kids)
            rel = relative_slope(d.fit_of(Q).angle, T.angle)
            if Q.n == last:
                assert reasons[Q] == "cutoff"
            elif bad_child:
                assert reasons[Q] == "bad-child"
            elif rel >= d.params.Sigma / 2:
                assert reasons[Q] == "steep-angle"
            else:
                assert Q not in reasons
            assert rel <= d.params.Sigma
        assert relative_slope(d.fit_of(T.root).angle, T.angle) == 0.0
    # partition of the analysed window into Bad and tree members
    assert not (seen & d.bad)
    assert seen | d.bad == every


def test_tree_axioms_bump(bump_decomposition):
    check_tree_axioms(bump_decomposition)
    assert "bad-child" in {r for T in bump_decomposition.trees for r in T.leaf_reason.values()}


def test_tree_axioms_sine(sine_decomposition):
    check_tree_axioms(sine_decomposition)
    assert len(sine_decomposition.trees) > 1


def test_glued_planes_split_into_trees():
    # two planes with slopes -0.2 and 0.2 meet along y = 4; their angle gap exceeds Sigma
    f = piecewise_rug([4.0], [-0.2, 0.2])
    p = CoronaParams(eps=0.1, Sigma=0.3, K=1.0, H=11.5, depth=5)
    assert relative_slope(math.atan(-0.2), math.atan(0.2)) > p.Sigma
    root = ParaRect(-3, 0, 0)
    d = build(f, p, root=root)
    angles = {round(relative_slope(T.angle, 0.0), 6) for T in d.trees}
    assert angles == {0.2}
    sides = {T.angle > 0 for T in d.trees}
    assert len(d.trees) >= 2 and len(sides) == 2
    # rectangles whose ball crosses the seam are Bad or leaves
    for T in d.trees:
        for Q in T.members:
            y0, y1, _, _ = lambda_ball(Q, d.H).bounds()
            if y0 < 4.0 < y1:
                assert Q in T.leaves


def test_classify_plane_good_everywhere():
    f = plane_rug(-2.0, 0.1, 0.4)
    p = CoronaParams()
    fits = [classify_rect(f, Q, p) for Q in (ROOT, ParaRect(2, 1, 3), ParaRect(4, -7, 20))]
    assert all(c.good for c in fits)
    for c in fits:
        assert c.plane.a == pytest.approx(-2.0, abs=1e-4)
        assert c.beta < c.threshold
    exact = classify_rect(f, ROOT, p, exact=True)
    assert exact.good and exact.plane.a == pytest.approx(-2.0, abs=1e-3)


def test_classify_localized_bump():
    f = bump_rug(1e-3)
    p = CoronaParams()
    assert classify_rect(f, ParaRect(4, 8, 0), p).status == "bad"
    # far enough that HQ misses the bump
    far = ParaRect(4, -300, 0)
    assert lambda_ball(far, p.resolved_H(f.M)).bounds()[1] < 0.0
    assert classify_rect(f, far, p).good


def test_lower_eps_never_turns_bad_good():
    f = sine_rug(0.1, 1.0)
    rng = np.random.default_rng(2)
    rects = [ParaRect(int(n), int(k), int(l)) for n, k, l in
             zip(rng.integers(2, 12, 40), rng.integers(-20, 20, 40), rng.integers(-50, 50, 40))]
    counts = []
    previous = set()
    for eps in (2.0, 0.5, 0.1, 0.02):
        p = CoronaParams(eps=eps, H=20.0)
        bad = {Q for Q in rects if classify_rect(f, Q, p).status == "bad"}
        assert previous <= bad
        previous = bad
        counts.append(len(bad))
    # the sample is not one-sided, so the inclusions say something
    assert 0 < counts[0] < counts[-1]


def test_packing_examples(bump_decomposition):
    d = build(plane_rug(0.5, 0.0, 0.0), CoronaParams(depth=2))
    C1, C2 = verify_packing(d, [ROOT, *children(ROOT)])
    assert C1 == 0.0 and C2 <= 1.0
    bd = bump_decomposition
    assert verify_packing(bd, [bd.trees[0].root])[1] >= 1.0
    assert verify_packing(bd, [ROOT]) == bd.packing_report
    with pytest.raises(DomainError):
        verify_packing(bd, [ParaRect(1, 5, 0)])


def test_tree_types(bump_decomposition):
    assert set(bump_decomposition.tree_types.values()) == {"ii"}
    with pytest.raises(DomainError):
        classify_tree_type(bump_decomposition.trees[0], 0.5)


def single_rect_tree(leaf_code):
    """A depth-1 plane decomposition rewritten so its root is a leaf with the given code."""
    data = build(plane_rug(0.5, 0.0, 0.0), CoronaParams(depth=1)).to_dict()
    data["rectangles"][0]["leaf"] = [leaf_code]
    gen1 = data["rectangles"][1]
    gen1["status"] = [0] * 8
    gen1["tree"] = [-1] * 8
    gen1["leaf"] = [0] * 8
    return CoronaDecomposition.from_dict(data)


def test_tree_type_by_leaf_reason():
    codes = {name: code for code, name in LEAF_NAMES.items()}
    assert classify_tree_type(single_rect_tree(codes["bad-child"]).trees[0], 0.25) == "ii"
    assert classify_tree_type(single_rect_tree(codes["steep-angle"]).trees[0], 0.25) == "iii"
    assert classify_tree_type(single_rect_tree(codes["cutoff"]).trees[0], 0.25) == "i"


def test_fq_map_identity_and_plane():
    p = CoronaParams()
    Q = ParaRect(2, 1, 3)
    ys = np.linspace(0.25, 0.5, 7)
    ts = np.full_like(ys, 0.2)
    F = fq_map(identity_rug(), Q, classify_rect(identity_rug(), Q, p).fit, p.resolved_H(1.0))
    a, c = F(ys, ts)
    assert np.allclose(a, ys, atol=1e-12) and np.allclose(c, ts, atol=1e-12)
    assert F.point(ParaPoint(0.3, 0.2)) == pytest.approx(ParaPoint(0.3, 0.2), abs=1e-12)
    f = plane_rug(0.5, 0.3, -0.2)
    fit = classify_rect(f, Q, p).fit
    F = fq_map(f, Q, fit, p.resolved_H(f.M))
    # the second coordinate is constant along each line and moves with t
    ts = np.array([0.0, 0.1, 0.3])
    _, c = F(np.tile(ys, (3, 1)), np.repeat(ts, 7).reshape(3, 7))
    assert np.ptp(c, axis=1).max() <= 1e-12
    assert np.diff(c[:, 0]) == pytest.approx(np.diff(ts), abs=1e-9)
    with pytest.raises(DomainError):
        F.line_constant(1e6)
    with pytest.raises(DomainError):
        fq_map(f, Q, fit)


def test_fq_consecutive_generations(sine_decomposition):
    d = sine_decomposition
    p = d.params
    rng = np.random.default_rng(0)
    T = max(d.trees, key=lambda T: T.member_count())
    for Q in sorted(T.members - {T.root}, key=lambda Q: (Q.n, Q.k, Q.l))[:30]:
        P = parent(Q)
        FQ = fq_map(d_rug(d), Q, plane_fit_in_frame(d.fit_of(Q), T.angle), d.H)
        FP = fq_map(d_rug(d), P, plane_fit_in_frame(d.fit_of(P), T.angle), d.H)
        y0, y1, t0, t1 = Q.bounds()
        ys, ts = rng.uniform(y0, y1, 100), rng.uniform(t0, t1, 100)
        gap = hc.dpar_arr(*FQ(ys, ts), *FP(ys, ts)).max()
        assert gap <= math.sqrt(1 + p.Sigma) * p.eps * Q.side


def d_rug(d):
    assert d.rug_name == "sine(0.05,0.006)"
    return sine_rug(0.05, 0.006)


def test_fq_is_qie_on_tree_balls(sine_decomposition):
    d = sine_decomposition
    p = d.params
    N = p.N(d.M)
    T = max(d.trees, key=lambda T: T.member_count())
    for Q in sorted(T.members, key=lambda Q: (Q.n, Q.k, Q.l))[:10]:
        F = fq_map(d_rug(d), Q, d.fit_of(Q), d.H)
        rep = qie_audit(F, lambda_ball(Q, d.H), N, p.eps * Q.side, pairs=1000, seed=1)
        assert rep.passed and rep.horizontal
        # f_2 separation of far-apart pairs
        assert rep.sub["separation"].checked > 0
        assert rep.sub_violations == 0


def test_signature_examples():
    p = CoronaParams()
    Q = ParaRect(1, 0, 1)
    assert signature(identity_rug(), Q, classify_rect(identity_rug(), Q, p).fit, p) == "+"
    flip = flipped_identity()
    assert signature(flip, Q, classify_rect(flip, Q, p).fit, p) == "-"
    folded = RugMap(lambda y, t: (0.0 * y, y + 0.0 * t, t * t + 0.0 * y), 1.0, "folded")
    with pytest.raises(SignatureUndetermined):
        signature(folded, Q, RectFit(0.0, 0.0, 0.0, 0.0), p)


def test_signatures_agree_within_trees(sine_decomposition, bump_decomposition):
    for d in (sine_decomposition, bump_decomposition):
        for T in d.trees:
            agree, total = T.signature_agreement()
            assert agree == total > 0
            assert T.signature == "+"


def test_qie_isometry_has_no_violations():
    rep = qie_audit(lambda x: x, (0.0, 1.0), 1.0, 0.0)
    assert rep.passed and rep.sub_violations == 0
    assert rep.upper_violation <= 1e-12 and rep.lower_violation <= 1e-12
    rep = qie_audit(lambda y, t: (y, t), ParaBall(ParaPoint(0, 0), 1.0), 1.0, 0.0)
    assert rep.passed and rep.horizontal and rep.sub_violations == 0


def test_qie_sine_wobble_passes():
    eps = 0.01
    rep = qie_audit(lambda x: x + eps * np.sin(x / eps), (0.0, 1.0), 2.0, eps, pairs=2000)
    assert rep.passed and rep.sub_violations == 0


def test_qie_staircase_flagged():
    step = 0.1
    rep = qie_audit(lambda x: np.floor(x / step) * step, (0.0, 1.0), 1.0, 0.05, pairs=2000)
    assert not rep.passed
    assert rep.upper_violation > 0.0


def test_qie_rejects_bad_input():
    with pytest.raises(DomainError):
        qie_audit(lambda x: x, (0.0, 1.0), 1.0, 0.0, pairs=50)
    with pytest.raises(DomainError):
        qie_audit(lambda x: x, (1.0, 1.0), 1.0, 0.0)
    with pytest.raises(DomainError):
        qie_audit(lambda y, t: (y, t), (0.0, 1.0, 2.0, 2.0), 1.0, 0.0)


def test_build_is_deterministic_and_round_trips(bump_decomposition):
    again = build(bump_rug(1e-3), CoronaParams(depth=4))
    first = json.dumps(bump_decomposition.to_dict(), sort_keys=True)
    assert json.dumps(again.to_dict(), sort_keys=True) == first
    loaded = CoronaDecomposition.from_dict(json.loads(first))
    assert json.dumps(loaded.to_dict(), sort_keys=True) == first
    Q = ParaRect(3, 4, 10)
    assert loaded.status_of(Q) == bump_decomposition.status_of(Q)
    assert loaded.tree_of(ROOT).tree_id == 0
    data = json.loads(first)
    data["schema_version"] = 99
    with pytest.raises(DomainError):
        CoronaDecomposition.from_dict(data)


def test_parallel_build_matches_serial():
    f = sine_rug(0.05, 0.006)
    p = CoronaParams(depth=2)
    assert build(f, p, jobs=2).to_dict() == build(f, p).to_dict()


def test_big_projection_recorded_per_tree():
    d = build(plane_rug(0.5, 0.0, 0.0), CoronaParams(depth=1), bvp=True)
    assert d.bvp[0]["passed"]
    assert d.bvp[0]["ratio"] >= 1.0
