import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpose.core import Ray
from mvpose.detect import (
    CandidatePoint,
    DetectConfig,
    Masklet,
    TemplateLibrary,
    aggregate_class_score,
    extract_instances,
    greedy_cluster,
    oracle_score,
    pair_class_scores,
    run_detection,
    score_masklet_features,
    template_similarity,
    triangulate_pair,
)
from mvpose.errors import (
    BehindCameraRejection,
    DegenerateFeatureError,
    InsufficientViewsError,
    UnstableTriangulationError,
)
from mvpose.synth import SceneSpec, generate_synthetic_scene
from mvpose.shapes import box_mesh, instrument_mesh


def lstsq_midpoint(o1, d1, o2, d2):
    """Independent oracle: least-squares solve of o1 + s d1 = o2 + t d2."""
    A = np.stack([d1, -d2], axis=1)
    (s, t), *_ = np.linalg.lstsq(A, o2 - o1, rcond=None)
    p1, p2 = o1 + s * d1, o2 + t * d2
    return (p1 + p2) / 2, np.linalg.norm(p1 - p2), s, t


# --------------------------------------------------------------------------
# scoring


def test_template_similarity_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert template_similarity(v, v) == pytest.approx(1.0)
    assert template_similarity((1, 0), (0, 1)) == 0.0
    assert template_similarity((1, 2, 2), (2, 1, 2)) == pytest.approx(8 / 9)
    with pytest.raises(DegenerateFeatureError):
        template_similarity((0, 0), (1, 0))


def test_aggregate_class_score_examples():
    assert aggregate_class_score([1.0, 0.9, 0.8, 0.7, 0.6, 0.1]) == pytest.approx(0.8)
    assert aggregate_class_score([0.4, 0.2]) == pytest.approx(0.3)
    assert aggregate_class_score([0.5] * 10) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        aggregate_class_score([])


@settings(max_examples=200, deadline=None)
@given(
    scores=st.lists(st.floats(-1, 1), min_size=1, max_size=20),
    idx=st.integers(0, 19),
    bump=st.floats(0, 1),
)
def test_aggregate_class_score_monotone(scores, idx, bump):
    idx %= len(scores)
    raised = list(scores)
    raised[idx] = min(1.0, raised[idx] + bump)
    assert aggregate_class_score(raised) >= aggregate_class_score(scores) - 1e-12


def test_oracle_score_examples():
    a = np.zeros((6, 6), bool)
    a[0:2, 0:2] = True
    b = np.zeros((6, 6), bool)
    b[0:2, 1:3] = True
    c = np.zeros((6, 6), bool)
    c[4:6, 4:6] = True
    assert oracle_score(a, a) == 1.0
    assert oracle_score(a, c) == 0.0
    assert oracle_score(a, b) == pytest.approx(2 / 6)
    assert oracle_score(b, a) == oracle_score(a, b)
    with pytest.raises(ValueError):
        oracle_score(a, np.zeros((5, 6), bool))


def test_masklet_bbox_and_area():
    m = np.zeros((10, 12), bool)
    m[2:5, 3:9] = True
    mk = Masklet("v", "m", m)
    assert mk.bbox == (3, 2, 8, 4)
    assert mk.area == 18
    np.testing.assert_allclose(mk.bbox_center, (5.5, 3.0))
    with pytest.raises(ValueError):
        Masklet("v", "e", np.zeros((3, 3), bool))


def test_feature_scores_are_clamped_and_top5():
    lib = TemplateLibrary({"a": np.array([[1, 0], [1, 0.1]]), "b": np.array([[-1, 0], [-1, 0.0]])})
    m = Masklet("v", "m", np.ones((2, 2), bool), features=np.array([[1.0, 0.0]]))
    s = score_masklet_features(m, lib)
    assert s["a"] == pytest.approx((1 + 1 / np.sqrt(1.01)) / 2)
    assert s["b"] == 0.0  # negative cosine clamped


def test_pair_class_scores_examples():
    prod, best = pair_class_scores({"A": 0.8}, {"A": 0.5})
    assert prod == {"A": pytest.approx(0.4)}
    assert pair_class_scores({"A": 1, "B": 0}, {"A": 1, "B": 1})[1] == "A"
    prod, best = pair_class_scores({"A": 0.6, "B": 0.7}, {"A": 0.9, "B": 0.5})
    assert prod["A"] == pytest.approx(0.54) and prod["B"] == pytest.approx(0.35)
    assert best == "A"


# --------------------------------------------------------------------------
# triangulation


def test_triangulate_pair_examples():
    mid, gap = triangulate_pair(Ray((0, 0, 0), (1, 0, 0)), Ray((1, -1, 0), (0, 1, 0)))
    np.testing.assert_allclose(mid, (1, 0, 0), atol=1e-15)
    assert gap == pytest.approx(0, abs=1e-15)
    mid, gap = triangulate_pair(Ray((0, 0, 0), (1, 0, 0)), Ray((0, 0, 1), (0, 1, 0)))
    np.testing.assert_allclose(mid, (0, 0, 0.5))
    assert gap == pytest.approx(1.0)
    with pytest.raises(UnstableTriangulationError):
        triangulate_pair(Ray((0, 0, 0), (0, 0, 1)), Ray((1, 0, 0), (0, 0, 1)))


def test_triangulate_near_parallel_threshold():
    a = np.deg2rad(0.4)
    with pytest.raises(UnstableTriangulationError):
        triangulate_pair(Ray((0, 0, 0), (0, 0, 1)), Ray((10, 0, 0), (-np.sin(a), 0, np.cos(a))))
    a = np.deg2rad(0.6)
    mid, gap = triangulate_pair(Ray((0, 0, 0), (0, 0, 1)), Ray((10, 0, 0), (-np.sin(a), 0, np.cos(a))))
    assert gap == pytest.approx(0, abs=1e-9)


def test_triangulate_behind_rejection_and_clamping():
    # diverging rays: closest approach behind both origins
    with pytest.raises(BehindCameraRejection):
        triangulate_pair(Ray((0, 0, 0), (1, 0, 0)), Ray((0, 1, 0), (0, 1, 0)))
    # ray j's closest point is behind its origin: clamp t = 0
    mid, gap = triangulate_pair(Ray((0, 0, 0), (1, 0, 0)), Ray((5, 2, 0), (0, 1, 0)))
    np.testing.assert_allclose(mid, (5, 1, 0))
    assert gap == pytest.approx(2.0)


def test_triangulate_matches_lstsq_oracle_on_skew_pairs():
    rng = np.random.default_rng(0)
    for _ in range(500):
        o1, o2 = rng.normal(size=3) * 100, rng.normal(size=3) * 100
        target = rng.normal(size=3) * 50 + (0, 0, 400)
        d1 = target - o1 + rng.normal(size=3) * 10
        d2 = target - o2 + rng.normal(size=3) * 10
        r1, r2 = Ray(o1, d1), Ray(o2, d2)
        mid_o, gap_o, s, t = lstsq_midpoint(r1.origin, r1.direction, r2.origin, r2.direction)
        if s < 0 or t < 0 or np.degrees(np.arccos(abs(r1.direction @ r2.direction))) < 0.5:
            continue
        mid, gap = triangulate_pair(r1, r2)
        np.testing.assert_allclose(mid, mid_o, atol=1e-9)
        assert gap == pytest.approx(gap_o, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_triangulate_symmetric(seed):
    rng = np.random.default_rng(seed)
    r1 = Ray(rng.normal(size=3) * 100, rng.normal(size=3))
    r2 = Ray(rng.normal(size=3) * 100, rng.normal(size=3))
    try:
        a = triangulate_pair(r1, r2)
    except UnstableTriangulationError:
        with pytest.raises(UnstableTriangulationError):
            triangulate_pair(r2, r1)
        return
    b = triangulate_pair(r2, r1)
    np.testing.assert_allclose(a[0], b[0], atol=1e-9)
    assert a[1] == pytest.approx(b[1], abs=1e-9)


# --------------------------------------------------------------------------
# clustering


def point(pos, views_masklets, score, cls="A"):
    src = tuple(sorted(views_masklets))
    return CandidatePoint(np.asarray(pos, float), src, {cls: score}, cls, 0.0)


def test_greedy_cluster_examples():
    assert greedy_cluster([], {"A": 10}) == []
    [c] = greedy_cluster([point((1, 2, 3), [("v0", "a"), ("v1", "b")], 0.9)], {"A": 100})
    np.testing.assert_allclose(c.center, (1, 2, 3))

    p = point((0, 0, 0), [("v0", "a"), ("v1", "b")], 0.9)
    q = point((1, 0, 0), [("v2", "c"), ("v3", "d")], 0.8)
    [c] = greedy_cluster([p, q], {"A": 100})
    np.testing.assert_allclose(c.center, (0.5, 0, 0))
    assert c.masklets == {"v0": "a", "v1": "b", "v2": "c", "v3": "d"}

    q2 = point((1, 0, 0), [("v0", "x"), ("v2", "c")], 0.8)  # view v0 collides
    clusters = greedy_cluster([p, q2], {"A": 100})
    assert len(clusters) == 2


def test_greedy_cluster_class_and_diameter_criteria():
    p = point((0, 0, 0), [("v0", "a"), ("v1", "b")], 0.9, "A")
    q = point((1, 0, 0), [("v2", "c"), ("v3", "d")], 0.8, "B")
    assert len(greedy_cluster([p, q], {"A": 100, "B": 100})) == 2
    far = point((101, 0, 0), [("v2", "c"), ("v3", "d")], 0.8, "A")
    assert len(greedy_cluster([p, far], {"A": 100})) == 2
    # shared masklet in the same view is allowed
    same = point((2, 0, 0), [("v0", "a"), ("v2", "c")], 0.5, "A")
    assert len(greedy_cluster([p, same], {"A": 100})) == 1


def test_greedy_cluster_joins_closest_admissible():
    a = point((0, 0, 0), [("v0", "a"), ("v1", "b")], 0.9)
    b = point((30, 0, 0), [("v0", "c"), ("v1", "d")], 0.8)
    c = point((20, 0, 0), [("v2", "e"), ("v3", "f")], 0.7)
    clusters = greedy_cluster([c, b, a], {"A": 25})
    assert len(clusters) == 2
    assert any(set(cl.masklets) == {"v0", "v1", "v2", "v3"} and cl.masklets["v0"] == "c" for cl in clusters)


def random_points(rng, n):
    views = [f"v{i}" for i in range(5)]
    out = []
    for _ in range(n):
        vi, vj = rng.choice(len(views), 2, replace=False)
        src = [(views[vi], f"m{rng.integers(4)}"), (views[vj], f"m{rng.integers(4)}")]
        cls = "AB"[rng.integers(2)]
        out.append(point(rng.normal(size=3) * 60, src, float(rng.choice([0.5, 0.7, rng.uniform()])), cls))
    # drop duplicate sources, which real pair enumeration never produces
    seen, uniq = set(), []
    for p in out:
        if p.source not in seen:
            seen.add(p.source)
            uniq.append(p)
    return uniq


def check_cluster_invariants(clusters, diameters):
    for c in clusters:
        assert len(c.masklets) == len(set(c.masklets))
        for p in c.member_points:
            assert p.assigned_class == c.class_id
            assert np.linalg.norm(p.position - c.center) <= diameters[c.class_id] + 1e-9
            for view, mid in p.source:
                assert c.masklets[view] == mid
        np.testing.assert_allclose(c.center, np.mean([p.position for p in c.member_points], axis=0), atol=1e-9)


def test_greedy_cluster_invariants_and_permutation():
    rng = np.random.default_rng(7)
    diameters = {"A": 80.0, "B": 50.0}
    for _ in range(100):
        pts = random_points(rng, int(rng.integers(1, 40)))
        clusters = greedy_cluster(pts, diameters)
        check_cluster_invariants(clusters, diameters)
        perm = [pts[i] for i in rng.permutation(len(pts))]
        again = greedy_cluster(perm, diameters)
        assert [(c.class_id, c.masklets) for c in clusters] == [(c.class_id, c.masklets) for c in again]


# --------------------------------------------------------------------------
# full detection stage


@pytest.fixture(scope="module")
def two_object_scene():
    meshes = {"clamp": instrument_mesh(), "block": box_mesh((60, 30, 20))}
    return generate_synthetic_scene(SceneSpec(meshes=meshes, n_views=4, seed=3, separation_mm=220))


def test_run_detection_single_object():
    scene = generate_synthetic_scene(SceneSpec(n_views=2, seed=1))
    inst = run_detection(scene.cameras, scene.masklets, scene.diameters, gt_masks=scene.gt_masks_by_class())
    assert len(inst) == 1
    [p] = inst[0].member_points
    assert np.linalg.norm(inst[0].center - p.position) == 0
    # the bbox-center rays pass close to, not exactly through, the object origin
    assert np.linalg.norm(inst[0].center - scene.gt_poses[0].translation) <= DetectConfig().gap_fraction * scene.diameters["instrument"]
    assert set(inst[0].masklets) == {"v0", "v1"}


def test_run_detection_two_classes(two_object_scene):
    s = two_object_scene
    inst = run_detection(s.cameras, s.masklets, s.diameters, gt_masks=s.gt_masks_by_class())
    assert sorted(i.class_id for i in inst) == ["block", "clamp"]
    for i in inst:
        k = s.instance_classes.index(i.class_id)
        assert np.linalg.norm(i.center - s.gt_poses[k].translation) < s.diameters[i.class_id] / 2
        assert len(i.masklets) == 4


def test_run_detection_with_features(two_object_scene):
    s = two_object_scene
    inst = run_detection(s.cameras, s.masklets, s.diameters, library=s.templates)
    assert sorted(i.class_id for i in inst) == ["block", "clamp"]
    used = [(v, m) for i in inst for v, m in i.masklets.items()]
    assert len(used) == len(set(used))


def test_run_detection_empty_and_insufficient(two_object_scene):
    s = two_object_scene
    assert run_detection(s.cameras, {}, s.diameters, gt_masks={}) == []
    with pytest.raises(InsufficientViewsError):
        run_detection(s.cameras[:1], s.masklets, s.diameters, gt_masks={})


def test_extract_instances_examples():
    d = {"A": 100.0}
    a = point((0, 0, 0), [("v0", "a0"), ("v1", "a1")], 0.9)
    b = point((2, 0, 0), [("v1", "a1"), ("v2", "a2")], 0.9)
    ghost = point((50, 50, 0), [("v0", "a0"), ("v2", "b2")], 0.95)
    clusters = greedy_cluster([a, b, ghost], {"A": 30.0})
    assert len(clusters) == 2
    [inst] = extract_instances(clusters, d)
    assert inst.masklets == {"v0": "a0", "v1": "a1", "v2": "a2"}
    np.testing.assert_allclose(inst.center, (1, 0, 0))
    # a weaker cluster keeps its unclaimed points and drops the rest
    c = point((60, 0, 0), [("v2", "c2"), ("v3", "c3")], 0.5)
    e = point((62, 0, 0), [("v0", "a0"), ("v3", "c3")], 0.4)
    out = extract_instances(greedy_cluster([a, b, c, e], {"A": 30.0}), d)
    assert [i.masklets for i in out] == [{"v0": "a0", "v1": "a1", "v2": "a2"}, {"v2": "c2", "v3": "c3"}]
    np.testing.assert_allclose(out[1].center, (60, 0, 0))
    assert extract_instances([], d) == []


def test_extract_instances_invariants():
    rng = np.random.default_rng(8)
    diameters = {"A": 30.0, "B": 50.0}
    for _ in range(200):
        out = extract_instances(greedy_cluster(random_points(rng, int(rng.integers(1, 40))), diameters), diameters)
        check_cluster_invariants(out, diameters)
        used = [(v, m) for c in out for v, m in c.masklets.items()]
        assert len(used) == len(set(used))
        assert all(len(c.masklets) >= 2 for c in out)


def test_same_class_pair_has_no_ghosts():
    s = generate_synthetic_scene(SceneSpec(seed=4, instances=["instrument"] * 2, radius_mm=650.0, with_features=False))
    inst = run_detection(s.cameras, s.masklets, s.diameters, gt_masks=s.gt_masks_by_class())
    assert len(inst) == 2 and all(len(i.masklets) == 5 for i in inst)
    ghosts = run_detection(s.cameras, s.masklets, s.diameters, gt_masks=s.gt_masks_by_class(), config=DetectConfig(exclusive_masklets=False))
    assert len(ghosts) > 2


def test_min_area_gate():
    m = np.zeros((50, 50), bool)
    m[:5, :5] = True
    from mvpose.detect import filter_masklets

    assert filter_masklets([Masklet("v", "a", m)], 50) == []
    assert len(filter_masklets([Masklet("v", "a", m)], 25)) == 1
