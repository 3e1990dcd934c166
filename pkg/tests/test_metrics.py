import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from mvpose.core import RigidTransform, SymmetryAnnotation, TriMesh, compose, rot_z
from mvpose.metrics import (
    DetectionRecord,
    add_error,
    add_or_adds,
    adds_error,
    average_precision,
    bbox_iou,
    farthest_point_sample,
    mask_iou,
    mask_to_bbox,
    model_points,
    pose_errors,
    summarize,
)
from mvpose.shapes import box_mesh


def random_pose(rng, scale=100.0):
    return RigidTransform(Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3) * scale)


# --------------------------------------------------------------------------
# ADD / ADD-S


def test_add_examples():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(50, 3)) * 30
    T = random_pose(rng)
    assert add_error(T, T, P) == 0.0
    shifted = RigidTransform(T.rotation, T.translation + (1, 0, 0))
    assert add_error(shifted, T, P) == pytest.approx(1.0)
    two = np.array([[1.0, 0, 0], [-1.0, 0, 0]])
    assert add_error(RigidTransform(rot_z(90), (0, 0, 0)), RigidTransform.identity(), two) == pytest.approx(np.sqrt(2))
    with pytest.raises(ValueError):
        add_error(T, T, np.zeros((0, 3)))
    with pytest.raises(ValueError):
        adds_error(T, T, [])


def test_adds_examples():
    ang = np.linspace(0, 2 * np.pi, 36, endpoint=False)
    ring = np.stack([40 * np.cos(ang), 40 * np.sin(ang), np.zeros_like(ang)], 1)
    T = RigidTransform(rot_z(10), (5, 6, 7))
    assert adds_error(T, T, ring) == 0.0
    flipped = RigidTransform(T.rotation @ rot_z(180), T.translation)
    assert adds_error(flipped, T, ring) == pytest.approx(0.0, abs=1e-9)
    assert add_error(flipped, T, ring) == pytest.approx(80.0)


def brute_adds(est, gt, P):
    A, B = est.apply(P), gt.apply(P)
    return np.mean(np.min(np.linalg.norm(A[:, None] - B[None], axis=2), axis=1))


def test_adds_le_add_and_oracle():
    rng = np.random.default_rng(1)
    P = rng.normal(size=(40, 3)) * 25
    for i in range(10_000):
        a, b = random_pose(rng, 20), random_pose(rng, 20)
        s = adds_error(a, b, P)
        assert s <= add_error(a, b, P) + 1e-12
        if i < 200:
            assert s == pytest.approx(brute_adds(a, b, P), abs=1e-9)


def test_add_left_invariance():
    rng = np.random.default_rng(2)
    P = rng.normal(size=(30, 3)) * 25
    for _ in range(100):
        a, b, G = random_pose(rng), random_pose(rng), random_pose(rng)
        assert add_error(compose(G, a), compose(G, b), P) == pytest.approx(add_error(a, b, P), rel=1e-9, abs=1e-9)


def test_add_or_adds_and_model_points():
    plain = box_mesh((20, 30, 40))
    sym = TriMesh(plain.vertices, plain.triangles, symmetries=(SymmetryAnnotation.continuous((0, 0, 1)),))
    a = RigidTransform(rot_z(90), (0, 0, 0))
    b = RigidTransform.identity()
    assert add_or_adds(a, b, plain) == pytest.approx(add_error(a, b, plain.vertices))
    assert add_or_adds(a, b, sym) == pytest.approx(adds_error(a, b, sym.vertices))
    rng = np.random.default_rng(3)
    P = rng.normal(size=(500, 3))
    S = farthest_point_sample(P, 50)
    assert len(S) == 50 and len(np.unique(S, axis=0)) == 50
    assert len(model_points(plain)) == len(plain.vertices)


# --------------------------------------------------------------------------
# symmetry-aware pose errors


def test_pose_errors_examples():
    mesh = box_mesh((20, 30, 40))
    T = RigidTransform(rot_z(15), (1, 2, 3))
    e = pose_errors(T, T, mesh)
    assert (e.translation, e.rotation, e.add) == (0.0, 0.0, 0.0)

    S = RigidTransform(rot_z(180), (0, 0, 0))
    dmesh = TriMesh(mesh.vertices, mesh.triangles, symmetries=(SymmetryAnnotation.discrete([S]),))
    e = pose_errors(T @ S, T, dmesh)
    assert e.translation == 0.0 and e.rotation == 0.0
    assert pose_errors(T @ S, T, mesh).rotation == pytest.approx(180.0)

    cmesh = TriMesh(mesh.vertices, mesh.triangles, symmetries=(SymmetryAnnotation.continuous((0, 0, 1)),))
    est = RigidTransform(T.rotation @ rot_z(30), T.translation)
    assert pose_errors(est, T, cmesh).rotation == pytest.approx(0.0, abs=1e-6)
    assert pose_errors(est, T, mesh).rotation == pytest.approx(30.0)


def test_pose_errors_identity_only_matches_plain():
    rng = np.random.default_rng(4)
    for _ in range(200):
        a, b = random_pose(rng), random_pose(rng)
        e = pose_errors(a, b)
        R = a.rotation.T @ b.rotation
        assert e.rotation == pytest.approx(np.degrees(Rotation.from_matrix(R).magnitude()), abs=1e-6)
        assert e.translation == pytest.approx(np.linalg.norm(a.translation - b.translation))
        assert e.rotation >= 0 and e.translation >= 0


def test_continuous_axis_against_grid_search():
    rng = np.random.default_rng(5)
    axis = np.array([0.0, 0.6, 0.8])
    mesh = TriMesh(np.eye(3), np.array([[0, 1, 2]]), symmetries=(SymmetryAnnotation.continuous(axis),))
    thetas = np.radians(np.arange(0, 360, 0.05))
    for _ in range(20):
        a, b = random_pose(rng), random_pose(rng)
        grid = min(
            np.degrees(Rotation.from_matrix(a.rotation.T @ b.rotation @ Rotation.from_rotvec(axis * t).as_matrix()).magnitude())
            for t in thetas
        )
        got = pose_errors(a, b, mesh).rotation
        assert got <= grid + 1e-9
        assert got == pytest.approx(grid, abs=0.05)


# --------------------------------------------------------------------------
# IoU


def test_iou_examples():
    assert bbox_iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)
    assert bbox_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert bbox_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert bbox_iou((0, 0, 0, 0), (0, 0, 0, 0)) == 0.0
    a = np.zeros((8, 8), bool)
    a[2:5, 2:5] = True
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(np.zeros_like(a), np.zeros_like(a)) == 0.0
    assert mask_to_bbox(a) == (1.5, 1.5, 4.5, 4.5)
    with pytest.raises(ValueError):
        mask_iou(a, np.zeros((4, 4), bool))


# --------------------------------------------------------------------------
# AP


def square(x0, y0, w, h, shape=(40, 40)):
    m = np.zeros(shape, bool)
    m[y0 : y0 + h, x0 : x0 + w] = True
    return m


def test_ap_hand_example():
    gt = square(0, 0, 10, 10)
    det = square(0, 0, 10, 7)  # 70 of 100 pixels: IoU 0.7
    assert mask_iou(det, gt) == pytest.approx(0.7)
    for score in (0.01, 0.5, 3.0):
        res = average_precision([DetectionRecord("v", "c", score, mask=det)], {("v", "c"): [gt]})
        assert res["ap"] == 0.5
        assert [res["per_threshold"][t] for t in sorted(res["per_threshold"])] == [1.0] * 5 + [0.0] * 5
        assert res["ap50"] == 1.0


def test_ap_trivial_cases():
    gt = {("v", "c"): [square(0, 0, 10, 10)], ("w", "c"): [square(5, 5, 8, 8)]}
    dets = [DetectionRecord(k[0], k[1], s, mask=m[0]) for (k, m), s in zip(gt.items(), (0.2, 0.9))]
    assert average_precision(dets, gt)["ap"] == 1.0
    assert average_precision([], gt)["ap"] == 0.0
    # a class without ground truth is skipped
    extra = dets + [DetectionRecord("v", "other", 0.99, mask=square(20, 20, 5, 5))]
    assert average_precision(extra, gt)["per_class"] == {"c": 1.0}
    with pytest.raises(ValueError):
        DetectionRecord("v", "c", float("nan"), mask=gt[("v", "c")][0])


def coco_oracle(dets, gts, thr):
    """Single-class AP at one threshold, written after the loop structure of the COCO evaluator."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    n_gt = sum(len(v) for v in gts.values())
    used = {k: [False] * len(v) for k, v in gts.items()}
    tps = []
    for i in order:
        view, _, box = dets[i]
        best, best_iou = -1, thr - 1e-12
        for j, g in enumerate(gts.get(view, [])):
            if used[view][j]:
                continue
            iou = bbox_iou(box, g)
            if iou >= best_iou:
                best, best_iou = j, iou
        if best >= 0:
            used[view][best] = True
        tps.append(best >= 0)
    tp = np.cumsum(tps)
    fp = np.cumsum([not t for t in tps])
    rc = tp / n_gt
    pr = list(tp / np.maximum(tp + fp, np.spacing(1)))
    for k in range(len(pr) - 1, 0, -1):
        if pr[k] > pr[k - 1]:
            pr[k - 1] = pr[k]
    q = np.zeros(101)
    inds = np.searchsorted(rc, np.linspace(0, 1, 101), side="left")
    for ri, pi in enumerate(inds):
        if pi < len(pr):
            q[ri] = pr[pi]
    return q.mean()


def test_ap_against_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        gts = {}
        for v in ("a", "b", "c"):
            n = int(rng.integers(0, 4))
            xy = rng.uniform(0, 50, (n, 2))
            gts[v] = [(x, y, x + 10, y + 10) for x, y in xy]
        dets = []
        for v, boxes in gts.items():
            for b in boxes:
                if rng.random() < 0.8:
                    d = rng.normal(0, 2, 4)
                    dets.append((v, float(rng.random()), tuple(np.add(b, d))))
            for _ in range(int(rng.integers(0, 3))):
                x, y = rng.uniform(0, 50, 2)
                dets.append((v, float(rng.random()), (x, y, x + 10, y + 10)))
        if not sum(len(v) for v in gts.values()):
            continue
        recs = [DetectionRecord(v, "k", s, bbox=b) for v, s, b in dets]
        res = average_precision(recs, {(v, "k"): b for v, b in gts.items()}, iou_kind="bbox")
        for t, ap in res["per_threshold"].items():
            assert ap == pytest.approx(coco_oracle(dets, gts, t), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=6, max_size=6, unique=True), st.sampled_from(["exp", "cube", "affine"]))
def test_ap_rank_only(ticks, kind):
    scores = [t / 1000 for t in ticks]
    masks = [square(3 * i, 0, 6, 6) for i in range(6)]
    gt = {("v", "c"): masks[::2]}
    f = {"exp": np.exp, "cube": lambda s: s**3, "affine": lambda s: 7 * s - 2}[kind]
    a = average_precision([DetectionRecord("v", "c", s, mask=m) for s, m in zip(scores, masks)], gt)
    b = average_precision([DetectionRecord("v", "c", float(f(s)), mask=m) for s, m in zip(scores, masks)], gt)
    assert a == b


def test_summarize():
    s = summarize([1.0, 2.0, 3.0])
    assert s["mean"] == 2.0 and s["std"] == pytest.approx(np.std([1, 2, 3])) and s["n"] == 3
    assert summarize([])["n"] == 0
