import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvpose import _kernels
from mvpose._raster_py import rasterize_screen_triangles as python_kernel
from mvpose.core import Camera, RigidTransform, TriMesh, project_points, rot_x, rot_y
from mvpose.errors import UndefinedNormalError
from mvpose.render import (
    Contour,
    boundary_mask,
    extract_contour,
    model_contour_3d,
    occlusion_filter,
    outward_normal,
    rasterize,
    rasterize_scene,
    screen_triangles,
    surface_normal_from_depth,
)
from mvpose.shapes import box_mesh, instrument_mesh, merge_meshes, quad_mesh, sphere_mesh

K = np.array([[500.0, 0.0, 160.0], [0.0, 500.0, 120.0], [0.0, 0.0, 1.0]])
IDENTITY = RigidTransform.identity()


@pytest.fixture
def cam():
    return Camera(K, IDENTITY, 320, 240, "c")


def plane_depth(n, c, u, v):
    """Oracle: depth where the pixel ray meets the plane n . X = c."""
    d = np.linalg.solve(K, np.stack([u, v, np.ones_like(u)]))
    return c / (n @ d)


def brute_force_boundary(mask):
    H, W = mask.shape
    out = []
    for r in range(H):
        for c in range(W):
            if not mask[r, c]:
                continue
            nbrs = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
            if any(not (0 <= rr < H and 0 <= cc < W) or not mask[rr, cc] for rr, cc in nbrs):
                out.append((c, r))
    return out


def angle_deg(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.degrees(np.arccos(np.clip(a @ b / np.linalg.norm(a) / np.linalg.norm(b), -1, 1)))


def closest_point_on_triangle(p, a, b, c):
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + d1 / (d1 - d3) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + d2 / (d2 - d6) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and d4 - d3 >= 0 and d5 - d6 >= 0:
        return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * vb * denom + ac * vc * denom


def distance_to_mesh(p, mesh):
    return min(np.linalg.norm(p - closest_point_on_triangle(p, *mesh.vertices[t])) for t in mesh.triangles)


# --------------------------------------------------------------------------
# rasterize


def test_single_triangle_at_principal_point(cam):
    tri = TriMesh(np.array([[-50.0, -50, 300], [60, -40, 300], [0, 60, 300]]), [[0, 1, 2]])
    mask, depth = rasterize(tri, cam, IDENTITY)
    assert mask[120, 160]
    assert depth[120, 160] == pytest.approx(300.0, abs=0.1)
    assert depth.dtype == np.float32


def test_tilted_triangle_depth_matches_plane_oracle(cam):
    # plane z = 400 + 0.5 x, i.e. n = (-0.5, 0, 1), c = 400
    xy = np.array([[-120.0, -90], [130, -80], [0, 120]])
    V = np.column_stack([xy, 400 + 0.5 * xy[:, 0]])
    mask, depth = rasterize(TriMesh(V, [[0, 1, 2]]), cam, IDENTITY)
    rows, cols = np.nonzero(mask)
    expect = plane_depth(np.array([-0.5, 0.0, 1.0]), 400.0, cols.astype(float), rows.astype(float))
    np.testing.assert_allclose(depth[rows, cols], expect, rtol=1e-5)


def test_behind_and_outside_give_empty_render(cam):
    box = box_mesh((20, 20, 20))
    mask, depth = rasterize(box, cam, RigidTransform.from_translation((0, 0, -300)))
    assert not mask.any() and not depth.any()
    mask, _ = rasterize(box, cam, RigidTransform.from_translation((5000, 0, 300)))
    assert not mask.any()


def test_quad_area_matches_projection(cam):
    # 40 x 30 mm quad at z = 100: projected 200 x 150 px
    mask, depth = rasterize(quad_mesh(40.0, 30.0, 100.0), cam, IDENTITY)
    assert mask.sum() == pytest.approx(200 * 150, rel=0.02)
    np.testing.assert_array_equal(mask, depth > 0)


def test_z_buffer_keeps_nearest(cam):
    near = quad_mesh(40.0, 40.0, 200.0)
    far = quad_mesh(80.0, 80.0, 300.0)
    for parts in ((near, far), (far, near)):
        mesh = merge_meshes([(m.vertices, m.triangles) for m in parts])
        _, depth = rasterize(mesh, cam, IDENTITY)
        assert depth[120, 160] == pytest.approx(200.0, abs=1e-3)
        assert depth[120, 160 + 58] == pytest.approx(300.0, abs=1e-3)
    labels, depth, amodal = rasterize_scene([(far, IDENTITY), (near, IDENTITY)], cam)
    assert labels[120, 160] == 1 and labels[120, 218] == 0 and labels[0, 0] == -1
    assert amodal[0].sum() > amodal[1].sum()
    assert np.all(depth[labels >= 0] > 0)


def test_near_plane_clipping_keeps_front_part(cam):
    # a triangle crossing z = 0; only the part in front may be drawn
    V = np.array([[-100.0, -10, -50], [100, -10, 150], [0, 50, 150]])
    mask, depth = rasterize(TriMesh(V, [[0, 1, 2]]), cam, IDENTITY)
    assert mask.any()
    assert np.all(depth[mask] > 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_compiled_and_python_kernels_agree(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 40))
    uv = rng.uniform(-20, 100, size=(n, 3, 2))
    z = rng.uniform(1, 50, size=(n, 3, 1))
    tris = np.ascontiguousarray(np.concatenate([uv, z], axis=2))
    ref = python_kernel(tris, 80, 60)
    out = _kernels.rasterize_screen_triangles(tris, 80, 60)
    np.testing.assert_array_equal(out, ref)


def test_shared_edge_is_drawn_once(cam):
    # two triangles sharing a diagonal must tile the quad with no gap or overlap
    tris = screen_triangles(quad_mesh(40.0, 30.0, 100.0), cam, IDENTITY)
    a = python_kernel(np.ascontiguousarray(tris[:1]), cam.width, cam.height) > 0
    b = python_kernel(np.ascontiguousarray(tris[1:]), cam.width, cam.height) > 0
    both = python_kernel(tris, cam.width, cam.height) > 0
    assert not (a & b).any()
    np.testing.assert_array_equal(a | b, both)


# --------------------------------------------------------------------------
# contours


def test_contour_examples():
    one = np.zeros((5, 5), bool)
    one[2, 2] = True
    assert len(extract_contour(one)) == 1
    sq = np.zeros((20, 20), bool)
    sq[5:15, 5:15] = True
    assert len(extract_contour(sq)) == 36
    full = np.ones((7, 9), bool)
    c = extract_contour(full)
    assert len(c) == 2 * 7 + 2 * 9 - 4
    assert set(map(tuple, c.pixels.astype(int))) == {
        (u, v) for v in range(7) for u in range(9) if u in (0, 8) or v in (0, 6)
    }
    with pytest.raises(ValueError):
        extract_contour(np.zeros((4, 4), bool))


def test_contour_matches_brute_force_on_random_masks():
    rng = np.random.default_rng(11)
    for _ in range(60):
        H, W = rng.integers(1, 65, size=2)
        mask = rng.random((H, W)) < rng.uniform(0.2, 0.9)
        if not mask.any():
            continue
        c = extract_contour(mask)
        assert [tuple(p) for p in c.pixels.astype(int)] == brute_force_boundary(mask)  # same raster order
        np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1.0, atol=1e-9)


def test_outward_normals_on_square():
    sq = np.zeros((60, 60), bool)
    sq[10:50, 10:50] = True
    assert angle_deg(outward_normal(sq, (10, 30)), (-1, 0)) < 15
    assert angle_deg(outward_normal(sq, (30, 10)), (0, -1)) < 15
    assert angle_deg(outward_normal(sq, (49, 30)), (1, 0)) < 15
    assert angle_deg(outward_normal(sq, (10, 10)), (-1, -1)) < 50
    c = extract_contour(sq)
    centroid = np.array([29.5, 29.5])
    assert np.all(((c.pixels - centroid) * c.normals).sum(axis=1) > 0)


def test_isolated_pixel_normal_is_undefined():
    m = np.zeros((5, 5), bool)
    m[2, 2] = True
    with pytest.raises(UndefinedNormalError):
        outward_normal(m, (2, 2))
    c = extract_contour(m)  # the contour still gets a unit fallback normal
    assert np.linalg.norm(c.normals[0]) == pytest.approx(1.0)


def test_boundary_mask_is_contour_set():
    rng = np.random.default_rng(2)
    mask = rng.random((30, 40)) < 0.6
    rows, cols = np.nonzero(boundary_mask(mask))
    np.testing.assert_array_equal(np.stack([cols, rows], 1), extract_contour(mask).pixels)


# --------------------------------------------------------------------------
# surface normals and the occlusion filter


def plane_depth_map(n, c):
    v, u = np.mgrid[0:240, 0:320].astype(float)
    return plane_depth(np.asarray(n, float), c, u.ravel(), v.ravel()).reshape(240, 320).astype(np.float32)


def test_surface_normal_fronto_parallel(cam):
    depth = np.full((240, 320), 500.0, np.float32)
    n = surface_normal_from_depth(depth, cam, (100, 80))
    assert angle_deg(n, (0, 0, -1)) < 2


def test_surface_normal_tilted_plane(cam):
    # plane rotated 45 degrees about x: normal (0, sin45, -cos45) facing the camera
    n_true = rot_x(45.0) @ np.array([0.0, 0.0, -1.0])
    depth = plane_depth_map(n_true, n_true @ np.array([0.0, 0.0, 500.0]))
    for px in [(160, 120), (60, 200), (300, 20)]:
        n = surface_normal_from_depth(depth, cam, px)
        assert angle_deg(n, n_true) < 5
        assert n[2] < 0


def test_surface_normal_missing_depth(cam):
    depth = np.zeros((240, 320), np.float32)
    depth[0, 0] = 100
    assert surface_normal_from_depth(depth, cam, (100, 100)) is None


def test_occlusion_filter_sphere_keeps_rim(cam):
    mask, depth = rasterize(sphere_mesh(40.0), cam, RigidTransform.from_translation((10, -5, 400)))
    c = extract_contour(mask)
    vis = occlusion_filter(c, depth, cam)
    assert len(vis) >= 0.95 * len(c)
    np.testing.assert_array_equal(vis.pixels, c.pixels[vis.kept])


def test_occlusion_filter_flat_square_keeps_all(cam):
    mask, depth = rasterize(quad_mesh(40.0, 40.0, 300.0), cam, IDENTITY)
    c = extract_contour(mask)
    assert len(occlusion_filter(c, depth, cam)) == len(c)


def test_occlusion_filter_convex_box_and_subset(cam):
    pose = RigidTransform(rot_y(30) @ rot_x(20), (0, 0, 350))
    mask, depth = rasterize(box_mesh((60, 40, 30)), cam, pose)
    c = extract_contour(mask)
    vis = occlusion_filter(c, depth, cam)
    assert len(vis) >= 0.9 * len(c)
    assert set(map(tuple, vis.pixels)) <= set(map(tuple, c.pixels))


def test_occlusion_filter_drops_occluder_edge(cam):
    # target sphere with a nearer bar covering its right half
    sphere = (sphere_mesh(40.0), RigidTransform.from_translation((0, 0, 400)))
    bar = (box_mesh((60, 200, 20)), RigidTransform.from_translation((30, 0, 300)))
    labels, depth, amodal = rasterize_scene([sphere, bar], cam)
    modal = labels == 0
    c = extract_contour(modal)
    px = c.pixels.astype(int)
    # provenance: a boundary cell borders the bar iff some 4-neighbour shows the bar
    pad = np.pad(labels, 1, constant_values=-1)
    nb = np.stack([pad[px[:, 1], px[:, 0] + 1], pad[px[:, 1] + 2, px[:, 0] + 1],
                   pad[px[:, 1] + 1, px[:, 0]], pad[px[:, 1] + 1, px[:, 0] + 2]])
    occ_edge = (nb == 1).any(axis=0)
    keep = np.zeros(len(c), bool)
    keep[occlusion_filter(c, depth, cam).kept] = True
    assert occ_edge.sum() > 20
    assert (~keep[occ_edge]).mean() >= 0.9
    assert keep[~occ_edge].mean() >= 0.9


# --------------------------------------------------------------------------
# model contours


def test_model_contour_round_trip_and_surface():
    mesh = instrument_mesh()
    cam = Camera(np.array([[900.0, 0, 320], [0, 900, 240], [0, 0, 1]]), IDENTITY, 640, 480, "c")
    pose = RigidTransform(rot_x(40) @ rot_y(-25), (5, -10, 450))
    mc = model_contour_3d(mesh, cam, pose)
    assert len(mc) > 100
    px, _ = project_points(cam, pose.apply(mc.points_object))
    assert np.abs(px - mc.pixels).max() <= 0.5
    rng = np.random.default_rng(0)
    for p in mc.points_object[rng.choice(len(mc), 60, replace=False)]:
        assert distance_to_mesh(p, mesh) <= 0.01 * mesh.diameter


def test_model_contour_sphere_rim(cam):
    r = 40.0
    mc = model_contour_3d(sphere_mesh(r, 3), cam, RigidTransform.from_translation((0, 0, 400)))
    dist = np.linalg.norm(mc.points_object, axis=1)
    assert np.all(np.abs(dist - r) <= 0.02 * r)
    # rim points lie near the tangent cone: z close to the sphere center depth
    assert np.abs(mc.points_object[:, 2]).max() < 0.3 * r


def test_model_contour_translation_shift(cam):
    mesh = sphere_mesh(30.0)
    a = model_contour_3d(mesh, cam, RigidTransform.from_translation((0, 0, 400)))
    b = model_contour_3d(mesh, cam, RigidTransform.from_translation((10, 0, 400)))
    shift = b.pixels.mean(axis=0) - a.pixels.mean(axis=0)
    np.testing.assert_allclose(shift, (500 * 10 / 400, 0), atol=1.0)


def test_model_contour_of_empty_render(cam):
    mc = model_contour_3d(box_mesh((10, 10, 10)), cam, RigidTransform.from_translation((0, 0, -100)))
    assert len(mc) == 0


def test_contour_subset_and_iteration():
    sq = np.zeros((10, 10), bool)
    sq[2:6, 2:6] = True
    c = extract_contour(sq)
    pts = list(c)
    assert len(pts) == len(c) == 12
    sub = c.subset(np.array([0, 3]))
    assert isinstance(sub, Contour) and len(sub) == 2
    np.testing.assert_array_equal(sub[1].pixel, c[3].pixel)
