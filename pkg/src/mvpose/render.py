"""Silhouette/depth rasterization, contour extraction, normals and the occlusion test.

Image arrays are indexed ``[row, col]``; pixel vectors are ``(u, v) = (col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

from mvpose import _kernels
from mvpose.core import Camera, RigidTransform, TriMesh, backproject, compose, project_cam_points
from mvpose.errors import UndefinedNormalError

NEAR_PLANE_MM = 1e-3
DEFAULT_NORMAL_RADIUS = 3
DEGENERATE_PROJ_NORM = 1e-6

_NEIGHBORS_8 = np.array([(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)], dtype=np.float64)


# --------------------------------------------------------------------------
# Rasterization
# --------------------------------------------------------------------------


def _clip_near(tri_cam: np.ndarray, near: float) -> list[np.ndarray]:
    """Clip one camera-frame triangle against the plane z = near."""
    out: list[np.ndarray] = []
    poly = []
    for i in range(3):
        a, b = tri_cam[i], tri_cam[(i + 1) % 3]
        a_in, b_in = a[2] >= near, b[2] >= near
        if a_in:
            poly.append(a)
        if a_in != b_in:
            s = (near - a[2]) / (b[2] - a[2])
            poly.append(a + s * (b - a))
    for i in range(1, len(poly) - 1):
        out.append(np.stack([poly[0], poly[i], poly[i + 1]]))
    return out


def screen_triangles(mesh: TriMesh, camera: Camera, pose: RigidTransform, near: float = NEAR_PLANE_MM) -> np.ndarray:
    """Camera-frame triangles converted to (T, 3, 3) arrays of (u, v, z), near-clipped."""
    obj_to_cam = compose(camera.world_to_cam, pose)
    V = obj_to_cam.apply(mesh.vertices)
    tris = V[mesh.triangles]
    z = tris[:, :, 2]
    front = (z >= near).all(axis=1)
    partial = ~front & (z >= near).any(axis=1)
    pieces = [tris[front]]
    if partial.any():
        clipped = [c for t in tris[partial] for c in _clip_near(t, near)]
        if clipped:
            pieces.append(np.stack(clipped))
    cam_tris = np.concatenate(pieces, axis=0)
    if len(cam_tris) == 0:
        return np.zeros((0, 3, 3))
    flat = cam_tris.reshape(-1, 3)
    uv = project_cam_points(camera.intrinsics, flat)
    out = np.concatenate([uv, flat[:, 2:3]], axis=1).reshape(-1, 3, 3)
    return np.ascontiguousarray(out)


def rasterize(mesh: TriMesh, camera: Camera, pose: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered silhouette and depth of ``mesh`` placed at ``pose`` (object to world).

    Returns ``(mask, depth)``: a boolean (H, W) mask and float32 depth in
    millimeters with 0 for empty pixels. An object entirely behind the camera or
    outside the frame yields an all-false mask.
    """
    tris = screen_triangles(mesh, camera, pose)
    depth = _kernels.rasterize_screen_triangles(tris, camera.width, camera.height)
    return depth > 0, depth


def rasterize_scene(
    items: Sequence[tuple[TriMesh, RigidTransform]], camera: Camera
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Composite several meshes into one z-buffer.

    Returns ``(labels, depth, amodal_masks)`` where ``labels`` holds the index
    of the visible item per pixel (-1 for background) and ``amodal_masks`` is a
    (n_items, H, W) stack of unoccluded silhouettes.
    """
    H, W = camera.height, camera.width
    depth = np.zeros((H, W), dtype=np.float32)
    labels = np.full((H, W), -1, dtype=np.int32)
    amodal = np.zeros((len(items), H, W), dtype=bool)
    for i, (mesh, pose) in enumerate(items):
        m, d = rasterize(mesh, camera, pose)
        amodal[i] = m
        closer = m & ((depth == 0) | (d < depth))
        depth[closer] = d[closer]
        labels[closer] = i
    return labels, depth, amodal


# --------------------------------------------------------------------------
# Contours
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ContourPoint2D:
    pixel: np.ndarray
    outward_normal: np.ndarray


@dataclass(frozen=True, eq=False)
class Contour:
    """Boundary cells of a mask in raster-scan order, with unit outward normals."""

    pixels: np.ndarray  # (N, 2) float, (u, v)
    normals: np.ndarray  # (N, 2)

    def __len__(self) -> int:
        return len(self.pixels)

    def __iter__(self) -> Iterator[ContourPoint2D]:
        for p, n in zip(self.pixels, self.normals):
            yield ContourPoint2D(p, n)

    def __getitem__(self, idx) -> ContourPoint2D:
        return ContourPoint2D(self.pixels[idx], self.normals[idx])

    def subset(self, keep: np.ndarray) -> Contour:
        return Contour(self.pixels[keep], self.normals[keep])


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Set cells with at least one unset 4-neighbor; outside the image counts as unset."""
    m = np.asarray(mask, dtype=bool)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~interior


def _smoothed_gradient(mask: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Central-difference gradient (d/du, d/dv) of the 3x3 box-smoothed occupancy."""
    S = ndimage.uniform_filter(np.asarray(mask, dtype=np.float64), size=3, mode="constant", cval=0.0)
    Sp = np.pad(S, 1, constant_values=0.0)
    r, c = rows + 1, cols + 1
    gu = (Sp[r, c + 1] - Sp[r, c - 1]) / 2.0
    gv = (Sp[r + 1, c] - Sp[r - 1, c]) / 2.0
    return np.stack([gu, gv], axis=1)


def _unset_neighbor_direction(mask: np.ndarray, row: int, col: int) -> np.ndarray:
    H, W = mask.shape
    acc = np.zeros(2)
    for du, dv in _NEIGHBORS_8:
        rr, cc = row + int(dv), col + int(du)
        if not (0 <= rr < H and 0 <= cc < W) or not mask[rr, cc]:
            acc += np.array([du, dv]) / np.hypot(du, dv)
    return acc


def outward_normal(mask: np.ndarray, pixel) -> np.ndarray:
    """Unit 2D normal pointing from the set region toward the unset region.

    Raises:
        UndefinedNormalError: when both the smoothed gradient and the unset
            neighbor directions cancel out (e.g. an isolated pixel).
    """
    mask = np.asarray(mask, dtype=bool)
    col, row = int(round(pixel[0])), int(round(pixel[1]))
    g = _smoothed_gradient(mask, np.array([row]), np.array([col]))[0]
    n = np.linalg.norm(g)
    if n > 1e-12:
        return -g / n
    acc = _unset_neighbor_direction(mask, row, col)
    n = np.linalg.norm(acc)
    if n < 1e-12:
        raise UndefinedNormalError(f"no outward direction at pixel ({col}, {row})")
    return acc / n


def extract_contour(mask: np.ndarray) -> Contour:
    """All 4-connected boundary cells of ``mask`` with outward normals.

    Where no normal is defined (isolated pixels, one-pixel-wide symmetric
    features) the normal falls back to the direction from the mask centroid,
    then to (0, -1).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("cannot extract the contour of an empty mask")
    rows, cols = np.nonzero(boundary_mask(mask))
    pixels = np.stack([cols, rows], axis=1).astype(np.float64)
    g = _smoothed_gradient(mask, rows, cols)
    norms = np.linalg.norm(g, axis=1)
    normals = np.zeros_like(g)
    ok = norms > 1e-12
    normals[ok] = -g[ok] / norms[ok, None]
    if not ok.all():
        vv, uu = np.nonzero(mask)
        centroid = np.array([uu.mean(), vv.mean()])
        for i in np.flatnonzero(~ok):
            d = _unset_neighbor_direction(mask, rows[i], cols[i])
            if np.linalg.norm(d) < 1e-12:
                d = pixels[i] - centroid
            if np.linalg.norm(d) < 1e-12:
                d = np.array([0.0, -1.0])
            normals[i] = d / np.linalg.norm(d)
    return Contour(pixels, normals)


# --------------------------------------------------------------------------
# Surface normals and the occlusion filter
# --------------------------------------------------------------------------


def surface_normals_from_depth(
    depth: np.ndarray, camera: Camera, pixels: np.ndarray, radius: int = DEFAULT_NORMAL_RADIUS
) -> tuple[np.ndarray, np.ndarray]:
    """Batched camera-frame surface normals at ``pixels`` (N, 2).

    Depth over the valid pixels of a (2r+1)^2 window is fitted as
    ``z = z0 + a du + b dv`` in pixel offsets. The back-projected surface
    ``P(u, v) = z(u, v) K^-1 (u, v, 1)`` then has tangents
    ``t_u = a r + z0 K^-1 e_u`` and ``t_v = b r + z0 K^-1 e_v`` with ``r`` the
    pixel's ray, and the normal is ``t_u x t_v`` turned to face the camera
    (``n . r < 0``). At a depth step the window straddles both surfaces and the
    fit reports the jump as a steep slope toward the far side.

    Returns ``(normals (N, 3), valid (N,))``.
    """
    depth = np.asarray(depth, dtype=np.float64)
    H, W = depth.shape
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    n = len(pixels)
    if n == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    offs = np.arange(-radius, radius + 1, dtype=np.float64)
    du, dv = np.meshgrid(offs, offs)
    du, dv = du.ravel(), dv.ravel()
    pu = np.rint(pixels[:, 0]).astype(np.int64)
    pv = np.rint(pixels[:, 1]).astype(np.int64)
    cu = pu[:, None] + du.astype(np.int64)[None, :]
    cv = pv[:, None] + dv.astype(np.int64)[None, :]
    inb = (cu >= 0) & (cu < W) & (cv >= 0) & (cv < H)
    z = np.zeros(cu.shape)
    z[inb] = depth[cv[inb], cu[inb]]
    w = (z > 0).astype(np.float64)

    cnt = w.sum(axis=1)
    safe = np.maximum(cnt, 1.0)
    mu = (w * du).sum(1) / safe
    mv = (w * dv).sum(1) / safe
    mz = (w * z).sum(1) / safe
    Uc, Vc, Zc = (du - mu[:, None]) * w, (dv - mv[:, None]) * w, (z - mz[:, None]) * w
    suu, svv, suv = (Uc * Uc).sum(1), (Vc * Vc).sum(1), (Uc * Vc).sum(1)
    suz, svz = (Uc * Zc).sum(1), (Vc * Zc).sum(1)
    det = suu * svv - suv * suv
    ok = (cnt >= 3) & (det > 1e-10 * (suu + svv) ** 2) & (det > 0)
    a = np.zeros(n)
    b = np.zeros(n)
    a[ok] = (svv[ok] * suz[ok] - suv[ok] * svz[ok]) / det[ok]
    b[ok] = (suu[ok] * svz[ok] - suv[ok] * suz[ok]) / det[ok]
    z0 = mz - a * mu - b * mv
    ok &= z0 > 0

    Kinv = np.linalg.inv(camera.intrinsics)
    rays = np.stack([pu, pv, np.ones(n)], axis=1).astype(np.float64) @ Kinv.T
    t_u = a[:, None] * rays + z0[:, None] * Kinv[:, 0]
    t_v = b[:, None] * rays + z0[:, None] * Kinv[:, 1]
    normals = np.cross(t_u, t_v)
    flip = (normals * rays).sum(axis=1) > 0
    normals[flip] = -normals[flip]
    norm = np.linalg.norm(normals, axis=1)
    ok &= norm > 0
    normals[ok] /= norm[ok, None]
    normals[~ok] = 0.0
    return normals, ok


def surface_normal_from_depth(depth, camera: Camera, pixel, radius: int = DEFAULT_NORMAL_RADIUS):
    """Unit camera-frame normal at ``pixel`` or ``None`` when too few valid depths exist."""
    normals, ok = surface_normals_from_depth(depth, camera, np.asarray(pixel, dtype=np.float64)[None], radius)
    return normals[0] if ok[0] else None


@dataclass(frozen=True, eq=False)
class VisibleContourSet:
    view_id: str
    contour: Contour
    kept: np.ndarray  # indices into the unfiltered contour

    @property
    def pixels(self) -> np.ndarray:
        return self.contour.pixels

    @property
    def points(self) -> list[ContourPoint2D]:
        return list(self.contour)

    def __len__(self) -> int:
        return len(self.contour)


def occlusion_test(
    contour: Contour, depth: np.ndarray, camera: Camera, radius: int = DEFAULT_NORMAL_RADIUS
) -> np.ndarray:
    """Boolean keep-flags: a point survives iff ``n_mask . n_proj > 0``.

    ``n_proj`` is the normalized image-plane (x, y) part of the depth normal.
    Points without a computable normal are dropped; points whose surface faces
    the camera head-on (degenerate ``n_proj``) are kept.
    """
    if len(contour) == 0:
        return np.zeros(0, dtype=bool)
    normals, ok = surface_normals_from_depth(depth, camera, contour.pixels, radius)
    proj = normals[:, :2]
    pn = np.linalg.norm(proj, axis=1)
    degenerate = ok & (pn < DEGENERATE_PROJ_NORM)
    dots = (contour.normals * proj).sum(axis=1)
    return degenerate | (ok & ~degenerate & (dots > 0))


def occlusion_filter(
    contour: Contour, depth: np.ndarray, camera: Camera, radius: int = DEFAULT_NORMAL_RADIUS
) -> VisibleContourSet:
    keep = occlusion_test(contour, depth, camera, radius)
    idx = np.flatnonzero(keep)
    return VisibleContourSet(camera.view_id, contour.subset(idx), idx)


# --------------------------------------------------------------------------
# Rendered model contours
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ModelContour:
    """Rendered silhouette contour pixels and their object-frame surface points."""

    view_id: str
    pixels: np.ndarray  # (N, 2)
    points_object: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.pixels)


def model_contour_from_render(
    mask: np.ndarray, depth: np.ndarray, camera: Camera, pose: RigidTransform
) -> ModelContour:
    if not mask.any():
        return ModelContour(camera.view_id, np.zeros((0, 2)), np.zeros((0, 3)))
    rows, cols = np.nonzero(boundary_mask(mask))
    pixels = np.stack([cols, rows], axis=1).astype(np.float64)
    pts_cam = backproject(camera.intrinsics, pixels, depth[rows, cols].astype(np.float64))
    obj_to_cam = compose(camera.world_to_cam, pose)
    pts_obj = obj_to_cam.inverse().apply(pts_cam)
    return ModelContour(camera.view_id, pixels, pts_obj)


def model_contour_3d(mesh: TriMesh, camera: Camera, pose: RigidTransform) -> ModelContour:
    """Back-project the rendered silhouette contour into the object frame."""
    mask, depth = rasterize(mesh, camera, pose)
    return model_contour_from_render(mask, depth, camera, pose)
