"""Geometric foundations: rigid transforms, pinhole cameras, triangle meshes and rays.

Units are millimeters and pixels. Integer pixel coordinates address pixel
centers; ``u`` runs along image columns and ``v`` along rows (downward).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from mvpose.errors import BehindCameraError, DegenerateMeshError

_VALID_TOL = 1e-6


def _frozen(a, shape=None, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.flags.writeable = False
    return arr


# --------------------------------------------------------------------------
# SO(3) helpers
# --------------------------------------------------------------------------


def hat(w) -> np.ndarray:
    """Skew-symmetric matrix such that ``hat(w) @ x == np.cross(w, x)``."""
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def exp_so3(w) -> np.ndarray:
    """Rodrigues formula: axis-angle vector to rotation matrix."""
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < 1e-8:
        # second-order Taylor expansion
        return np.eye(3) + W + 0.5 * W @ W
    return np.eye(3) + (np.sin(theta) / theta) * W + ((1.0 - np.cos(theta)) / theta**2) * W @ W


def log_so3(R) -> np.ndarray:
    """Inverse of :func:`exp_so3`, returning an axis-angle vector with norm in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * v
    if np.pi - theta < 1e-6:
        # near pi the antisymmetric part vanishes; recover the axis from R + I
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * v


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return exp_so3(axis / np.linalg.norm(axis) * angle_rad)


def rot_x(deg: float) -> np.ndarray:
    return rotation_about_axis((1.0, 0.0, 0.0), np.deg2rad(deg))


def rot_y(deg: float) -> np.ndarray:
    return rotation_about_axis((0.0, 1.0, 0.0), np.deg2rad(deg))


def rot_z(deg: float) -> np.ndarray:
    return rotation_about_axis((0.0, 0.0, 1.0), np.deg2rad(deg))


def geodesic_angle_deg(Ra, Rb) -> float:
    """Angle of the relative rotation ``Ra^T Rb`` in degrees."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.rad2deg(np.arccos(np.clip(c, -1.0, 1.0))))


def is_rotation(R, tol: float = 1e-9) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) <= tol)


def project_to_so3(M) -> np.ndarray:
    """Closest rotation (Frobenius norm) to a 3x3 matrix."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=np.float64))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    return U @ D @ Vt


# --------------------------------------------------------------------------
# Rigid transforms
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """An element of SE(3) mapping ``x -> rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _frozen(self.rotation, (3, 3))
        t = _frozen(np.reshape(self.translation, -1), (3,))
        if not is_rotation(R, _VALID_TOL):
            raise ValueError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> RigidTransform:
        M = np.asarray(M, dtype=np.float64).reshape(4, 4)
        if not np.allclose(M[3], (0.0, 0.0, 0.0, 1.0)):
            raise ValueError("last row of a rigid 4x4 matrix must be (0, 0, 0, 1)")
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), t)

    @classmethod
    def from_rotation(cls, R) -> RigidTransform:
        return cls(R, np.zeros(3))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points) -> np.ndarray:
        """Transform a single point (3,) or an array of points (N, 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=atol)
            and np.allclose(self.translation, other.translation, atol=atol)
        )

    def __repr__(self) -> str:
        return f"RigidTransform(R={self.rotation.tolist()}, t={self.translation.tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


# --------------------------------------------------------------------------
# Cameras and rays
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError("ray direction must be non-zero")
        object.__setattr__(self, "origin", _frozen(np.reshape(self.origin, -1), (3,)))
        object.__setattr__(self, "direction", _frozen(d / n, (3,)))

    def at(self, s: float) -> np.ndarray:
        return self.origin + s * self.direction


@dataclass(frozen=True, eq=False)
class Camera:
    """Ideal pinhole camera with known intrinsics and world-to-camera extrinsics."""

    intrinsics: np.ndarray
    world_to_cam: RigidTransform
    width: int
    height: int
    view_id: str = "0"

    def __post_init__(self):
        K = _frozen(self.intrinsics, (3, 3))
        if K[2, 2] != 1.0 or K[0, 0] <= 0 or K[1, 1] <= 0 or np.any(K[np.tril_indices(3, -1)] != 0):
            raise ValueError("intrinsics must be upper triangular with K[2,2]=1 and positive focal lengths")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image dimensions must be positive")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "view_id", str(self.view_id))

    @property
    def K(self) -> np.ndarray:
        return self.intrinsics

    @property
    def cam_to_world(self) -> RigidTransform:
        return self.world_to_cam.inverse()

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.world_to_cam.rotation.T @ self.world_to_cam.translation

    def with_extrinsics(self, world_to_cam: RigidTransform) -> Camera:
        return Camera(self.intrinsics, world_to_cam, self.width, self.height, self.view_id)


def project_cam_points(K: np.ndarray, pts_cam: np.ndarray) -> np.ndarray:
    """Project camera-frame points (N, 3) to pixels (N, 2). No depth check."""
    z = pts_cam[:, 2]
    u = (K[0, 0] * pts_cam[:, 0] + K[0, 1] * pts_cam[:, 1]) / z + K[0, 2]
    v = K[1, 1] * pts_cam[:, 1] / z + K[1, 2]
    return np.stack([u, v], axis=1)


def project(camera: Camera, point_world) -> np.ndarray:
    """Project a world point to a pixel.

    Raises:
        BehindCameraError: if the point has non-positive camera-frame depth.
    """
    p = camera.world_to_cam.apply(np.asarray(point_world, dtype=np.float64).reshape(3))
    if p[2] <= 0.0:
        raise BehindCameraError(f"point has depth {p[2]:.6g} <= 0 in view {camera.view_id}")
    return project_cam_points(camera.intrinsics, p[None, :])[0]


def project_points(camera: Camera, points_world) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised projection returning ``(pixels, depths)``; callers check depths."""
    p = camera.world_to_cam.apply(np.asarray(points_world, dtype=np.float64).reshape(-1, 3))
    return project_cam_points(camera.intrinsics, p), p[:, 2]


def backproject(K: np.ndarray, pixels, depths) -> np.ndarray:
    """Camera-frame 3D points for pixels (N, 2) at z-depths (N,)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    z = np.asarray(depths, dtype=np.float64).reshape(-1)
    y = (pixels[:, 1] - K[1, 2]) / K[1, 1]
    x = (pixels[:, 0] - K[0, 2] - K[0, 1] * y) / K[0, 0]
    return np.stack([x * z, y * z, z], axis=1)


def pixel_to_ray(camera: Camera, pixel) -> Ray:
    """World-frame ray from the camera center through ``pixel``."""
    d_cam = backproject(camera.intrinsics, np.asarray(pixel, dtype=np.float64).reshape(1, 2), [1.0])[0]
    d_world = camera.world_to_cam.rotation.T @ d_cam
    return Ray(camera.center, d_world)


# --------------------------------------------------------------------------
# Meshes
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SymmetryAnnotation:
    """Either a finite set of object-frame symmetry transforms or a continuous axis."""

    kind: str
    transforms: tuple[RigidTransform, ...] = ()
    axis: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("discrete", "continuous-axis"):
            raise ValueError(f"unknown symmetry kind {self.kind!r}")
        if self.kind == "continuous-axis":
            if self.axis is None:
                raise ValueError("continuous-axis symmetry requires an axis")
            a = np.asarray(self.axis, dtype=np.float64).reshape(3)
            if abs(np.linalg.norm(a) - 1.0) > 1e-9:
                raise ValueError("symmetry axis must have unit norm")
            object.__setattr__(self, "axis", _frozen(a))
        else:
            object.__setattr__(self, "transforms", tuple(self.transforms))

    @classmethod
    def discrete(cls, transforms: Sequence[RigidTransform]) -> SymmetryAnnotation:
        return cls("discrete", tuple(transforms))

    @classmethod
    def continuous(cls, axis) -> SymmetryAnnotation:
        a = np.asarray(axis, dtype=np.float64)
        return cls("continuous-axis", axis=a / np.linalg.norm(a))


def mesh_diameter(mesh_or_vertices) -> float:
    """Maximum pairwise vertex distance.

    Exact: the farthest pair always lies on the convex hull, so the pairwise
    search runs over hull vertices only when there are many points.
    """
    V = mesh_or_vertices.vertices if isinstance(mesh_or_vertices, TriMesh) else mesh_or_vertices
    V = np.asarray(V, dtype=np.float64).reshape(-1, 3)
    if len(V) < 2:
        raise DegenerateMeshError("mesh diameter needs at least two vertices")
    V = np.unique(V, axis=0)
    if len(V) > 2000:
        from scipy.spatial import ConvexHull, QhullError

        try:
            V = V[ConvexHull(V).vertices]
        except QhullError:
            pass  # coplanar input: fall through to the chunked brute force
    best = 0.0
    for start in range(0, len(V), 1024):
        block = V[start : start + 1024]
        d2 = ((block[:, None, :] - V[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    diameter: float = -1.0
    symmetries: tuple[SymmetryAnnotation, ...] = ()
    name: str = ""

    def __post_init__(self):
        V = _frozen(np.reshape(self.vertices, (-1, 3)))
        F = _frozen(np.reshape(self.triangles, (-1, 3)), dtype=np.int64)
        if len(V) == 0 or len(F) == 0:
            raise DegenerateMeshError("mesh must have vertices and triangles")
        if F.min() < 0 or F.max() >= len(V):
            raise DegenerateMeshError("triangle index out of range")
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)
        object.__setattr__(self, "symmetries", tuple(self.symmetries))
        if self.diameter is None or self.diameter < 0:
            object.__setattr__(self, "diameter", mesh_diameter(V))

    @property
    def is_symmetric(self) -> bool:
        return len(self.symmetries) > 0

    def transformed(self, T: RigidTransform) -> TriMesh:
        return TriMesh(T.apply(self.vertices), self.triangles, self.diameter, self.symmetries, self.name)

    def with_symmetries(self, symmetries) -> TriMesh:
        return TriMesh(self.vertices, self.triangles, self.diameter, tuple(symmetries), self.name)
