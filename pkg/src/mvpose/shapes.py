"""Procedural meshes for tests, synthetic scenes and viewpoint sampling."""

from __future__ import annotations

import numpy as np

from mvpose.core import RigidTransform, TriMesh, rot_y, rot_z


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and faces of a subdivided icosahedron (12, 42, 162, 642, ... vertices)."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]  # fmt: skip
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]  # fmt: skip
    V = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = V[i] + V[j]
                V.append(m / np.linalg.norm(m))
                cache[key] = len(V) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(V) * radius, np.array(faces, dtype=np.int64)


def sphere_mesh(radius: float = 50.0, subdivisions: int = 3) -> TriMesh:
    V, F = icosphere(subdivisions, radius)
    return TriMesh(V, F, name="sphere")


def box_vertices_faces(size, center=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    sx, sy, sz = np.asarray(size, dtype=np.float64) / 2.0
    c = np.asarray(center, dtype=np.float64)
    V = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + c
    # vertex index = 4*ix + 2*iy + iz
    F = np.array(
        [
            (0, 1, 3), (0, 3, 2),  # -x
            (4, 6, 7), (4, 7, 5),  # +x
            (0, 4, 5), (0, 5, 1),  # -y
            (2, 3, 7), (2, 7, 6),  # +y
            (0, 2, 6), (0, 6, 4),  # -z
            (1, 5, 7), (1, 7, 3),  # +z
        ],
        dtype=np.int64,
    )  # fmt: skip
    return V, F


def box_mesh(size=(40.0, 40.0, 40.0), center=(0.0, 0.0, 0.0), name: str = "box") -> TriMesh:
    V, F = box_vertices_faces(size, center)
    return TriMesh(V, F, name=name)


def quad_mesh(width: float, height: float, z: float = 0.0) -> TriMesh:
    """Axis-aligned rectangle in the plane ``z`` (object frame), two triangles."""
    w, h = width / 2.0, height / 2.0
    V = np.array([[-w, -h, z], [w, -h, z], [w, h, z], [-w, h, z]])
    return TriMesh(V, np.array([(0, 1, 2), (0, 2, 3)]), name="quad")


def merge_meshes(parts: list[tuple[np.ndarray, np.ndarray]], name: str = "") -> TriMesh:
    verts, faces, offset = [], [], 0
    for V, F in parts:
        verts.append(V)
        faces.append(F + offset)
        offset += len(V)
    return TriMesh(np.concatenate(verts), np.concatenate(faces), name=name)


def _posed_box(size, T: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    V, F = box_vertices_faces(size)
    return T.apply(V), F


def instrument_mesh(scale: float = 1.0) -> TriMesh:
    """An asymmetric, clamp-like rigid tool built from overlapping boxes.

    A long handle, an offset ring-grip block and a jaw bent out of plane give
    every rotation a distinct silhouette. Centered on its bounding box.
    """
    parts = [
        _posed_box((120.0, 18.0, 12.0), RigidTransform.from_translation((0.0, 0.0, 0.0))),
        _posed_box((30.0, 30.0, 14.0), RigidTransform.from_translation((-50.0, 18.0, 0.0))),
        _posed_box((44.0, 12.0, 10.0), RigidTransform(rot_z(25.0) @ rot_y(-20.0), (72.0, 10.0, 9.0))),
        _posed_box((20.0, 16.0, 26.0), RigidTransform.from_translation((28.0, -10.0, 8.0))),
    ]
    V = np.concatenate([p[0] for p in parts]) * scale
    shift = (V.min(axis=0) + V.max(axis=0)) / 2.0
    return merge_meshes([(p[0] * scale - shift, p[1]) for p in parts], name="instrument")


def occluder_mesh(size=(30.0, 200.0, 20.0)) -> TriMesh:
    """A bar standing in for a hand or a second tool crossing the target."""
    return box_mesh(size, name="occluder")
