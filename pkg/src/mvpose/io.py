"""File formats: cameras, meshes, symmetries, masklets (RLE/PNG), features and depth maps."""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from mvpose.core import Camera, RigidTransform, SymmetryAnnotation, TriMesh
from mvpose.detect import Masklet, TemplateLibrary

PathLike = str | Path


def _read_json(path: PathLike):
    with open(path) as f:
        return json.load(f)


def write_json(path: PathLike, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f, indent=1)


# --------------------------------------------------------------------------
# Cameras
# --------------------------------------------------------------------------


def camera_to_dict(cam: Camera) -> dict:
    return {
        "K": cam.intrinsics.ravel().tolist(),
        "T_world_to_cam": cam.world_to_cam.matrix().ravel().tolist(),
        "width": cam.width,
        "height": cam.height,
        "view_id": cam.view_id,
    }


def camera_from_dict(d: Mapping) -> Camera:
    K = np.asarray(d["K"], dtype=np.float64).reshape(3, 3)
    T = RigidTransform.from_matrix(np.asarray(d["T_world_to_cam"], dtype=np.float64).reshape(4, 4))
    return Camera(K, T, int(d["width"]), int(d["height"]), str(d["view_id"]))


def load_camera(path: PathLike) -> Camera:
    return camera_from_dict(_read_json(path))


def save_camera(path: PathLike, cam: Camera) -> None:
    write_json(path, camera_to_dict(cam))


# --------------------------------------------------------------------------
# Meshes and symmetries
# --------------------------------------------------------------------------


def load_obj(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append((idx[0], idx[k], idx[k + 1]))
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64)


def save_obj(path: PathLike, mesh: TriMesh) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for a, b, c in mesh.triangles:
            f.write(f"f {a + 1} {b + 1} {c + 1}\n")


def load_ply(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    from plyfile import PlyData

    ply = PlyData.read(str(path))
    v = ply["vertex"]
    V = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    faces = []
    face_el = ply["face"]
    key = "vertex_indices" if "vertex_indices" in face_el.data.dtype.names else "vertex_index"
    for poly in face_el[key]:
        poly = list(poly)
        for k in range(1, len(poly) - 1):
            faces.append((poly[0], poly[k], poly[k + 1]))
    return V, np.asarray(faces, dtype=np.int64)


def symmetry_to_dict(sym: SymmetryAnnotation) -> dict:
    if sym.kind == "continuous-axis":
        return {"kind": sym.kind, "axis": sym.axis.tolist()}
    return {"kind": sym.kind, "transforms": [t.matrix().ravel().tolist() for t in sym.transforms]}


def load_symmetries(path: PathLike | None) -> list[SymmetryAnnotation]:
    if path is None:
        return []
    data = _read_json(path)
    entries = data if isinstance(data, list) else data.get("symmetries", [data])
    out = []
    for e in entries:
        if e["kind"] == "continuous-axis":
            out.append(SymmetryAnnotation.continuous(e["axis"]))
        else:
            out.append(SymmetryAnnotation.discrete([RigidTransform.from_matrix(m) for m in e["transforms"]]))
    return out


def save_symmetries(path: PathLike, symmetries: Sequence[SymmetryAnnotation]) -> None:
    write_json(path, {"symmetries": [symmetry_to_dict(s) for s in symmetries]})


def load_mesh(path: PathLike, symmetry_path: PathLike | None = None, name: str = "") -> TriMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        V, F = load_obj(path)
    elif suffix == ".ply":
        V, F = load_ply(path)
    else:
        raise ValueError(f"unsupported mesh format {suffix!r}")
    return TriMesh(V, F, symmetries=tuple(load_symmetries(symmetry_path)), name=name or path.stem)


# --------------------------------------------------------------------------
# Run-length encoding (COCO uncompressed RLE: column-major, starts with zeros)
# --------------------------------------------------------------------------


def rle_encode(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=bool)
    flat = m.ravel(order="F").astype(np.int8)
    changes = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], changes, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: Mapping) -> np.ndarray:
    H, W = (int(x) for x in rle["size"])
    counts = rle["counts"]
    if isinstance(counts, str):
        raise ValueError("compressed RLE strings are not supported; use integer count lists")
    flat = np.zeros(H * W, dtype=bool)
    pos, val = 0, False
    for c in counts:
        c = int(c)
        if val:
            flat[pos : pos + c] = True
        pos += c
        val = not val
    if pos != H * W:
        raise ValueError(f"RLE counts sum to {pos}, expected {H * W}")
    return flat.reshape((H, W), order="F")


# --------------------------------------------------------------------------
# Feature files: uint32 count, uint32 dim, then count*dim little-endian float32
# --------------------------------------------------------------------------


def write_features(path: PathLike, features: np.ndarray) -> None:
    F = np.atleast_2d(np.asarray(features, dtype="<f4"))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(struct.pack("<II", F.shape[0], F.shape[1]))
        f.write(F.tobytes(order="C"))


def read_features(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        count, dim = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != count * dim:
        raise ValueError(f"feature file {path} holds {data.size} floats, header says {count}x{dim}")
    return data.reshape(count, dim).astype(np.float64)


def load_template_library(path: PathLike) -> TemplateLibrary:
    """JSON manifest ``{"objects": {class_id: {"features": file, "poses": [[16 floats], ...]}}}``."""
    path = Path(path)
    data = _read_json(path)
    feats, poses = {}, {}
    for obj, entry in data["objects"].items():
        feats[obj] = read_features(path.parent / entry["features"])
        if entry.get("poses"):
            poses[obj] = [RigidTransform.from_matrix(p) for p in entry["poses"]]
    return TemplateLibrary(feats, poses)


def save_template_library(path: PathLike, library: TemplateLibrary) -> None:
    path = Path(path)
    objects = {}
    for obj in library.object_ids:
        fname = f"templates_{obj}.bin"
        write_features(path.parent / fname, library.features[obj])
        entry = {"features": fname}
        if obj in library.poses:
            entry["poses"] = [p.matrix().ravel().tolist() for p in library.poses[obj]]
        objects[obj] = entry
    write_json(path, {"objects": objects})


# --------------------------------------------------------------------------
# Masklets
# --------------------------------------------------------------------------


def save_masklets(path: PathLike, view_id: str, masklets: Sequence[Masklet], feature_dir: PathLike | None = None) -> None:
    path = Path(path)
    H, W = masklets[0].mask.shape if masklets else (0, 0)
    entries = []
    for m in masklets:
        e = {"masklet_id": m.masklet_id, "bbox": list(m.bbox), "area": m.area, "segmentation": rle_encode(m.mask)}
        if m.features is not None and feature_dir is not None:
            fpath = Path(feature_dir) / f"{view_id}_{m.masklet_id}.bin"
            write_features(fpath, m.features)
            e["features"] = _relpath(fpath, path.parent)
        entries.append(e)
    write_json(path, {"view_id": view_id, "height": H, "width": W, "masklets": entries})


def _relpath(target: PathLike, start: PathLike) -> str:
    import os

    return os.path.relpath(Path(target).resolve(), Path(start).resolve())


def load_masklets(path: PathLike) -> tuple[str, list[Masklet]]:
    """Read a masklet index: either inline RLE ``segmentation`` or a ``png`` path per entry."""
    path = Path(path)
    data = _read_json(path)
    view_id = str(data["view_id"])
    out = []
    for e in data["masklets"]:
        if "segmentation" in e:
            mask = rle_decode(e["segmentation"])
        elif "png" in e:
            img = cv2.imread(str(path.parent / e["png"]), cv2.IMREAD_UNCHANGED)
            if img is None:
                raise FileNotFoundError(path.parent / e["png"])
            mask = (img if img.ndim == 2 else img[..., 0]) > 127
        else:
            raise ValueError(f"masklet {e.get('masklet_id')} has neither segmentation nor png")
        features = read_features(path.parent / e["features"]) if e.get("features") else None
        if not mask.any():
            continue
        out.append(Masklet(view_id, str(e["masklet_id"]), mask, features))
    return view_id, out


# --------------------------------------------------------------------------
# Images
# --------------------------------------------------------------------------


def write_depth_png(path: PathLike, depth_mm: np.ndarray, scale: float) -> None:
    """16-bit PNG with value = depth / scale; 0 marks invalid pixels."""
    d = np.asarray(depth_mm, dtype=np.float64) / scale
    if d.max(initial=0.0) > 65535:
        raise ValueError("depth exceeds the 16-bit range for this scale")
    img = np.where(depth_mm > 0, np.clip(np.rint(d), 1, 65535), 0).astype(np.uint16)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), img):
        raise OSError(f"could not write {path}")


def read_depth_png(path: PathLike, scale: float) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(path)
    return img.astype(np.float32) * np.float32(scale)


def write_mask_png(path: PathLike, mask: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cv2.imwrite(str(path), np.asarray(mask, dtype=np.uint8) * 255)
