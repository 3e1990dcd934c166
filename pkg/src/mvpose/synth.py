"""Ground-truthed synthetic multi-view scenes: cameras on a hemisphere, posed meshes, optional occluder."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from mvpose import io
from mvpose.core import Camera, RigidTransform, TriMesh
from mvpose.detect import Masklet, TemplateLibrary
from mvpose.render import rasterize_scene
from mvpose.shapes import instrument_mesh, occluder_mesh

MAX_ATTEMPTS = 100
FEATURE_DIM = 64


@dataclass
class SceneSpec:
    meshes: Mapping[str, TriMesh] = field(default_factory=lambda: {"instrument": instrument_mesh()})
    instances: Sequence[str] | None = None  # class ids to place; default one per mesh
    n_views: int = 5
    radius_mm: float = 450.0
    elevation_deg: tuple[float, float] = (25.0, 65.0)
    focal_px: float = 900.0
    width: int = 640
    height: int = 480
    position_jitter_mm: float = 20.0
    separation_mm: float | None = None
    occluder: bool = False
    occluder_coverage: tuple[float, float] = (0.1, 0.5)
    margin_px: int = 4
    seed: int = 0
    with_features: bool = True


@dataclass(eq=False)
class SyntheticScene:
    cameras: list[Camera]
    meshes: dict[str, TriMesh]
    instance_classes: list[str]
    gt_poses: list[RigidTransform]
    depth: dict[str, np.ndarray]
    labels: dict[str, np.ndarray]  # instance index per pixel; occluder = n_instances; -1 background
    modal_masks: dict[str, list[np.ndarray]]  # per view, per instance
    amodal_masks: dict[str, list[np.ndarray]]
    masklets: dict[str, list[Masklet]]
    occluder: tuple[TriMesh, RigidTransform] | None = None
    occluded_view: str | None = None
    templates: TemplateLibrary | None = None
    seed: int = 0

    @property
    def diameters(self) -> dict[str, float]:
        return {k: m.diameter for k, m in self.meshes.items()}

    def gt_masks_by_class(self) -> dict[str, dict[str, list[np.ndarray]]]:
        """``view_id -> class_id -> modal masks`` for oracle scoring."""
        out: dict[str, dict[str, list[np.ndarray]]] = {}
        for v, masks in self.modal_masks.items():
            per = out.setdefault(v, {})
            for cls, m in zip(self.instance_classes, masks):
                if m.any():
                    per.setdefault(cls, []).append(m)
        return out


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target`` (y down in image)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (1.0, 0.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])  # rows: camera axes in world coordinates
    return RigidTransform(R, -R @ eye)


def hemisphere_cameras(spec: SceneSpec, rng: np.random.Generator) -> list[Camera]:
    K = np.array([[spec.focal_px, 0.0, spec.width / 2.0], [0.0, spec.focal_px, spec.height / 2.0], [0.0, 0.0, 1.0]])
    cams = []
    offset = rng.uniform(0, 2 * np.pi)
    lo, hi = np.deg2rad(spec.elevation_deg[0]), np.deg2rad(spec.elevation_deg[1])
    for i in range(spec.n_views):
        az = offset + 2 * np.pi * i / spec.n_views + rng.uniform(-0.2, 0.2)
        el = rng.uniform(lo, hi)
        eye = spec.radius_mm * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        target = rng.uniform(-5.0, 5.0, size=3)
        cams.append(Camera(K, look_at(eye, target), spec.width, spec.height, f"v{i}"))
    return cams


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    return Rotation.random(random_state=rng).as_matrix()


def _fits(labels_amodal: np.ndarray, margin: int) -> bool:
    """Silhouette is non-empty and stays ``margin`` pixels clear of the image border."""
    if not labels_amodal.any():
        return False
    rows, cols = np.nonzero(labels_amodal)
    H, W = labels_amodal.shape
    return rows.min() >= margin and cols.min() >= margin and rows.max() < H - margin and cols.max() < W - margin


def _place_instances(spec: SceneSpec, classes: list[str], rng) -> list[RigidTransform]:
    n = len(classes)
    if n == 1:
        centers = [rng.uniform(-spec.position_jitter_mm, spec.position_jitter_mm, size=3)]
    else:
        sep = spec.separation_mm or 1.2 * max(spec.meshes[c].diameter for c in classes)
        ring = sep / (2 * np.sin(np.pi / n))
        phase = rng.uniform(0, 2 * np.pi)
        centers = [
            np.array([ring * np.cos(phase + 2 * np.pi * k / n), ring * np.sin(phase + 2 * np.pi * k / n), 0.0])
            + rng.uniform(-5.0, 5.0, size=3)
            for k in range(n)
        ]
    return [RigidTransform(random_rotation(rng), c) for c in centers]


def _place_occluder(
    spec: SceneSpec, target: RigidTransform, target_mesh: TriMesh, camera: Camera, rng
) -> RigidTransform:
    """Bar between ``camera`` and the target, crossing the line of sight with a lateral offset."""
    c = target.translation
    to_cam = camera.center - c
    dist = np.linalg.norm(to_cam)
    view_dir = to_cam / dist
    d = target_mesh.diameter
    along = rng.uniform(0.25, 0.45) * dist
    # lateral axes of the view
    a = np.cross(view_dir, (0.0, 0.0, 1.0))
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(view_dir, (1.0, 0.0, 0.0))
    a /= np.linalg.norm(a)
    b = np.cross(view_dir, a)
    theta = rng.uniform(0, np.pi)
    long_axis = np.cos(theta) * a + np.sin(theta) * b
    side = np.cross(view_dir, long_axis)
    scale = (dist - along) / dist  # the occluder is nearer, so it appears larger
    center = c + along * view_dir + side * rng.uniform(-0.3, 0.3) * d * scale
    R = np.stack([side, long_axis, view_dir], axis=1)  # box x = side, y = long axis, z = depth
    if np.linalg.det(R) < 0:
        R[:, 0] = -R[:, 0]
    return RigidTransform(R, center)


def _synthetic_features(classes: Sequence[str], rng, dim: int = FEATURE_DIM):
    prototypes = {c: rng.normal(size=dim) for c in classes}
    return prototypes


def generate_synthetic_scene(spec: SceneSpec | None = None) -> SyntheticScene:
    """Sample cameras and object poses until every instance is fully visible in every view.

    Raises:
        RuntimeError: no valid configuration after ``MAX_ATTEMPTS`` draws.
    """
    spec = spec or SceneSpec()
    if spec.n_views < 2:
        raise ValueError("synthetic scenes need at least two views")
    rng = np.random.default_rng(spec.seed)
    classes = list(spec.instances) if spec.instances is not None else sorted(spec.meshes)
    occ_mesh = occluder_mesh() if spec.occluder else None

    for _attempt in range(MAX_ATTEMPTS):
        cameras = hemisphere_cameras(spec, rng)
        poses = _place_instances(spec, classes, rng)
        items = [(spec.meshes[c], p) for c, p in zip(classes, poses)]
        occ_pose, occ_view = None, None
        if occ_mesh is not None:
            k = int(rng.integers(len(cameras)))
            occ_pose = _place_occluder(spec, poses[0], spec.meshes[classes[0]], cameras[k], rng)
            occ_view = cameras[k].view_id
            items.append((occ_mesh, occ_pose))
        ok = True
        renders = {}
        for cam in cameras:
            labels, depth, amodal = rasterize_scene(items, cam)
            if not all(_fits(amodal[i], spec.margin_px) for i in range(len(classes))):
                ok = False
                break
            renders[cam.view_id] = (labels, depth, amodal)
        if not ok:
            continue
        if occ_mesh is not None:
            labels, _, amodal = renders[occ_view]
            amodal_area = amodal[0].sum()
            covered = 1.0 - (labels == 0).sum() / amodal_area
            lo, hi = spec.occluder_coverage
            if not lo <= covered <= hi:
                continue
        break
    else:
        raise RuntimeError(f"no valid synthetic scene after {MAX_ATTEMPTS} attempts")

    prototypes = _synthetic_features(sorted(spec.meshes), rng) if spec.with_features else None
    modal, amodal_out, masklets, depth_out, labels_out = {}, {}, {}, {}, {}
    n = len(classes)
    for cam in cameras:
        labels, depth, amodal = renders[cam.view_id]
        v = cam.view_id
        depth_out[v] = depth
        labels_out[v] = labels
        modal[v] = [labels == i for i in range(n)]
        amodal_out[v] = [amodal[i] for i in range(n)]
        ms = []
        regions = [(labels == i, classes[i]) for i in range(n)]
        if occ_mesh is not None:
            regions.append((labels == n, None))
        for j, (m, cls) in enumerate(regions):
            if not m.any():
                continue
            feats = None
            if prototypes is not None:
                base = prototypes[cls] if cls is not None else rng.normal(size=FEATURE_DIM)
                feats = (base + 0.3 * rng.normal(size=FEATURE_DIM))[None, :]
            ms.append(Masklet(v, f"{v}_m{j}", m, feats))
        masklets[v] = ms

    templates = None
    if prototypes is not None:
        templates = TemplateLibrary(
            {c: prototypes[c][None, :] + 0.3 * rng.normal(size=(8, FEATURE_DIM)) for c in sorted(spec.meshes)}
        )
    return SyntheticScene(
        cameras=cameras,
        meshes=dict(spec.meshes),
        instance_classes=classes,
        gt_poses=poses,
        depth=depth_out,
        labels=labels_out,
        modal_masks=modal,
        amodal_masks=amodal_out,
        masklets=masklets,
        occluder=(occ_mesh, occ_pose) if occ_mesh is not None else None,
        occluded_view=occ_view,
        templates=templates,
        seed=spec.seed,
    )


DEPTH_SCALE = 0.05  # millimeters per depth-PNG unit


def write_scene(scene: SyntheticScene, out_dir: str | Path) -> Path:
    """Write a complete manifest with ground truth; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": 1,
        "seed": scene.seed,
        "cameras": [],
        "objects": [],
        "masklets": {},
        "depth": {},
        "depth_scale": DEPTH_SCALE,
        "ground_truth": {"poses": "gt/poses.json", "modal_masks": {}},
        "config": {},
        "output_dir": "results",
    }
    for cam in scene.cameras:
        rel = f"cameras/{cam.view_id}.json"
        io.save_camera(out / rel, cam)
        manifest["cameras"].append(rel)
    for cls, mesh in sorted(scene.meshes.items()):
        rel = f"meshes/{cls}.obj"
        io.save_obj(out / rel, mesh)
        entry = {"class_id": cls, "mesh": rel, "symmetry": None}
        if mesh.symmetries:
            srel = f"meshes/{cls}_symmetry.json"
            io.save_symmetries(out / srel, mesh.symmetries)
            entry["symmetry"] = srel
        manifest["objects"].append(entry)
    for v, ms in scene.masklets.items():
        rel = f"masklets/{v}.json"
        io.save_masklets(out / rel, v, ms, feature_dir=out / "features")
        manifest["masklets"][v] = rel
    for v, d in scene.depth.items():
        rel = f"depth/{v}.png"
        io.write_depth_png(out / rel, d, DEPTH_SCALE)
        manifest["depth"][v] = rel
    if scene.templates is not None:
        io.save_template_library(out / "features/templates.json", scene.templates)
        manifest["templates"] = "features/templates.json"
    io.write_json(
        out / "gt/poses.json",
        {
            "instances": [
                {"instance_id": i, "class_id": c, "pose": p.matrix().ravel().tolist()}
                for i, (c, p) in enumerate(zip(scene.instance_classes, scene.gt_poses))
            ]
        },
    )
    for v, masks in scene.modal_masks.items():
        rel = f"gt/masks_{v}.json"
        io.write_json(
            out / rel,
            {
                "view_id": v,
                "masks": [
                    {"instance_id": i, "class_id": c, "segmentation": io.rle_encode(m)}
                    for i, (c, m) in enumerate(zip(scene.instance_classes, masks))
                ],
            },
        )
        manifest["ground_truth"]["modal_masks"][v] = rel
    io.write_json(out / "manifest.json", manifest)
    return out / "manifest.json"
