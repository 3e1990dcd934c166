"""Scene manifests, end-to-end orchestration, evaluation against ground truth and overlay output."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import cv2
import numpy as np

from mvpose import io
from mvpose.core import Camera, RigidTransform, TriMesh
from mvpose.detect import DetectConfig, InstanceCandidate, Masklet, TemplateLibrary, masklet_class_scores, run_detection
from mvpose.errors import ManifestError, MvposeError
from mvpose.metrics import DetectionRecord, adds_error, average_precision, model_points, pose_errors, summarize
from mvpose.pose import HypothesisConfig, PoseHypothesis, coarse_pose
from mvpose.refine import RefineConfig, RefineResult, refine_contours
from mvpose.render import Contour, VisibleContourSet, boundary_mask, extract_contour, occlusion_filter, rasterize

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCORERS = ("features", "oracle")
AP_SCORES = ("cluster", "masklet")

OUTLINE_BGR = (0, 140, 255)  # orange
CONTOUR_BGR = (255, 80, 0)  # blue


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------


@dataclass(eq=False)
class GroundTruth:
    instances: list[tuple[str, RigidTransform]]
    modal_masks: dict[str, list[tuple[str, np.ndarray]]]  # view -> [(class_id, mask)]

    def masks_by_class(self) -> dict[str, dict[str, list[np.ndarray]]]:
        out: dict[str, dict[str, list[np.ndarray]]] = {}
        for v, items in self.modal_masks.items():
            per = out.setdefault(v, {})
            for cls, m in items:
                if m.any():
                    per.setdefault(cls, []).append(m)
        return out


@dataclass(eq=False)
class SceneManifest:
    root: Path
    cameras: list[Camera]
    meshes: dict[str, TriMesh]
    masklets: dict[str, list[Masklet]]
    depth: dict[str, np.ndarray] = field(default_factory=dict)
    images: dict[str, Path] = field(default_factory=dict)
    templates: TemplateLibrary | None = None
    ground_truth: GroundTruth | None = None
    detect: DetectConfig = field(default_factory=DetectConfig)
    pose: HypothesisConfig = field(default_factory=HypothesisConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    scorer: str = "oracle"
    ap_score: str = "cluster"
    lm_candidates: int = 3
    output_dir: Path = Path("results")
    seed: int = 0

    @property
    def diameters(self) -> dict[str, float]:
        return {k: m.diameter for k, m in self.meshes.items()}

    def restrict_views(self, n: int) -> SceneManifest:
        """Keep only the first ``n`` cameras (and their inputs)."""
        if n < 1:
            raise ManifestError("--views must be at least 1")
        cams = self.cameras[:n]
        keep = {c.view_id for c in cams}
        m = SceneManifest(**{f.name: getattr(self, f.name) for f in fields(self)})
        m.cameras = cams
        m.masklets = {v: ms for v, ms in self.masklets.items() if v in keep}
        m.depth = {v: d for v, d in self.depth.items() if v in keep}
        return m


def _config(cls, block: Mapping | None, name: str):
    try:
        return cls(**(block or {}))
    except (TypeError, ValueError) as e:
        raise ManifestError(f"invalid {name} config: {e}") from e


def _resolve(root: Path, rel, what: str) -> Path:
    if not isinstance(rel, str):
        raise ManifestError(f"{what}: expected a path, got {rel!r}")
    p = (root / rel).resolve()
    if not p.exists():
        raise ManifestError(f"{what}: {p} does not exist")
    return p


def load_manifest(path: str | Path) -> SceneManifest:
    """Parse and validate a scene manifest; every failure surfaces as :class:`ManifestError`."""
    path = Path(path)
    try:
        with open(path) as f:
            data = json.load(f)
    except (OSError, ValueError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    if not isinstance(data, dict):
        raise ManifestError("manifest must be a JSON object")
    root = path.parent
    try:
        return _parse_manifest(data, root)
    except ManifestError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as e:
        raise ManifestError(f"malformed manifest: {type(e).__name__}: {e}") from e


def _parse_manifest(data: dict, root: Path) -> SceneManifest:
    for key in ("cameras", "objects", "masklets"):
        if key not in data:
            raise ManifestError(f"manifest lacks required key {key!r}")

    cameras = [io.load_camera(_resolve(root, c, "camera")) for c in data["cameras"]]
    ids = [c.view_id for c in cameras]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"duplicate view ids {ids}")

    meshes = {}
    for obj in data["objects"]:
        cls = str(obj["class_id"])
        if cls in meshes:
            raise ManifestError(f"duplicate class id {cls!r}")
        sym = obj.get("symmetry")
        sym_path = _resolve(root, sym, f"symmetry of {cls}") if sym else None
        meshes[cls] = io.load_mesh(_resolve(root, obj["mesh"], f"mesh of {cls}"), sym_path, name=cls)

    masklets = {}
    for v, rel in data["masklets"].items():
        if v not in ids:
            raise ManifestError(f"masklets given for unknown view {v!r}")
        view_id, ms = io.load_masklets(_resolve(root, rel, f"masklets of {v}"))
        if view_id != v:
            raise ManifestError(f"masklet file {rel} is for view {view_id!r}, not {v!r}")
        masklets[v] = ms

    scale = float(data.get("depth_scale", 1.0))
    depth = {}
    for v, rel in (data.get("depth") or {}).items():
        if v not in ids:
            raise ManifestError(f"depth given for unknown view {v!r}")
        depth[v] = io.read_depth_png(_resolve(root, rel, f"depth of {v}"), scale)
    images = {v: _resolve(root, rel, f"image of {v}") for v, rel in (data.get("images") or {}).items()}

    templates = None
    if data.get("templates"):
        templates = io.load_template_library(_resolve(root, data["templates"], "templates"))

    gt = None
    gt_block = data.get("ground_truth")
    if gt_block:
        instances = []
        if gt_block.get("poses"):
            raw = io._read_json(_resolve(root, gt_block["poses"], "ground-truth poses"))
            for e in raw["instances"]:
                instances.append((str(e["class_id"]), RigidTransform.from_matrix(e["pose"])))
        modal = {}
        for v, rel in (gt_block.get("modal_masks") or {}).items():
            raw = io._read_json(_resolve(root, rel, f"ground-truth masks of {v}"))
            modal[v] = [(str(e["class_id"]), io.rle_decode(e["segmentation"])) for e in raw["masks"]]
        gt = GroundTruth(instances, modal)

    cfg = data.get("config") or {}
    scorer = cfg.get("scorer", "oracle" if gt is not None and templates is None else "features")
    if scorer not in SCORERS:
        raise ManifestError(f"unknown scorer {scorer!r}")
    ap_score = cfg.get("ap_score", "cluster")
    if ap_score not in AP_SCORES:
        raise ManifestError(f"unknown ap_score {ap_score!r}")
    lm_candidates = int(cfg.get("lm_candidates", 3))
    if lm_candidates < 1:
        raise ManifestError("lm_candidates must be at least 1")
    return SceneManifest(
        root=root,
        cameras=cameras,
        meshes=meshes,
        masklets=masklets,
        depth=depth,
        images=images,
        templates=templates,
        ground_truth=gt,
        detect=_config(DetectConfig, cfg.get("detect"), "detect"),
        pose=_config(HypothesisConfig, cfg.get("pose"), "pose"),
        refine=_config(RefineConfig, cfg.get("refine"), "refine"),
        scorer=scorer,
        ap_score=ap_score,
        lm_candidates=lm_candidates,
        output_dir=root / data.get("output_dir", "results"),
        seed=int(data.get("seed", 0)),
    )


# --------------------------------------------------------------------------
# Results
# --------------------------------------------------------------------------


@dataclass(eq=False)
class InstanceResult:
    instance_id: int
    class_id: str
    masklets: dict[str, str]
    center: np.ndarray
    score: float
    masklet_scores: dict[str, float] = field(default_factory=dict)  # view -> per-masklet class score
    coarse: PoseHypothesis | None = None
    seed_rank: int = 0  # rank of the coarse hypothesis the final pose was refined from
    hypotheses: list[PoseHypothesis] = field(default_factory=list)
    visible: dict[str, VisibleContourSet] = field(default_factory=dict)
    refinement: RefineResult | None = None
    timings: dict[str, float] = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.refinement is not None

    @property
    def views(self) -> list[str]:
        return sorted(self.masklets)

    @property
    def T_coarse(self) -> RigidTransform | None:
        return self.coarse.pose_world if self.coarse is not None else None

    @property
    def T_final(self) -> RigidTransform | None:
        return self.refinement.pose if self.refinement is not None else None

    def hypothesis_csv(self) -> str:
        lines = ["hypothesis,view_id,score"]
        for h in self.hypotheses:
            for v, s in sorted(h.per_view_scores.items()):
                lines.append(f"{h.index},{v},{s!r}")
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class ResultBundle:
    instances: list[InstanceResult]
    timings: dict[str, float]
    wall_time: float
    scorer: str
    seed: int
    metrics: dict[str, Any] | None = None

    @property
    def all_failed(self) -> bool:
        return bool(self.instances) and not any(r.ok for r in self.instances)

    def to_json(self) -> dict:
        def mat(T):
            return None if T is None else T.matrix().ravel().tolist()

        out = []
        for r in self.instances:
            e = {
                "instance_id": r.instance_id,
                "class_id": r.class_id,
                "views": r.views,
                "masklets": r.masklets,
                "score": r.score,
                "masklet_scores": r.masklet_scores,
                "center": r.center.tolist(),
                "T_coarse": mat(r.T_coarse),
                "T_final": mat(r.T_final),
                "timings": r.timings,
                "status": "ok" if r.ok else "failed",
            }
            if r.coarse is not None:
                e["coarse_score"] = r.coarse.aggregate_score
                e["seed_rank"] = r.seed_rank
            if r.refinement is not None:
                res = r.refinement
                e["refine"] = {
                    "cost": res.cost,
                    "iterations": res.iterations,
                    "rematches": res.rematches,
                    "correspondences": res.n_correspondences,
                    "converged": res.converged,
                }
            if r.error is not None:
                e["error"] = r.error
            out.append(e)
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "scorer": self.scorer,
            "wall_time": self.wall_time,
            "timings": self.timings,
            "instances": out,
            "metrics": self.metrics,
        }


# --------------------------------------------------------------------------
# Orchestration
# --------------------------------------------------------------------------


def visible_contour(
    mask: np.ndarray, camera: Camera, depth: np.ndarray | None, mesh: TriMesh, pose: RigidTransform
) -> VisibleContourSet:
    """Occlusion-filtered observed contour.

    Without an observed depth map the test runs against the depth rendered at
    ``pose``, which can only reject self-occlusion edges.
    """
    contour = extract_contour(mask)
    if depth is None:
        _, depth = rasterize(mesh, camera, pose)
    return occlusion_filter(contour, depth, camera)


def _mean_cost(r: RefineResult) -> float:
    return r.cost / max(r.n_correspondences, 1)


def _process_instance(
    inst: InstanceCandidate, index: int, manifest: SceneManifest, masks_by_key: Mapping, table: Mapping
) -> InstanceResult:
    ms = {v: table.get((v, mid), {}).get(inst.class_id, inst.score) for v, mid in inst.masklets.items()}
    res = InstanceResult(index, inst.class_id, dict(inst.masklets), inst.center, inst.score, ms)
    mesh = manifest.meshes[inst.class_id]
    cams = [c for c in manifest.cameras if c.view_id in inst.masklets]
    masks = {v: masks_by_key[(v, mid)] for v, mid in inst.masklets.items()}
    stage = "coarse"
    try:
        t0 = time.perf_counter()
        best, hyps = coarse_pose(inst.center, cams, masks, mesh, manifest.pose)
        res.coarse, res.hypotheses = best, hyps
        t1 = time.perf_counter()
        res.timings["coarse"] = t1 - t0

        res.timings["contours"] = res.timings["refine"] = 0.0
        ranked = sorted(hyps, key=lambda h: (-h.aggregate_score, h.index))[: manifest.lm_candidates]
        last_error = None
        for rank, h in enumerate(ranked):
            stage = "contours"
            t = time.perf_counter()
            visible = {
                cam.view_id: visible_contour(masks[cam.view_id], cam, manifest.depth.get(cam.view_id), mesh, h.pose_world)
                for cam in cams
            }
            t2 = time.perf_counter()
            res.timings["contours"] += t2 - t
            stage = "refine"
            try:
                out = refine_contours(h.pose_world, visible, mesh, cams, manifest.refine)
            except (MvposeError, np.linalg.LinAlgError) as e:
                last_error = e
                log.info("instance %d: refinement from hypothesis rank %d failed: %s", index, rank, e)
                continue
            finally:
                res.timings["refine"] += time.perf_counter() - t2
            # visible sets can differ between seeds, so compare mean cost per correspondence
            if res.refinement is None or _mean_cost(out) < _mean_cost(res.refinement):
                res.refinement, res.visible, res.coarse, res.seed_rank = out, visible, h, rank
        if res.refinement is None:
            raise last_error
    except (MvposeError, ValueError, np.linalg.LinAlgError) as e:
        res.error = f"{stage}: {type(e).__name__}: {e}"
        log.warning("instance %d (%s) failed in %s stage: %s", index, inst.class_id, stage, e)
    return res


def run_pipeline(manifest: SceneManifest, threads: int = 1) -> ResultBundle:
    """Detect instances, then per instance: coarse pose, visible contours and LM refinement.

    Instance failures are recorded on the instance and do not stop the run.
    """
    if manifest.scorer not in SCORERS:
        raise ValueError(f"unknown scorer {manifest.scorer!r}")
    start = time.perf_counter()
    timings: dict[str, float] = {}

    t = time.perf_counter()
    if manifest.scorer == "features":
        if manifest.templates is None:
            raise ManifestError("feature scoring needs a template library in the manifest")
        instances = run_detection(
            manifest.cameras, manifest.masklets, manifest.diameters, library=manifest.templates, config=manifest.detect
        )
    else:
        if manifest.ground_truth is None:
            raise ManifestError("oracle scoring needs ground-truth modal masks in the manifest")
        instances = run_detection(
            manifest.cameras,
            manifest.masklets,
            manifest.diameters,
            gt_masks=manifest.ground_truth.masks_by_class(),
            config=manifest.detect,
        )
    instances.sort(key=lambda i: (-i.score, i.class_id, sorted(i.masklets.items())))
    timings["detect"] = time.perf_counter() - t
    log.info("detected %d instance(s)", len(instances))

    t = time.perf_counter()
    masks_by_key = {m.key: m.mask for ms in manifest.masklets.values() for m in ms}
    table = masklet_class_scores(instances)
    if threads > 1 and len(instances) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_process_instance, inst, i, manifest, masks_by_key, table) for i, inst in enumerate(instances)]
            results = [f.result() for f in futures]
    else:
        results = [_process_instance(inst, i, manifest, masks_by_key, table) for i, inst in enumerate(instances)]
    timings["instances"] = time.perf_counter() - t

    bundle = ResultBundle(results, timings, 0.0, manifest.scorer, manifest.seed)
    if manifest.ground_truth is not None:
        t = time.perf_counter()
        bundle.metrics = evaluate(bundle, manifest)
        timings["metrics"] = time.perf_counter() - t
    bundle.wall_time = time.perf_counter() - start
    return bundle


# --------------------------------------------------------------------------
# Evaluation
# --------------------------------------------------------------------------


def match_to_ground_truth(results: Sequence[InstanceResult], gt: GroundTruth) -> dict[int, int]:
    """Greedy assignment result -> GT instance: same class, nearest translation, best score first."""
    used: set[int] = set()
    out = {}
    for r in sorted((r for r in results if r.ok), key=lambda r: (-r.score, r.instance_id)):
        best, best_d = None, np.inf
        for j, (cls, pose) in enumerate(gt.instances):
            if j in used or cls != r.class_id:
                continue
            d = np.linalg.norm(r.T_final.translation - pose.translation)
            if d < best_d:
                best, best_d = j, d
        if best is not None:
            used.add(best)
            out[r.instance_id] = best
    return out


def detection_records(
    results: Sequence[InstanceResult], masks_by_key: Mapping, ap_score: str = "cluster"
) -> list[DetectionRecord]:
    """One detection per (instance, supporting view), scored at cluster or masklet level."""
    recs = []
    for r in results:
        for v, mid in r.masklets.items():
            score = r.masklet_scores.get(v, r.score) if ap_score == "masklet" else r.score
            recs.append(DetectionRecord(v, r.class_id, float(score), mask=masks_by_key[(v, mid)]))
    return recs


def evaluate(bundle: ResultBundle, manifest: SceneManifest) -> dict:
    gt = manifest.ground_truth
    masks_by_key = {m.key: m.mask for ms in manifest.masklets.values() for m in ms}
    views = {c.view_id for c in manifest.cameras}
    gt_regions: dict[tuple[str, str], list[np.ndarray]] = {}
    for v, items in gt.modal_masks.items():
        if v not in views:
            continue
        for cls, m in items:
            if m.any():
                gt_regions.setdefault((v, cls), []).append(m)
    recs = detection_records(bundle.instances, masks_by_key, manifest.ap_score)
    ap = average_precision(recs, gt_regions, "mask")
    ap_box = average_precision(recs, gt_regions, "bbox")

    matches = match_to_ground_truth(bundle.instances, gt)
    points = {cls: model_points(m) for cls, m in manifest.meshes.items()}
    per_instance = []
    for r in bundle.instances:
        if r.instance_id not in matches:
            continue
        j = matches[r.instance_id]
        mesh = manifest.meshes[r.class_id]
        gt_pose = gt.instances[j][1]
        P = points[r.class_id]
        fin = pose_errors(r.T_final, gt_pose, mesh, P)
        co = pose_errors(r.T_coarse, gt_pose, mesh, P)
        per_instance.append(
            {
                "instance_id": r.instance_id,
                "gt_instance": j,
                "class_id": r.class_id,
                "add": fin.add,
                "adds": adds_error(r.T_final, gt_pose, P),
                "translation_mm": fin.translation,
                "rotation_deg": fin.rotation,
                "coarse_add": co.add,
                "coarse_translation_mm": co.translation,
                "coarse_rotation_deg": co.rotation,
            }
        )
    per_class = {}
    for cls in sorted({d["class_id"] for d in per_instance}):
        rows = [d for d in per_instance if d["class_id"] == cls]
        per_class[cls] = {k: summarize([d[k] for d in rows]) for k in ("add", "adds", "translation_mm", "rotation_deg")}
    return {
        "ap": ap["ap"],
        "ap50": ap["ap50"],
        "ap_per_class": ap["per_class"],
        "ap_per_threshold": {f"{t:.2f}": v for t, v in ap["per_threshold"].items()},
        "bbox_ap": ap_box["ap"],
        "bbox_ap50": ap_box["ap50"],
        "ap_score": manifest.ap_score,
        "n_ground_truth": len(gt.instances),
        "n_matched": len(per_instance),
        "instances": per_instance,
        "per_class": per_class,
    }


# --------------------------------------------------------------------------
# Outputs
# --------------------------------------------------------------------------


def write_results(bundle: ResultBundle, out_dir: str | Path, debug: bool = True) -> Path:
    """Result JSON plus per-instance hypothesis score tables and LM traces."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "results.json", bundle.to_json())
    if debug:
        dbg = out / "debug"
        dbg.mkdir(exist_ok=True)
        for r in bundle.instances:
            if r.hypotheses:
                (dbg / f"hypotheses_{r.instance_id}.csv").write_text(r.hypothesis_csv())
            if r.refinement is not None:
                (dbg / f"lm_trace_{r.instance_id}.csv").write_text(r.refinement.trace_csv())
    return out / "results.json"


def overlay_image(
    camera: Camera, background: np.ndarray | None, items: Sequence[tuple[TriMesh, RigidTransform, Contour | None]]
) -> np.ndarray:
    """Model silhouette outline in orange and visible contour points in blue."""
    if background is None:
        img = np.full((camera.height, camera.width, 3), 40, dtype=np.uint8)
    else:
        img = background if background.ndim == 3 else cv2.cvtColor(background, cv2.COLOR_GRAY2BGR)
        img = img.copy()
    for mesh, pose, contour in items:
        mask, _ = rasterize(mesh, camera, pose)
        img[boundary_mask(mask)] = OUTLINE_BGR
        if contour is not None and len(contour):
            px = np.rint(contour.pixels).astype(int)
            img[px[:, 1], px[:, 0]] = CONTOUR_BGR
    return img


def _recompute_visible(r: InstanceResult, view_id: str, manifest: SceneManifest, mesh: TriMesh):
    cam = next(c for c in manifest.cameras if c.view_id == view_id)
    mask = next((m.mask for m in manifest.masklets.get(view_id, ()) if m.masklet_id == r.masklets[view_id]), None)
    if mask is None:
        return None
    return visible_contour(mask, cam, manifest.depth.get(view_id), mesh, r.T_coarse)


def bundle_from_json(data: Mapping) -> ResultBundle:
    """Rebuild a bundle from :meth:`ResultBundle.to_json` output (without hypotheses or traces)."""
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported result schema version {data.get('schema_version')!r}")
    results = []
    for e in data["instances"]:
        r = InstanceResult(
            e["instance_id"],
            e["class_id"],
            dict(e["masklets"]),
            np.asarray(e["center"], dtype=np.float64),
            float(e["score"]),
            dict(e.get("masklet_scores", {})),
            timings=dict(e.get("timings", {})),
            error=e.get("error"),
        )
        if e.get("T_coarse") is not None:
            r.coarse = PoseHypothesis(RigidTransform.from_matrix(e["T_coarse"]), aggregate_score=e.get("coarse_score", 0.0))
        if e.get("T_final") is not None:
            info = e.get("refine", {})
            r.refinement = RefineResult(
                RigidTransform.from_matrix(e["T_final"]),
                info.get("cost", float("nan")),
                info.get("iterations", 0),
                info.get("rematches", 0),
                info.get("correspondences", 0),
                info.get("converged", False),
                [],
            )
        results.append(r)
    return ResultBundle(
        results, dict(data.get("timings", {})), data.get("wall_time", 0.0), data.get("scorer", ""), data.get("seed", 0), data.get("metrics")
    )


def emit_overlays(bundle: ResultBundle, manifest: SceneManifest, out_dir: str | Path) -> list[Path]:
    """One overlay PNG per view that supports at least one refined instance."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per_view: dict[str, list] = {}
    for r in bundle.instances:
        if r.T_final is None:
            continue
        mesh = manifest.meshes[r.class_id]
        for v in r.views:
            vis = r.visible.get(v)
            if vis is None and r.T_coarse is not None:
                vis = _recompute_visible(r, v, manifest, mesh)
            per_view.setdefault(v, []).append((mesh, r.T_final, vis.contour if vis else None))
    written = []
    for cam in manifest.cameras:
        if cam.view_id not in per_view:
            continue
        bg = None
        if cam.view_id in manifest.images:
            bg = cv2.imread(str(manifest.images[cam.view_id]), cv2.IMREAD_COLOR)
            if bg is None:
                log.warning("could not read image for view %s; drawing on a blank canvas", cam.view_id)
        else:
            log.warning("no image for view %s; drawing on a blank canvas", cam.view_id)
        img = overlay_image(cam, bg, per_view[cam.view_id])
        path = out / f"overlay_{cam.view_id}.png"
        cv2.imwrite(str(path), img)
        written.append(path)
    return written
