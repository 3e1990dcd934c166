"""Pose and detection metrics: ADD/ADD-S, symmetry-aware pose errors, COCO-style AP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from mvpose.core import RigidTransform, TriMesh, rotation_about_axis

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_GRID = np.linspace(0.0, 1.0, 101)
MAX_MODEL_POINTS = 10_000


@dataclass(frozen=True)
class PoseError:
    add: float
    translation: float
    rotation: float


def _points(model_points) -> np.ndarray:
    P = np.asarray(model_points, dtype=np.float64).reshape(-1, 3)
    if len(P) == 0:
        raise ValueError("empty model point set")
    return P


def add_error(pose_est: RigidTransform, pose_gt: RigidTransform, model_points) -> float:
    P = _points(model_points)
    return float(np.linalg.norm(pose_est.apply(P) - pose_gt.apply(P), axis=1).mean())


def adds_error(pose_est: RigidTransform, pose_gt: RigidTransform, model_points) -> float:
    P = _points(model_points)
    dist, _ = cKDTree(pose_gt.apply(P)).query(pose_est.apply(P), k=1)
    return float(np.mean(dist))


def farthest_point_sample(points, n: int, seed_index: int = 0) -> np.ndarray:
    P = _points(points)
    if len(P) <= n:
        return P
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = seed_index
    d = np.linalg.norm(P - P[seed_index], axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(d))
        d = np.minimum(d, np.linalg.norm(P - P[chosen[i]], axis=1))
    return P[chosen]


def model_points(mesh: TriMesh, max_points: int = MAX_MODEL_POINTS) -> np.ndarray:
    return farthest_point_sample(mesh.vertices, max_points)


def add_or_adds(pose_est: RigidTransform, pose_gt: RigidTransform, mesh: TriMesh, points=None) -> float:
    """ADD for asymmetric objects, ADD-S when the mesh declares any symmetry."""
    P = model_points(mesh) if points is None else points
    if mesh.is_symmetric:
        return adds_error(pose_est, pose_gt, P)
    return add_error(pose_est, pose_gt, P)


def _geodesic_deg(R: np.ndarray) -> float:
    # atan2 form stays exact near the identity where arccos loses half the digits
    skew = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.rad2deg(np.arctan2(np.linalg.norm(skew), np.trace(R) - 1.0)))


def _best_axis_angle(M: np.ndarray, axis: np.ndarray) -> float:
    """Angle theta maximizing trace(M @ Rot(axis, theta))."""
    A = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    aa = np.outer(axis, axis)
    # trace(M R) = trace(M aa) + cos(theta) trace(M (I - aa)) + sin(theta) trace(M A)
    c = np.trace(M @ (np.eye(3) - aa))
    s = np.trace(M @ A)
    return float(np.arctan2(s, c))


def pose_errors(pose_est: RigidTransform, pose_gt: RigidTransform, mesh: TriMesh | None = None, points=None) -> PoseError:
    """Translation (mm) and geodesic rotation (deg) errors minimized over object symmetries.

    Symmetry transforms act in the object frame: ``pose_gt @ S`` is an
    equivalent ground truth. Continuous axes are minimized in closed form.
    """
    symmetries = mesh.symmetries if mesh is not None else ()
    candidates = [RigidTransform.identity()]
    axes = []
    for sym in symmetries:
        if sym.kind == "discrete":
            candidates.extend(sym.transforms)
        else:
            axes.append(sym.axis)

    best_t, best_r = np.inf, np.inf
    for S in candidates:
        gt = pose_gt @ S
        R_rel = pose_est.rotation.T @ gt.rotation
        t_err = float(np.linalg.norm(pose_est.translation - gt.translation))
        r_err = _geodesic_deg(R_rel)
        for axis in axes:
            # minimize over Rot(axis, theta) applied in the object frame after S
            theta = _best_axis_angle(R_rel, axis)
            # recompute with the continuous component folded in
            Rs = rotation_about_axis(axis, theta)
            r_err = min(r_err, _geodesic_deg(R_rel @ Rs))
        best_t = min(best_t, t_err)
        best_r = min(best_r, r_err)

    add = np.nan
    if mesh is not None or points is not None:
        P = model_points(mesh) if points is None else points
        add = adds_error(pose_est, pose_gt, P) if (mesh is not None and mesh.is_symmetric) else add_error(pose_est, pose_gt, P)
    return PoseError(add=float(add), translation=best_t, rotation=best_r)


# --------------------------------------------------------------------------
# Detection AP
# --------------------------------------------------------------------------


def bbox_iou(a, b) -> float:
    """IoU of (xmin, ymin, xmax, ymax) boxes in continuous coordinates."""
    ax0, ay0, ax1, ay1 = map(float, a)
    bx0, by0, bx1, by1 = map(float, b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_to_bbox(mask) -> tuple[float, float, float, float]:
    """Tight box around set pixels, as the continuous extent of the covered cells."""
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (cols.min() - 0.5, rows.min() - 0.5, cols.max() + 0.5, rows.max() + 0.5)


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    view_id: Hashable
    class_id: Hashable
    score: float
    mask: np.ndarray | None = None
    bbox: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")

    def region(self, iou_kind: str):
        if iou_kind == "mask":
            return self.mask
        return self.bbox if self.bbox is not None else mask_to_bbox(self.mask)


def _iou(a, b, iou_kind: str) -> float:
    return mask_iou(a, b) if iou_kind == "mask" else bbox_iou(a, b)


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """COCO 101-point interpolated precision over recall."""
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_GRID, side="left")
    q = np.zeros_like(RECALL_GRID)
    ok = idx < len(precision)
    q[ok] = precision[idx[ok]]
    return float(q.mean())


def average_precision(
    detections: Sequence[DetectionRecord],
    ground_truth: Mapping[tuple[Hashable, Hashable], Sequence],
    iou_kind: str = "mask",
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> dict:
    """COCO-style AP averaged over IoU thresholds.

    Args:
        detections: scored detections carrying a mask or a box.
        ground_truth: ``(view_id, class_id) -> list of masks or boxes``.
        iou_kind: ``"mask"`` or ``"bbox"``.

    Returns:
        A dict with ``ap`` (mean over classes), ``per_class`` APs,
        ``per_threshold`` (threshold -> AP over classes) and ``ap50``.
    """
    if iou_kind not in ("mask", "bbox"):
        raise ValueError(f"unknown iou kind {iou_kind!r}")
    gt_regions = {}
    for key, regions in ground_truth.items():
        gt_regions[key] = [
            (mask_to_bbox(r) if iou_kind == "bbox" and np.ndim(r) == 2 else r) for r in regions
        ]
    classes = sorted({k[1] for k, v in gt_regions.items() if len(v)}, key=str)
    per_class_thr = {c: {} for c in classes}
    for c in classes:
        n_gt = sum(len(v) for k, v in gt_regions.items() if k[1] == c)
        dets = [d for d in detections if d.class_id == c]
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)  # stable for equal scores
        ious = []
        for i in order:
            d = dets[i]
            gts = gt_regions.get((d.view_id, c), [])
            ious.append(np.array([_iou(d.region(iou_kind), g, iou_kind) for g in gts]))
        for thr in thresholds:
            matched = {key: np.zeros(len(v), dtype=bool) for key, v in gt_regions.items() if key[1] == c}
            tp = np.zeros(len(order), dtype=bool)
            for rank, i in enumerate(order):
                d = dets[i]
                row = ious[rank]
                if row.size == 0:
                    continue
                used = matched[(d.view_id, c)]
                cand = np.where(~used & (row >= thr - 1e-12), row, -1.0)
                j = int(np.argmax(cand))
                if cand[j] >= 0.0:
                    used[j] = True
                    tp[rank] = True
            per_class_thr[c][float(thr)] = _interpolated_ap(tp, n_gt)
    per_class = {c: float(np.mean(list(v.values()))) for c, v in per_class_thr.items()}
    per_threshold = {
        float(t): float(np.mean([per_class_thr[c][float(t)] for c in classes])) if classes else 0.0
        for t in thresholds
    }
    ap = float(np.mean(list(per_class.values()))) if classes else 0.0
    return {
        "ap": ap,
        "ap50": per_threshold.get(0.5, float("nan")),
        "per_class": per_class,
        "per_threshold": per_threshold,
    }


def summarize(values: Sequence[float]) -> dict:
    """Mean and standard deviation, as in 'mean ± std' table cells."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    return {"mean": float(v.mean()), "std": float(v.std()), "n": int(v.size)}
