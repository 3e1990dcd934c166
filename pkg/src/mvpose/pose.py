"""Coarse pose stage: icosphere hypotheses, per-view refinement with world-frame averaging, silhouette scoring."""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from mvpose.core import Camera, RigidTransform, TriMesh, compose, project_to_so3, rotation_about_axis
from mvpose.errors import AmbiguousMeanError
from mvpose.render import rasterize
from mvpose.shapes import icosphere


@dataclass(frozen=True, eq=False)
class PoseHypothesis:
    pose_world: RigidTransform  # object -> world
    per_view_scores: Mapping[str, float] = field(default_factory=dict)
    aggregate_score: float = 0.0
    index: int = 0


@dataclass
class HypothesisConfig:
    n_viewpoints: int = 42
    n_inplane: int = 12
    refine_iterations: int = 5
    refiner: str = "centroid"
    prune_fraction: float = 0.25
    monotone_refinement: bool = True  # reject refinement rounds that lower a hypothesis' score

    def __post_init__(self):
        if self.n_viewpoints < 4:
            raise ValueError("n_viewpoints must be at least 4")
        if self.n_inplane < 1:
            raise ValueError("n_inplane must be at least 1")
        if self.refine_iterations < 0:
            raise ValueError("refine_iterations must be non-negative")
        if not 0.0 < self.prune_fraction <= 1.0:
            raise ValueError("prune_fraction must lie in (0, 1]")


# --------------------------------------------------------------------------
# Hypothesis sampling
# --------------------------------------------------------------------------


def viewpoint_directions(n: int) -> np.ndarray:
    """``n`` unit directions from the smallest icosphere with at least ``n`` vertices.

    Icosphere sizes (12, 42, 162, ...) are used as is; other counts are
    reduced by farthest-point selection.
    """
    level = 0
    while 10 * 4**level + 2 < n:
        level += 1
    V, _ = icosphere(level)
    if len(V) == n:
        return V
    chosen = [0]
    d = np.linalg.norm(V - V[0], axis=1)
    for _ in range(n - 1):
        k = int(np.argmax(d))
        chosen.append(k)
        d = np.minimum(d, np.linalg.norm(V - V[k], axis=1))
    return V[chosen]


def look_rotation(direction) -> np.ndarray:
    """Rotation whose third column is ``direction``: the object is seen along it."""
    z = np.asarray(direction, dtype=np.float64)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def sample_rotations(n_viewpoints: int = 42, n_inplane: int = 12) -> list[np.ndarray]:
    out = []
    for d in viewpoint_directions(n_viewpoints):
        base = look_rotation(d)
        for k in range(n_inplane):
            inplane = rotation_about_axis((0.0, 0.0, 1.0), 2.0 * np.pi * k / n_inplane)
            # object rotation = (view rotation)^T: viewpoint d sees the object along its axis
            out.append((base @ inplane).T)
    return out


def sample_hypotheses(center, config: HypothesisConfig | None = None) -> list[PoseHypothesis]:
    config = config or HypothesisConfig()
    c = np.asarray(center, dtype=np.float64).reshape(3)
    return [
        PoseHypothesis(RigidTransform(R, c), index=i)
        for i, R in enumerate(sample_rotations(config.n_viewpoints, config.n_inplane))
    ]


# --------------------------------------------------------------------------
# Frame changes and rotation averaging
# --------------------------------------------------------------------------


def to_view_frame(h: PoseHypothesis | RigidTransform, camera: Camera) -> RigidTransform:
    pose = h.pose_world if isinstance(h, PoseHypothesis) else h
    return compose(camera.world_to_cam, pose)


def to_world_frame(pose_cam: RigidTransform, camera: Camera) -> RigidTransform:
    return compose(camera.world_to_cam.inverse(), pose_cam)


def average_rotations(rotations: Sequence[np.ndarray]) -> np.ndarray:
    """Chordal L2 mean: the SVD projection of the arithmetic mean onto SO(3).

    Raises:
        AmbiguousMeanError: when the mean matrix is rank deficient.
    """
    Rs = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    if len(Rs) == 0:
        raise ValueError("no rotations to average")
    if len(Rs) == 1 or np.all(Rs == Rs[0]):
        return Rs[0].copy()
    M = Rs.mean(axis=0)
    U, S, Vt = np.linalg.svd(M)
    d = 1.0 if np.linalg.det(U @ Vt) > 0 else -1.0
    # maximizer of trace(R^T M) is unique iff rank >= 2 (d > 0) or S[1] > S[2] (d < 0)
    if (d > 0 and S[1] < 1e-9) or (d < 0 and S[1] - S[2] < 1e-9):
        raise AmbiguousMeanError("rotation mean is rank deficient")
    return U @ np.diag([1.0, 1.0, d]) @ Vt


# --------------------------------------------------------------------------
# Per-view refiners
# --------------------------------------------------------------------------


class ViewRefiner(Protocol):
    def __call__(
        self, pose_cam: RigidTransform, camera: Camera, mask: np.ndarray, mesh: TriMesh
    ) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(delta_R, delta_t)`` to apply in the camera frame."""


def identity_refiner(pose_cam, camera, mask, mesh):
    return np.eye(3), np.zeros(3)


def _moments(mask: np.ndarray) -> tuple[float, float, float]:
    """Area and (u, v) centroid of a boolean mask."""
    cols = mask.sum(axis=0, dtype=np.int64)
    rows = mask.sum(axis=1, dtype=np.int64)
    area = float(cols.sum())
    return area, float(cols @ np.arange(mask.shape[1])) / area, float(rows @ np.arange(mask.shape[0])) / area


def centroid_refiner(pose_cam: RigidTransform, camera: Camera, mask: np.ndarray, mesh: TriMesh):
    """Translate so the rendered silhouette centroid and area match the masklet's.

    Depth scales with sqrt(rendered area / masklet area); the object origin's
    projection shifts by the centroid offset. Rotation is left unchanged.
    """
    cam_local = Camera(camera.intrinsics, RigidTransform.identity(), camera.width, camera.height, camera.view_id)
    rendered, _ = rasterize(mesh, cam_local, pose_cam)
    if not rendered.any() or not mask.any():
        return np.eye(3), np.zeros(3)
    a_r, ru, rv = _moments(rendered)
    a_m, mu, mv = _moments(mask)
    du, dv = mu - ru, mv - rv
    t = pose_cam.translation
    if t[2] <= 0:
        return np.eye(3), np.zeros(3)
    z_new = t[2] * np.sqrt(a_r / a_m)
    K = camera.intrinsics
    u0 = (K[0, 0] * t[0] + K[0, 1] * t[1]) / t[2] + K[0, 2]
    v0 = K[1, 1] * t[1] / t[2] + K[1, 2]
    u1, v1 = u0 + du, v0 + dv
    y = (v1 - K[1, 2]) / K[1, 1]
    x = (u1 - K[0, 2] - K[0, 1] * y) / K[0, 0]
    t_new = np.array([x * z_new, y * z_new, z_new])
    return np.eye(3), t_new - t


REFINERS: dict[str, Callable] = {"identity": identity_refiner, "centroid": centroid_refiner}


def get_refiner(name_or_fn) -> Callable:
    if callable(name_or_fn):
        return name_or_fn
    try:
        return REFINERS[name_or_fn]
    except KeyError:
        raise ValueError(f"unknown refiner {name_or_fn!r}; choose from {sorted(REFINERS)}") from None


def _refine_one(pose_world: RigidTransform, cameras, masks, mesh, refiner) -> RigidTransform:
    rotations, translations = [], []
    for cam in cameras:
        pc = to_view_frame(pose_world, cam)
        dR, dt = refiner(pc, cam, masks[cam.view_id], mesh)
        updated = RigidTransform(project_to_so3(np.asarray(dR) @ pc.rotation), pc.translation + np.asarray(dt))
        w = to_world_frame(updated, cam)
        rotations.append(w.rotation)
        translations.append(w.translation)
    if len(cameras) == 1:
        return RigidTransform(rotations[0], translations[0])
    return RigidTransform(average_rotations(rotations), np.mean(translations, axis=0))


def refine_hypotheses(
    hypotheses: Sequence[PoseHypothesis],
    cameras: Sequence[Camera],
    masks: Mapping[str, np.ndarray],
    mesh: TriMesh,
    config: HypothesisConfig | None = None,
    refiner=None,
    executor: Executor | None = None,
) -> list[PoseHypothesis]:
    """Run ``refine_iterations`` rounds of per-view refinement with world-frame averaging.

    ``masks`` maps each supporting view id to the instance's masklet mask.
    """
    config = config or HypothesisConfig()
    fn = get_refiner(refiner if refiner is not None else config.refiner)
    if fn is identity_refiner:
        return list(hypotheses)
    cams = [c for c in cameras if c.view_id in masks]
    poses = [h.pose_world for h in hypotheses]
    for _ in range(config.refine_iterations):
        if executor is not None:
            poses = list(executor.map(lambda p: _refine_one(p, cams, masks, mesh, fn), poses))
        else:
            poses = [_refine_one(p, cams, masks, mesh, fn) for p in poses]
    return [replace(h, pose_world=p) for h, p in zip(hypotheses, poses)]


# --------------------------------------------------------------------------
# Scoring and selection
# --------------------------------------------------------------------------


def silhouette_iou(rendered: np.ndarray, mask: np.ndarray) -> float:
    union = np.count_nonzero(rendered | mask)
    if union == 0:
        return 0.0
    return np.count_nonzero(rendered & mask) / union


def _score_one(h: PoseHypothesis, cams, masks, mesh) -> PoseHypothesis:
    per_view = {}
    for cam in cams:
        rendered, _ = rasterize(mesh, cam, h.pose_world)
        per_view[cam.view_id] = silhouette_iou(rendered, masks[cam.view_id]) if rendered.any() else 0.0
    agg = float(np.mean(list(per_view.values()))) if per_view else 0.0
    return replace(h, per_view_scores=per_view, aggregate_score=agg)


def score_hypotheses(
    hypotheses: Sequence[PoseHypothesis],
    cameras: Sequence[Camera],
    masks: Mapping[str, np.ndarray],
    mesh: TriMesh,
    executor: Executor | None = None,
) -> list[PoseHypothesis]:
    """Per-view silhouette IoU against the instance masklets, averaged over views."""
    cams = [c for c in cameras if c.view_id in masks]
    if not cams:
        raise ValueError("no supporting views to score against")
    if executor is not None:
        return list(executor.map(lambda h: _score_one(h, cams, masks, mesh), hypotheses))
    return [_score_one(h, cams, masks, mesh) for h in hypotheses]


def select_best(hypotheses: Sequence[PoseHypothesis]) -> PoseHypothesis:
    """Highest aggregate score; the earliest hypothesis wins ties."""
    if not hypotheses:
        raise ValueError("no hypotheses to select from")
    best = 0
    for i, h in enumerate(hypotheses):
        if h.aggregate_score > hypotheses[best].aggregate_score:
            best = i
    return hypotheses[best]


def prune(hypotheses: Sequence[PoseHypothesis], fraction: float) -> list[PoseHypothesis]:
    """Keep the best ``fraction`` (at least one), preserving original order among survivors."""
    n = max(1, int(np.ceil(fraction * len(hypotheses))))
    order = sorted(range(len(hypotheses)), key=lambda i: (-hypotheses[i].aggregate_score, i))
    return [hypotheses[i] for i in sorted(order[:n])]


def coarse_pose(
    center,
    cameras: Sequence[Camera],
    masks: Mapping[str, np.ndarray],
    mesh: TriMesh,
    config: HypothesisConfig | None = None,
    executor: Executor | None = None,
) -> tuple[PoseHypothesis, list[PoseHypothesis]]:
    """Sample, score, prune, refine, rescore and select. Returns (best, final scored set).

    With ``monotone_refinement`` each round is rescored and a hypothesis keeps
    its previous pose whenever the round lowered its silhouette score.
    """
    config = config or HypothesisConfig()
    hyps = sample_hypotheses(center, config)
    hyps = score_hypotheses(hyps, cameras, masks, mesh, executor)
    hyps = prune(hyps, config.prune_fraction)
    if get_refiner(config.refiner) is identity_refiner:
        return select_best(hyps), hyps
    if not config.monotone_refinement:
        if config.refine_iterations > 0:
            hyps = refine_hypotheses(hyps, cameras, masks, mesh, config, executor=executor)
            hyps = score_hypotheses(hyps, cameras, masks, mesh, executor)
        return select_best(hyps), hyps
    one_round = replace(config, refine_iterations=1)
    for _ in range(config.refine_iterations):
        moved = refine_hypotheses(hyps, cameras, masks, mesh, one_round, executor=executor)
        moved = score_hypotheses(moved, cameras, masks, mesh, executor)
        hyps = [new if new.aggregate_score >= old.aggregate_score else old for old, new in zip(hyps, moved)]
    return select_best(hyps), hyps
