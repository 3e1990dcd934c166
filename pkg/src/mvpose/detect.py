"""Multi-view detection: masklet scoring, pairwise ray triangulation and greedy 3D clustering."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from mvpose.core import Camera, Ray, RigidTransform, pixel_to_ray
from mvpose.errors import (
    BehindCameraRejection,
    DegenerateFeatureError,
    InsufficientViewsError,
    UnstableTriangulationError,
)

log = logging.getLogger(__name__)

TOP_K_TEMPLATES = 5
DEFAULT_PARALLEL_DEG = 0.5
DEFAULT_GAP_FRACTION = 0.5
DEFAULT_MIN_AREA = 50


@dataclass(frozen=True, eq=False)
class Masklet:
    """A class-agnostic mask proposal in one view."""

    view_id: str
    masklet_id: str
    mask: np.ndarray
    features: np.ndarray | None = None  # (n_descriptors, dim)
    bbox: tuple[int, int, int, int] = field(init=False)
    area: int = field(init=False)

    def __post_init__(self):
        m = np.array(self.mask, dtype=bool)
        m.flags.writeable = False
        rows, cols = np.nonzero(m)
        if len(rows) == 0:
            raise ValueError(f"masklet {self.masklet_id} is empty")
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "view_id", str(self.view_id))
        object.__setattr__(self, "masklet_id", str(self.masklet_id))
        object.__setattr__(self, "bbox", (int(cols.min()), int(rows.min()), int(cols.max()), int(rows.max())))
        object.__setattr__(self, "area", int(len(rows)))
        if self.features is not None:
            f = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
            object.__setattr__(self, "features", f)

    @property
    def bbox_center(self) -> np.ndarray:
        x0, y0, x1, y1 = self.bbox
        return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])

    @property
    def key(self) -> tuple[str, str]:
        return (self.view_id, self.masklet_id)


@dataclass(frozen=True, eq=False)
class TemplateLibrary:
    """Per-object template descriptors (K, dim) and optional template poses."""

    features: Mapping[str, np.ndarray]
    poses: Mapping[str, Sequence[RigidTransform]] = field(default_factory=dict)

    def __post_init__(self):
        feats = {str(k): np.atleast_2d(np.asarray(v, dtype=np.float64)) for k, v in self.features.items()}
        dims = {f.shape[1] for f in feats.values()}
        if len(dims) > 1:
            raise ValueError("all template features must share one dimension")
        if any(len(f) == 0 for f in feats.values()):
            raise ValueError("every object needs at least one template")
        object.__setattr__(self, "features", feats)

    @property
    def object_ids(self) -> list[str]:
        return sorted(self.features)


@dataclass(frozen=True, eq=False)
class CandidatePoint:
    position: np.ndarray
    source: tuple[tuple[str, str], tuple[str, str]]  # ((view_id, masklet_id), ...), canonical order
    class_scores: dict[str, float]
    assigned_class: str
    gap: float

    @property
    def score(self) -> float:
        return self.class_scores[self.assigned_class]

    @property
    def sort_key(self):
        return (-self.score, self.source)


@dataclass(eq=False)
class InstanceCandidate:
    center: np.ndarray
    class_id: str
    masklets: dict[str, str]  # view_id -> masklet_id
    member_points: list[CandidatePoint]

    @property
    def score(self) -> float:
        """Cluster-level score: the product score of the seeding (best) point."""
        return max(p.score for p in self.member_points)

    @property
    def view_ids(self) -> list[str]:
        return sorted(self.masklets)


# --------------------------------------------------------------------------
# Scoring
# --------------------------------------------------------------------------


def template_similarity(masklet_feature, template_feature) -> float:
    a = np.asarray(masklet_feature, dtype=np.float64).ravel()
    b = np.asarray(template_feature, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"feature dimensions differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateFeatureError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def aggregate_class_score(template_scores: Sequence[float], top_k: int = TOP_K_TEMPLATES) -> float:
    """Mean of the ``top_k`` largest scores (all of them if fewer exist)."""
    s = np.asarray(template_scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise ValueError("no template scores to aggregate")
    k = min(top_k, s.size)
    return float(np.sort(s)[::-1][:k].mean())


def score_masklet_features(masklet: Masklet, library: TemplateLibrary) -> dict[str, float]:
    """Per-object class scores from template cosine similarities, clamped to [0, 1].

    With several masklet descriptors each template keeps its best match.
    """
    if masklet.features is None:
        raise ValueError(f"masklet {masklet.masklet_id} has no features")
    q = masklet.features
    qn = np.linalg.norm(q, axis=1)
    if np.any(qn == 0):
        raise DegenerateFeatureError(f"masklet {masklet.masklet_id} has a zero feature vector")
    scores = {}
    for obj in library.object_ids:
        T = library.features[obj]
        tn = np.linalg.norm(T, axis=1)
        if np.any(tn == 0):
            raise DegenerateFeatureError(f"object {obj} has a zero template feature")
        if T.shape[1] != q.shape[1]:
            raise ValueError("masklet and template feature dimensions differ")
        cos = np.clip((q @ T.T) / np.outer(qn, tn), -1.0, 1.0).max(axis=0)
        scores[obj] = float(np.clip(aggregate_class_score(cos), 0.0, 1.0))
    return scores


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def oracle_score(masklet: Masklet | np.ndarray, gt_mask: np.ndarray) -> float:
    """IoU of a masklet with a ground-truth modal mask."""
    m = masklet.mask if isinstance(masklet, Masklet) else masklet
    return mask_iou(m, gt_mask)


def score_masklet_oracle(masklet: Masklet, gt_masks: Mapping[str, Sequence[np.ndarray]], object_ids) -> dict[str, float]:
    """Oracle class scores: best IoU against any GT modal mask of each class in this view."""
    out = {}
    for obj in object_ids:
        masks = gt_masks.get(obj, ())
        out[obj] = max((oracle_score(masklet, g) for g in masks), default=0.0)
    return out


# --------------------------------------------------------------------------
# Triangulation
# --------------------------------------------------------------------------


def triangulate_pair(ray_i: Ray, ray_j: Ray, min_angle_deg: float = DEFAULT_PARALLEL_DEG) -> tuple[np.ndarray, float]:
    """Midpoint and length of the shortest segment between two forward half-lines.

    Raises:
        UnstableTriangulationError: rays within ``min_angle_deg`` of parallel.
        BehindCameraRejection: both closest parameters clamp to the ray origins.
    """
    d1, d2 = ray_i.direction, ray_j.direction
    o1, o2 = ray_i.origin, ray_j.origin
    c = float(d1 @ d2)
    sin2 = 1.0 - c * c
    if sin2 <= np.sin(np.deg2rad(min_angle_deg)) ** 2:
        raise UnstableTriangulationError("rays are nearly parallel")
    w = o1 - o2
    a1, a2 = float(d1 @ w), float(d2 @ w)
    s = (c * a2 - a1) / sin2
    t = (a2 - c * a1) / sin2
    if s < 0.0 or t < 0.0:
        # convex problem on the quadrant s, t >= 0: optimum lies on one of the two edges
        edges = [(0.0, max(0.0, a2)), (max(0.0, -a1), 0.0)]
        dists = [np.linalg.norm(w + es * d1 - et * d2) for es, et in edges]
        s, t = edges[int(np.argmin(dists))]
        if s == 0.0 and t == 0.0:
            raise BehindCameraRejection("closest approach lies behind both ray origins")
    p1 = o1 + s * d1
    p2 = o2 + t * d2
    return (p1 + p2) / 2.0, float(np.linalg.norm(p1 - p2))


def pair_class_scores(score_i: Mapping[str, float], score_j: Mapping[str, float]) -> tuple[dict[str, float], str]:
    """Elementwise product of class scores and its argmax (ties: lowest object id)."""
    if set(score_i) != set(score_j):
        raise ValueError("class score maps have different keys")
    prod = {k: float(score_i[k]) * float(score_j[k]) for k in sorted(score_i)}
    best = max(sorted(prod), key=lambda k: prod[k])
    return prod, best


# --------------------------------------------------------------------------
# Clustering
# --------------------------------------------------------------------------


@dataclass(eq=False)
class _Cluster:
    class_id: str
    positions: list[np.ndarray]
    members: list[CandidatePoint]
    views: dict[str, str]
    center: np.ndarray

    def admits(self, p: CandidatePoint, diameter: float) -> bool:
        if p.assigned_class != self.class_id:
            return False
        for view_id, masklet_id in p.source:
            if self.views.get(view_id, masklet_id) != masklet_id:
                return False
        n = len(self.positions)
        new_center = (self.center * n + p.position) / (n + 1)
        # every member, old and new, must stay within one diameter of the moved center
        pts = np.vstack(self.positions + [p.position])
        return bool(np.all(np.linalg.norm(pts - new_center, axis=1) <= diameter))

    def add(self, p: CandidatePoint) -> None:
        n = len(self.positions)
        self.center = (self.center * n + p.position) / (n + 1)
        self.positions.append(p.position)
        self.members.append(p)
        for view_id, masklet_id in p.source:
            self.views[view_id] = masklet_id


def greedy_cluster(points: Sequence[CandidatePoint], diameters: Mapping[str, float]) -> list[InstanceCandidate]:
    """Greedy highest-score-first clustering of candidate points into instances.

    Each point joins the nearest cluster of the same class whose center is
    within the class diameter and which would still hold at most one masklet
    per view; otherwise it seeds a new cluster. Centers are running means.
    """
    clusters: list[_Cluster] = []
    for p in sorted(points, key=lambda q: q.sort_key):
        d = float(diameters[p.assigned_class])
        best, best_dist = None, np.inf
        for c in clusters:
            dist = float(np.linalg.norm(p.position - c.center))
            if dist > d or dist >= best_dist:
                continue
            if c.admits(p, d):
                best, best_dist = c, dist
        if best is None:
            clusters.append(_Cluster(p.assigned_class, [p.position], [p], dict(p.source), p.position.copy()))
        else:
            best.add(p)
    return [InstanceCandidate(c.center.copy(), c.class_id, dict(c.views), list(c.members)) for c in clusters]


def extract_instances(
    clusters: Sequence[InstanceCandidate], diameters: Mapping[str, float], min_views: int = 2
) -> list[InstanceCandidate]:
    """Give every masklet to at most one instance.

    Pairing masklets of two same-class objects across views yields "ghost"
    points whose rays happen to pass close to each other; they form weakly
    supported clusters that reuse masklets of the real ones. Clusters claim
    masklets in order of support (member points, then score, then creation
    order); a cluster keeps only the member points whose masklets are both
    still free, its center is recomputed from them, and it is dropped when
    fewer than ``min_views`` views remain.
    """
    order = sorted(range(len(clusters)), key=lambda i: (-len(clusters[i].member_points), -clusters[i].score, i))
    claimed: set[tuple[str, str]] = set()
    kept: dict[int, InstanceCandidate] = {}
    for i in order:
        c = clusters[i]
        members = [p for p in c.member_points if not any(src in claimed for src in p.source)]
        views = {v: m for p in members for v, m in p.source}
        if len(views) < min_views:
            continue
        center = np.mean([p.position for p in members], axis=0)
        if np.any(np.linalg.norm([p.position - center for p in members], axis=1) > diameters[c.class_id]):
            continue
        claimed.update(views.items())
        kept[i] = InstanceCandidate(center, c.class_id, views, members)
    return [kept[i] for i in sorted(kept)]


# --------------------------------------------------------------------------
# Full detection stage
# --------------------------------------------------------------------------


@dataclass
class DetectConfig:
    gap_fraction: float = DEFAULT_GAP_FRACTION
    parallel_deg: float = DEFAULT_PARALLEL_DEG
    min_area: int = DEFAULT_MIN_AREA
    min_point_score: float = 0.0
    exclusive_masklets: bool = True  # post-clustering: each masklet supports one instance


def filter_masklets(masklets: Sequence[Masklet], min_area: int = DEFAULT_MIN_AREA) -> list[Masklet]:
    return [m for m in masklets if m.area >= min_area]


def candidate_points(
    cameras: Mapping[str, Camera],
    masklets_per_view: Mapping[str, Sequence[Masklet]],
    class_scores: Mapping[tuple[str, str], Mapping[str, float]],
    diameters: Mapping[str, float],
    config: DetectConfig | None = None,
) -> list[CandidatePoint]:
    """Triangulate every cross-view masklet pair through bounding-box-center rays."""
    config = config or DetectConfig()
    rays = {
        m.key: pixel_to_ray(cameras[view_id], m.bbox_center)
        for view_id, ms in masklets_per_view.items()
        for m in ms
    }
    views = sorted(v for v in masklets_per_view if masklets_per_view[v])
    points = []
    for vi, vj in itertools.combinations(views, 2):
        for mi in masklets_per_view[vi]:
            for mj in masklets_per_view[vj]:
                prod, cls = pair_class_scores(class_scores[mi.key], class_scores[mj.key])
                if prod[cls] <= config.min_point_score:
                    continue
                try:
                    center, gap = triangulate_pair(rays[mi.key], rays[mj.key], config.parallel_deg)
                except UnstableTriangulationError:
                    continue
                if gap > config.gap_fraction * diameters[cls]:
                    continue
                source = tuple(sorted((mi.key, mj.key)))
                points.append(CandidatePoint(center, source, prod, cls, gap))
    return points


def run_detection(
    cameras: Sequence[Camera],
    masklets_per_view: Mapping[str, Sequence[Masklet]],
    diameters: Mapping[str, float],
    *,
    library: TemplateLibrary | None = None,
    gt_masks: Mapping[str, Mapping[str, Sequence[np.ndarray]]] | None = None,
    config: DetectConfig | None = None,
) -> list[InstanceCandidate]:
    """Score masklets, triangulate cross-view pairs and cluster them into 3D instances.

    Exactly one of ``library`` (feature scoring) or ``gt_masks`` (oracle
    scoring; ``view_id -> class_id -> masks``) must be given.
    """
    config = config or DetectConfig()
    if len(cameras) < 2:
        raise InsufficientViewsError("detection needs at least two calibrated views")
    if (library is None) == (gt_masks is None):
        raise ValueError("provide exactly one of a template library or oracle ground truth")
    cams = {c.view_id: c for c in cameras}
    object_ids = sorted(diameters)
    kept = {v: filter_masklets(masklets_per_view.get(v, ()), config.min_area) for v in cams}
    scores: dict[tuple[str, str], dict[str, float]] = {}
    for v, ms in kept.items():
        for m in ms:
            if library is not None:
                s = score_masklet_features(m, library)
                scores[m.key] = {o: s.get(o, 0.0) for o in object_ids}
            else:
                scores[m.key] = score_masklet_oracle(m, gt_masks.get(v, {}), object_ids)
    points = candidate_points(cams, kept, scores, diameters, config)
    log.debug("triangulated %d candidate points", len(points))
    clusters = greedy_cluster(points, diameters)
    if config.exclusive_masklets:
        clusters = extract_instances(clusters, diameters)
    return clusters


def masklet_class_scores(instances: Sequence[InstanceCandidate]):
    """Per-masklet class score table implied by the instances' member points."""
    table: dict[tuple[str, str], dict[str, float]] = {}
    for inst in instances:
        for p in inst.member_points:
            for key in p.source:
                cur = table.setdefault(key, {})
                cur[inst.class_id] = max(cur.get(inst.class_id, 0.0), p.score)
    return table
