"""Multi-view occlusion-aware contour registration.

Minimizes a robust L1 reprojection error between visible observed contour
pixels and the nearest projected model contour points, jointly over all
views, with Levenberg-Marquardt on SE(3). The L1 norm is smoothed with a
Charbonnier kernel and solved by iteratively reweighted least squares;
model contours are re-rendered and re-matched every ``rematch_period`` steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from mvpose.core import Camera, RigidTransform, TriMesh, exp_so3, hat, project_to_so3
from mvpose.errors import NonConvergenceError, UnderConstrainedError
from mvpose.render import ModelContour, VisibleContourSet, model_contour_from_render, rasterize

log = logging.getLogger(__name__)

MAX_SOLVE_FAILURES = 10
LAMBDA_MAX = 1e12


@dataclass
class RefineConfig:
    total_iterations: int = 200
    rematch_period: int = 10
    robust_epsilon: float = 5.0  # px; smaller values pin the pose on lattice-aligned contour matches
    lm_lambda_init: float = 1e-3
    lm_lambda_factor: float = 10.0
    step_tolerance: float = 1e-8
    max_match_distance: float | None = None
    robust: bool = True

    def __post_init__(self):
        if self.total_iterations < 1 or self.rematch_period < 1:
            raise ValueError("iteration counts must be positive")
        if self.rematch_period > self.total_iterations:
            raise ValueError("rematch_period cannot exceed total_iterations")
        if self.robust_epsilon <= 0 or self.lm_lambda_init <= 0 or self.lm_lambda_factor <= 1:
            raise ValueError("robust_epsilon and lm_lambda_init must be positive, lm_lambda_factor > 1")


@dataclass(frozen=True)
class Correspondence:
    view_id: str
    observed_pixel: np.ndarray
    model_point_object_frame: np.ndarray


@dataclass(eq=False)
class Correspondences:
    """Array form of a correspondence list; ``view_index`` indexes the camera list."""

    view_index: np.ndarray  # (N,)
    observed: np.ndarray  # (N, 2)
    points_object: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.view_index)

    @classmethod
    def empty(cls) -> Correspondences:
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 3)))

    @classmethod
    def concat(cls, parts: Sequence[Correspondences]) -> Correspondences:
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.view_index for p in parts]),
            np.concatenate([p.observed for p in parts]),
            np.concatenate([p.points_object for p in parts]),
        )

    @classmethod
    def from_list(cls, items: Sequence[Correspondence], cameras: Sequence[Camera]) -> Correspondences:
        index = {c.view_id: i for i, c in enumerate(cameras)}
        if not items:
            return cls.empty()
        return cls(
            np.array([index[c.view_id] for c in items], dtype=np.int64),
            np.array([c.observed_pixel for c in items], dtype=np.float64).reshape(-1, 2),
            np.array([c.model_point_object_frame for c in items], dtype=np.float64).reshape(-1, 3),
        )

    def to_list(self, cameras: Sequence[Camera]) -> list[Correspondence]:
        return [
            Correspondence(cameras[v].view_id, o, p)
            for v, o, p in zip(self.view_index, self.observed, self.points_object)
        ]


@dataclass
class RefineResult:
    pose: RigidTransform
    cost: float
    iterations: int
    rematches: int
    n_correspondences: int
    converged: bool
    trace: list[tuple[int, float, float, float, int]] = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["iteration,cost,lambda,step_norm,active_correspondences"]
        lines += [f"{i},{c:.9g},{lam:.3g},{s:.6g},{n}" for i, c, lam, s, n in self.trace]
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Matching
# --------------------------------------------------------------------------


def nearest_lowest_index(tree_points: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest neighbor indices and distances; exact ties resolve to the lowest index."""
    tree = cKDTree(tree_points)
    k = min(8, len(tree_points))
    d, idx = tree.query(queries, k=k)
    d = d.reshape(len(queries), k)
    idx = idx.reshape(len(queries), k)
    tied = d == d[:, :1]
    best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    overflow = tied[:, -1] if k > 1 else np.zeros(len(queries), dtype=bool)
    for i in np.flatnonzero(overflow):
        ball = tree.query_ball_point(queries[i], d[i, 0] * (1 + 1e-12) + 1e-15)
        cand = [j for j in ball if np.linalg.norm(tree_points[j] - queries[i]) == d[i, 0]]
        best[i] = min(cand)
    return best, d[:, 0]


def match_contours(
    observed: VisibleContourSet | np.ndarray,
    model: ModelContour,
    view_id: str | None = None,
    max_distance: float | None = None,
) -> list[Correspondence]:
    """Pair each observed contour pixel with the nearest projected model contour point."""
    obs = observed.pixels if isinstance(observed, VisibleContourSet) else np.asarray(observed, dtype=np.float64)
    vid = view_id if view_id is not None else model.view_id
    if len(obs) == 0 or len(model) == 0:
        return []
    idx, dist = nearest_lowest_index(model.pixels, obs)
    keep = np.ones(len(obs), dtype=bool) if max_distance is None else dist <= max_distance
    return [Correspondence(vid, obs[i], model.points_object[idx[i]]) for i in np.flatnonzero(keep)]


def _match_arrays(obs: np.ndarray, model: ModelContour, view_index: int, max_distance) -> Correspondences:
    if len(obs) == 0 or len(model) == 0:
        return Correspondences.empty()
    idx, dist = nearest_lowest_index(model.pixels, obs)
    keep = np.ones(len(obs), dtype=bool) if max_distance is None else dist <= max_distance
    return Correspondences(
        np.full(int(keep.sum()), view_index, dtype=np.int64), obs[keep], model.points_object[idx[keep]]
    )


# --------------------------------------------------------------------------
# Residuals, weights and Jacobians
# --------------------------------------------------------------------------


def _camera_stack(cameras: Sequence[Camera]):
    Rc = np.stack([c.world_to_cam.rotation for c in cameras])
    tc = np.stack([c.world_to_cam.translation for c in cameras])
    Ks = np.stack([c.intrinsics for c in cameras])
    return Rc, tc, Ks


def _project_corr(pose: RigidTransform, corr: Correspondences, cameras: Sequence[Camera]):
    """Returns (world points, camera points, pixels) for every correspondence."""
    Rc, tc, Ks = _camera_stack(cameras)
    v = corr.view_index
    pw = pose.apply(corr.points_object)
    pc = np.einsum("nij,nj->ni", Rc[v], pw) + tc[v]
    K = Ks[v]
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (K[:, 0, 0] * pc[:, 0] + K[:, 0, 1] * pc[:, 1]) / z + K[:, 0, 2]
        vv = K[:, 1, 1] * pc[:, 1] / z + K[:, 1, 2]
    return pw, pc, np.stack([u, vv], axis=1)


def residuals(pose: RigidTransform, correspondences, cameras: Sequence[Camera]) -> np.ndarray:
    """``observed - projected`` per correspondence, (N, 2) pixels.

    Correspondences whose model point lands at non-positive depth are dropped
    with a logged warning.
    """
    corr = (
        correspondences
        if isinstance(correspondences, Correspondences)
        else Correspondences.from_list(list(correspondences), cameras)
    )
    if len(corr) == 0:
        return np.zeros((0, 2))
    _, pc, px = _project_corr(pose, corr, cameras)
    ok = pc[:, 2] > 0
    if not ok.all():
        log.warning("dropped %d correspondences behind the camera", int((~ok).sum()))
    return corr.observed[ok] - px[ok]


def robust_weight(residual_component, epsilon: float):
    """Charbonnier IRLS weight ``1 / sqrt(r^2 + eps^2)``, so ``w r^2 ~ |r|``."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    r = np.asarray(residual_component, dtype=np.float64)
    w = 1.0 / np.sqrt(r * r + epsilon * epsilon)
    return float(w) if w.ndim == 0 else w


def robust_cost(r: np.ndarray, epsilon: float) -> float:
    """Smoothed L1 cost: sum over scalar components of sqrt(r^2 + eps^2)."""
    r = np.asarray(r, dtype=np.float64).ravel()
    return float(np.sqrt(r * r + epsilon * epsilon).sum())


def projection_jacobian(pose: RigidTransform, corr: Correspondences, cameras: Sequence[Camera]):
    """Pixels (N, 2), analytic d(pixel)/d(delta) (N, 2, 6) and depths (N,).

    ``delta = (omega, dt)`` perturbs the pose as ``R <- exp(omega) R``,
    ``t <- t + dt`` with ``omega`` in world axes.
    """
    Rc, _, Ks = _camera_stack(cameras)
    v = corr.view_index
    pw, pc, px = _project_corr(pose, corr, cameras)
    K = Ks[v]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    n = len(corr)
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = K[:, 0, 0] / z
    Jp[:, 0, 1] = K[:, 0, 1] / z
    Jp[:, 0, 2] = -(K[:, 0, 0] * x + K[:, 0, 1] * y) / z**2
    Jp[:, 1, 1] = K[:, 1, 1] / z
    Jp[:, 1, 2] = -K[:, 1, 1] * y / z**2
    JpR = np.einsum("nij,njk->nik", Jp, Rc[v])
    lever = pw - pose.translation  # R X
    skew = np.zeros((n, 3, 3))
    skew[:, 0, 1], skew[:, 0, 2] = -lever[:, 2], lever[:, 1]
    skew[:, 1, 0], skew[:, 1, 2] = lever[:, 2], -lever[:, 0]
    skew[:, 2, 0], skew[:, 2, 1] = -lever[:, 1], lever[:, 0]
    J = np.empty((n, 2, 6))
    J[:, :, :3] = -np.einsum("nij,njk->nik", JpR, skew)
    J[:, :, 3:] = JpR
    return px, J, z


def retract(pose: RigidTransform, delta) -> RigidTransform:
    delta = np.asarray(delta, dtype=np.float64)
    R = exp_so3(delta[:3]) @ pose.rotation
    return RigidTransform(project_to_so3(R), pose.translation + delta[3:])


# --------------------------------------------------------------------------
# Generic damped IRLS / LM window
# --------------------------------------------------------------------------


def solve_damped(J: np.ndarray, r: np.ndarray, w: np.ndarray, lam: float) -> np.ndarray:
    """Solve ``(J^T W J + lam I) delta = J^T W r`` for a flat residual vector ``r``."""
    JW = J.T * w
    H = JW @ J
    g = JW @ r
    return np.linalg.solve(H + lam * np.eye(H.shape[0]), g)


@dataclass
class _LMState:
    lam: float
    failures: int = 0


def lm_window(
    x,
    evaluate: Callable,
    update: Callable,
    n_steps: int,
    state: _LMState,
    config: RefineConfig,
    trace: list | None = None,
    start_iteration: int = 0,
):
    """Run up to ``n_steps`` LM iterations with fixed correspondences.

    ``evaluate(x)`` returns ``(r, J)`` with ``r`` the flat residual vector of
    ``observed - model`` and ``J`` its model Jacobian (so the linearized
    residual is ``r - J delta``), or ``None`` if ``x`` is infeasible.
    ``update(x, delta)`` retracts a step. Returns ``(x, steps_taken, converged, moved)``.
    """
    eps = config.robust_epsilon
    ev = evaluate(x)
    if ev is None:
        raise ValueError("initial state is infeasible")
    r, J = ev
    cost = robust_cost(r, eps) if config.robust else float(r @ r)
    moved = False
    for step in range(n_steps):
        w = robust_weight(r, eps) if config.robust else np.ones_like(r)
        try:
            delta = solve_damped(J, r, w, state.lam)
            if not np.all(np.isfinite(delta)):
                raise np.linalg.LinAlgError("non-finite step")
        except np.linalg.LinAlgError:
            state.failures += 1
            state.lam *= config.lm_lambda_factor
            if state.failures >= MAX_SOLVE_FAILURES:
                raise NonConvergenceError("normal equations failed repeatedly", best_pose=x) from None
            continue
        state.failures = 0
        step_norm = float(np.linalg.norm(delta))
        cand = update(x, delta)
        ev_new = evaluate(cand)
        new_cost = np.inf
        if ev_new is not None:
            r_new = ev_new[0]
            new_cost = robust_cost(r_new, eps) if config.robust else float(r_new @ r_new)
        if new_cost < cost:
            x, (r, J), cost = cand, ev_new, new_cost
            state.lam = max(state.lam / config.lm_lambda_factor, 1e-12)
            moved = True
        else:
            state.lam = min(state.lam * config.lm_lambda_factor, LAMBDA_MAX)
        if trace is not None:
            trace.append((start_iteration + step, cost, state.lam, step_norm, len(r) // 2))
        if step_norm < config.step_tolerance or state.lam >= LAMBDA_MAX:
            return x, step + 1, True, moved
    return x, n_steps, False, moved


# --------------------------------------------------------------------------
# Contour registration
# --------------------------------------------------------------------------


def _observed_pixels(observed) -> np.ndarray:
    if isinstance(observed, VisibleContourSet):
        return observed.pixels
    return np.asarray(observed, dtype=np.float64).reshape(-1, 2)


def build_correspondences(
    pose: RigidTransform,
    observed: Mapping[str, VisibleContourSet | np.ndarray],
    mesh: TriMesh,
    cameras: Sequence[Camera],
    max_distance: float | None = None,
) -> Correspondences:
    """Render model contours under ``pose`` in every view and match observed points to them."""
    parts = []
    for i, cam in enumerate(cameras):
        obs = observed.get(cam.view_id)
        if obs is None:
            continue
        obs = _observed_pixels(obs)
        if len(obs) == 0:
            continue
        mask, depth = rasterize(mesh, cam, pose)
        model = model_contour_from_render(mask, depth, cam, pose)
        parts.append(_match_arrays(obs, model, i, max_distance))
    return Correspondences.concat(parts)


def refine_contours(
    initial: RigidTransform,
    observed: Mapping[str, VisibleContourSet | np.ndarray],
    mesh: TriMesh,
    cameras: Sequence[Camera],
    config: RefineConfig | None = None,
) -> RefineResult:
    """LM contour registration with periodic re-rendering and re-matching.

    Raises:
        UnderConstrainedError: fewer than six scalar residuals at a rematch.
        NonConvergenceError: the normal equations failed ten times in a row.
    """
    config = config or RefineConfig()
    cams = [c for c in cameras if c.view_id in observed]
    pose = initial
    state = _LMState(config.lm_lambda_init)
    trace: list = []
    it = 0
    rematches = 0
    converged = False
    n_corr = 0
    while it < config.total_iterations:
        corr = build_correspondences(pose, observed, mesh, cams, config.max_match_distance)
        rematches += 1
        n_corr = len(corr)
        if 2 * n_corr < 6:
            raise UnderConstrainedError(f"only {2 * n_corr} scalar residuals for 6 pose parameters")

        def evaluate(p: RigidTransform, corr=corr):
            px, J, z = projection_jacobian(p, corr, cams)
            if np.any(z <= 0):
                return None
            return (corr.observed - px).ravel(), J.reshape(-1, 6)

        n_steps = min(config.rematch_period, config.total_iterations - it)
        pose, taken, window_converged, moved = lm_window(
            pose, evaluate, retract, n_steps, state, config, trace, start_iteration=it
        )
        it += n_steps
        if window_converged and not moved:
            converged = True
            break
    final = build_correspondences(pose, observed, mesh, cams, config.max_match_distance)
    r = residuals(pose, final, cams)
    return RefineResult(pose, robust_cost(r, config.robust_epsilon), it, rematches, len(final), converged, trace)


def lm_refine(
    initial: RigidTransform,
    observed: Mapping[str, VisibleContourSet | np.ndarray],
    mesh: TriMesh,
    cameras: Sequence[Camera],
    config: RefineConfig | None = None,
) -> RigidTransform:
    """Final pose from :func:`refine_contours`."""
    return refine_contours(initial, observed, mesh, cameras, config).pose
