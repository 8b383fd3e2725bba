from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.spatial.transform import Rotation

from .facemodel import FaceRig, landmark_jacobian, landmark_vertices, project_points, skew
from .models import Keyframe, ProjectionError, ShapeParams, SolverError

logger = logging.getLogger(__name__)

ObjectiveFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class SolverReport:
    iterations: int = 0
    objective: float = math.inf
    converged: bool = False
    gradient_norm: float = math.inf
    history: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class FitConfig:
    rounds: int = 3
    qn_iterations: int = 30
    qn_memory: int = 8
    pnp_iterations: int = 20
    profile_pnp_iterations: int = 8
    identity_bound: float = 3.0
    focal_min_ratio: float = 0.25
    focal_max_ratio: float = 8.0
    focal_grid_size: int = 24
    fit_identity: bool = True
    fit_focal: bool = True
    alternation_tolerance: float = 1e-6
    max_alternations: int = 20
    identity_qn_iterations: int = 3

    @classmethod
    def from_settings(cls, settings) -> "FitConfig":
        return cls(
            rounds=settings.fit_rounds,
            qn_iterations=settings.fit_qn_iterations,
            qn_memory=settings.qn_memory,
            pnp_iterations=settings.pnp_iterations,
            identity_bound=settings.identity_bound,
            focal_min_ratio=settings.focal_min_ratio,
            focal_max_ratio=settings.focal_max_ratio,
            focal_grid_size=settings.focal_grid_size,
            alternation_tolerance=settings.alternation_tolerance,
            max_alternations=settings.max_alternations,
            identity_qn_iterations=settings.qn_iterations,
        )


def _projected_gradient_norm(x: np.ndarray, grad: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    return float(np.linalg.norm(np.clip(x - grad, lo, hi) - x))


def box_qn_minimize(
    objective: ObjectiveFn,
    bounds: Tuple[np.ndarray, np.ndarray],
    x0: np.ndarray,
    max_iter: int = 3,
    memory: int = 8,
) -> Tuple[np.ndarray, SolverReport]:
    """Limited-memory quasi-Newton with box projection. The result is inside the box and never worse than x0."""
    lo = np.broadcast_to(np.asarray(bounds[0], dtype=np.float64), np.shape(x0)).copy()
    hi = np.broadcast_to(np.asarray(bounds[1], dtype=np.float64), np.shape(x0)).copy()
    if np.any(lo > hi):
        raise SolverError(f"Inverted bounds at indices {np.flatnonzero(lo > hi).tolist()}")
    x0 = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)

    def checked(x: np.ndarray) -> Tuple[float, np.ndarray]:
        value, grad = objective(x)
        grad = np.asarray(grad, dtype=np.float64)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise SolverError("Objective or gradient is not finite")
        return float(value), grad

    f0, g0 = checked(x0)
    history = [f0]
    if max_iter <= 0 or x0.size == 0:
        return x0, SolverReport(0, f0, True, _projected_gradient_norm(x0, g0, lo, hi), history)

    result = minimize(
        checked,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={"maxiter": max_iter, "maxcor": memory, "ftol": 1e-14, "gtol": 1e-12},
    )
    x = np.clip(result.x, lo, hi)
    value, grad = checked(x)
    if value > f0:
        x, value, grad = x0, f0, g0
    history.append(value)
    report = SolverReport(
        iterations=int(result.nit),
        objective=value,
        converged=bool(result.success),
        gradient_norm=_projected_gradient_norm(x, grad, lo, hi),
        history=history,
    )
    return x, report


def _reprojection(points3d: np.ndarray, rotation: np.ndarray, translation: np.ndarray, focal: float, center) -> np.ndarray:
    return project_points(points3d @ rotation.T + translation[None, :], focal, center)


def pose_jacobian(points3d: np.ndarray, rotation: np.ndarray, translation: np.ndarray, focal: float) -> np.ndarray:
    """(2N, 6) derivative of projections w.r.t. the left rotation increment and translation."""
    rotated = points3d @ rotation.T
    cam = rotated + translation[None, :]
    inv_z = 1.0 / cam[:, 2]
    n = len(points3d)
    dp_dX = np.zeros((n, 2, 3))
    dp_dX[:, 0, 0] = focal * inv_z
    dp_dX[:, 1, 1] = focal * inv_z
    dp_dX[:, 0, 2] = -focal * cam[:, 0] * inv_z**2
    dp_dX[:, 1, 2] = -focal * cam[:, 1] * inv_z**2
    d_rot = np.einsum("nij,njk->nik", dp_dX, np.stack([-skew(v) for v in rotated]))
    return np.concatenate([d_rot, dp_dX], axis=2).reshape(2 * n, 6)


def pnp_refine(
    points3d: np.ndarray,
    points2d: np.ndarray,
    focal: float,
    rotation: np.ndarray,
    translation: np.ndarray,
    center: np.ndarray,
    iterations: int = 20,
) -> Tuple[np.ndarray, np.ndarray, SolverReport]:
    """
    Damped Gauss-Newton on (R, t) with R <- exp([w]x) R. Steps that increase the reprojection error are rejected
    and the damping grows; a run that never accepts a step while error remains is reported as not converged.
    """
    points3d = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    points2d = np.asarray(points2d, dtype=np.float64).reshape(-1, 2)
    if len(points3d) != len(points2d):
        raise ValueError(f"{len(points3d)} 3-D points vs {len(points2d)} 2-D points")
    if len(points3d) < 4:
        raise ValueError("PnP needs at least 4 correspondences")
    rotation = np.asarray(rotation, dtype=np.float64)
    if rotation.shape == (4,):
        rotation = Rotation.from_quat(rotation).as_matrix()
    translation = np.asarray(translation, dtype=np.float64).copy()

    try:
        residual = (_reprojection(points3d, rotation, translation, focal, center) - points2d).reshape(-1)
    except ProjectionError as exc:
        raise SolverError(f"PnP initial pose puts point {exc.landmark_index} behind the camera") from exc
    error = float(residual @ residual)
    report = SolverReport(objective=error, history=[error])
    damping = 1e-3
    for it in range(iterations):
        jac = pose_jacobian(points3d, rotation, translation, focal)
        jtj = jac.T @ jac
        jtr = jac.T @ residual
        report.gradient_norm = float(np.linalg.norm(2.0 * jtr))
        if report.gradient_norm < 1e-12 or error < 1e-24:
            report.converged = True
            break
        accepted = False
        while damping < 1e12:
            system = jtj + damping * np.diag(np.maximum(np.diag(jtj), 1e-12))
            try:
                step = -np.linalg.solve(system, jtr)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            new_rotation = Rotation.from_rotvec(step[:3]).as_matrix() @ rotation
            new_translation = translation + step[3:]
            try:
                new_residual = (
                    _reprojection(points3d, new_rotation, new_translation, focal, center) - points2d
                ).reshape(-1)
            except ProjectionError:
                damping *= 10.0
                continue
            new_error = float(new_residual @ new_residual)
            if new_error < error:
                rotation, translation, residual, error = new_rotation, new_translation, new_residual, new_error
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                break
            damping *= 10.0
        report.iterations = it + 1
        report.history.append(error)
        if not accepted:
            # no descent step exists at machine precision: a local minimum, or a degenerate system
            report.converged = report.gradient_norm < 1e-6 * max(1.0, error)
            if not report.converged:
                logger.warning("PnP could not find a descent step (error %.3g)", error)
            break
        if np.linalg.norm(step) < 1e-14:
            report.converged = True
            break
    report.objective = error
    return rotation, translation, report


def landmark_objective(
    params: ShapeParams, landmarks: np.ndarray, rig: FaceRig, center: np.ndarray
) -> Tuple[float, np.ndarray, "LandmarkGradients"]:
    """Sum of squared distances between projected landmarks (no offsets) and targets, with block gradients."""
    verts = landmark_vertices(params.identity, params.expression, rig, strict=False)
    projected = _reprojection(verts, params.rotation_matrix, params.translation, params.focal, center)
    residual = (projected - landmarks).reshape(-1)
    jac = landmark_jacobian(params, rig, center)
    grads = LandmarkGradients(
        rotation=2.0 * jac.rotation.T @ residual,
        translation=2.0 * jac.translation.T @ residual,
        expression=2.0 * jac.expression.T @ residual,
        identity=2.0 * jac.identity.T @ residual,
        focal=float(2.0 * jac.focal @ residual),
    )
    return float(residual @ residual), residual, grads


@dataclass
class LandmarkGradients:
    rotation: np.ndarray
    translation: np.ndarray
    expression: np.ndarray
    identity: np.ndarray
    focal: float


def _safe_objective(params: ShapeParams, landmarks: np.ndarray, rig: FaceRig, center: np.ndarray) -> float:
    try:
        return landmark_objective(params, landmarks, rig, center)[0]
    except ProjectionError:
        return math.inf


def _pose_step(params: ShapeParams, landmarks, rig, center, iterations: int) -> ShapeParams:
    verts = landmark_vertices(params.identity, params.expression, rig, strict=False)
    rotation, translation, _ = pnp_refine(
        verts, landmarks, params.focal, params.rotation_matrix, params.translation, center, iterations=iterations
    )
    return params.with_updates(rotation=Rotation.from_matrix(rotation).as_quat(), translation=translation)


def _coefficient_step(
    params: ShapeParams,
    landmarks: np.ndarray,
    rig: FaceRig,
    center: np.ndarray,
    block: str,
    bounds: Tuple[float, float],
    cfg: FitConfig,
    iterations: int,
) -> ShapeParams:
    def objective(values: np.ndarray) -> Tuple[float, np.ndarray]:
        trial = params.with_updates(**{block: values})
        try:
            value, _, grads = landmark_objective(trial, landmarks, rig, center)
        except ProjectionError as exc:
            raise SolverError(f"Coefficient step moved landmark {exc.landmark_index} behind the camera") from exc
        return value, getattr(grads, block)

    start = getattr(params, block)
    try:
        values, _ = box_qn_minimize(
            objective, (np.full(start.shape, bounds[0]), np.full(start.shape, bounds[1])), start, iterations, cfg.qn_memory
        )
    except SolverError as exc:
        logger.warning("%s step skipped: %s", block, exc)
        return params
    return params.with_updates(**{block: values})


def focal_bounds(image_width: float, cfg: FitConfig) -> Tuple[float, float]:
    return cfg.focal_min_ratio * image_width, cfg.focal_max_ratio * image_width


def _focal_step(params: ShapeParams, landmarks, rig, center, cfg: FitConfig) -> ShapeParams:
    """Log-grid search then bounded Brent polish; the pose is re-fitted at every candidate focal length."""
    width = 2.0 * float(center[0])
    lo, hi = focal_bounds(width, cfg)

    def profiled(log_f: float) -> Tuple[float, ShapeParams]:
        candidate = params.with_updates(focal=math.exp(log_f))
        # keep the projected scale: depth follows focal
        scale = candidate.focal / params.focal
        candidate = candidate.with_updates(
            translation=np.array([params.translation[0] * scale, params.translation[1] * scale, params.translation[2] * scale])
        )
        try:
            candidate = _pose_step(candidate, landmarks, rig, center, cfg.profile_pnp_iterations)
        except SolverError:
            return math.inf, candidate
        return _safe_objective(candidate, landmarks, rig, center), candidate

    grid = np.linspace(math.log(lo), math.log(hi), cfg.focal_grid_size)
    scores = [profiled(g)[0] for g in grid]
    best = int(np.argmin(scores))
    left = grid[max(best - 1, 0)]
    right = grid[min(best + 1, len(grid) - 1)]
    polish = minimize_scalar(lambda g: profiled(g)[0], bounds=(left, right), method="bounded", options={"xatol": 1e-8})
    log_f = float(polish.x) if polish.fun <= scores[best] else float(grid[best])
    value, candidate = profiled(log_f)
    if value <= _safe_objective(params, landmarks, rig, center):
        return candidate
    return params


def fit_ground_truth(
    landmarks: np.ndarray,
    rig: FaceRig,
    init: ShapeParams,
    center: np.ndarray,
    cfg: Optional[FitConfig] = None,
) -> Tuple[ShapeParams, SolverReport]:
    """
    Alternating fit of pose, expression, identity and focal length to 2-D landmarks. Displacements are not
    optimised; they come back as the remaining residual.
    """
    cfg = cfg or FitConfig()
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape != (rig.n_landmarks, 2):
        raise ValueError(f"Expected {rig.n_landmarks} landmarks, got {landmarks.shape}")
    params = init.with_updates(
        expression=np.clip(init.expression, 0.0, 1.0),
        displacements=np.zeros((rig.n_landmarks, 2)),
    )
    current = _safe_objective(params, landmarks, rig, center)
    if not math.isfinite(current):
        raise SolverError("Initial shape does not project in front of the camera")
    report = SolverReport(objective=current, history=[current])

    for round_ in range(cfg.rounds):
        start, start_value = params, current
        params = _pose_step(params, landmarks, rig, center, cfg.pnp_iterations)
        params = _coefficient_step(params, landmarks, rig, center, "expression", (0.0, 1.0), cfg, cfg.qn_iterations)
        if cfg.fit_identity and rig.n_identity:
            bound = cfg.identity_bound
            params = _coefficient_step(params, landmarks, rig, center, "identity", (-bound, bound), cfg, cfg.qn_iterations)
        if cfg.fit_focal:
            params = _focal_step(params, landmarks, rig, center, cfg)
        current = _safe_objective(params, landmarks, rig, center)
        report.iterations = round_ + 1
        if current > start_value:
            logger.warning("Fit round %d increased the objective (%.6g > %.6g); reverting", round_ + 1, current, start_value)
            params, current = start, start_value
            break
        report.history.append(current)
        logger.debug("fit round %d objective %.6g", round_ + 1, current)
        if start_value - current <= 1e-15 * max(1.0, start_value):
            report.converged = True
            break

    verts = landmark_vertices(params.identity, params.expression, rig, strict=False)
    projected = _reprojection(verts, params.rotation_matrix, params.translation, params.focal, center)
    params = params.with_updates(displacements=landmarks - projected)
    report.objective = current
    return params, report


def _keyframe_terms(
    identity: np.ndarray, focal: float, keyframe: Keyframe, rig: FaceRig, center: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    params = ShapeParams(
        rotation=keyframe.rotation,
        translation=keyframe.translation,
        expression=np.clip(keyframe.expression, 0.0, 1.0),
        displacements=np.zeros((rig.n_landmarks, 2)),
        identity=identity,
        focal=focal,
    )
    verts = landmark_vertices(identity, params.expression, rig, strict=False)
    cam = verts @ params.rotation_matrix.T + params.translation[None, :]
    projected = project_points(cam, focal, center)
    residual = (projected - keyframe.landmarks).reshape(-1)
    return residual, landmark_jacobian(params, rig, center).identity, (cam[:, :2] / cam[:, 2:3]).reshape(-1)


def identity_focal_objective(
    identity: np.ndarray, focal: float, keyframes: Sequence[Keyframe], rig: FaceRig, center: np.ndarray
) -> Tuple[float, np.ndarray, float]:
    """Total reprojection error over keyframes with poses and expressions held fixed, plus d/du and d/df."""
    value = 0.0
    grad_u = np.zeros(rig.n_identity)
    grad_f = 0.0
    for keyframe in keyframes:
        residual, jac_u, normalized = _keyframe_terms(identity, focal, keyframe, rig, center)
        value += float(residual @ residual)
        grad_u += 2.0 * jac_u.T @ residual
        grad_f += float(2.0 * normalized @ residual)
    return value, grad_u, grad_f


def _optimal_focal(identity, keyframes, rig, center, lo: float, hi: float, current: float) -> float:
    """Projections are affine in f, so the 1-D minimiser is closed-form."""
    num = 0.0
    den = 0.0
    for keyframe in keyframes:
        _, _, normalized = _keyframe_terms(identity, current, keyframe, rig, center)
        offset = (keyframe.landmarks - np.asarray(center)[None, :]).reshape(-1)
        num += float(normalized @ offset)
        den += float(normalized @ normalized)
    if den <= 0.0:
        return current
    return float(np.clip(num / den, lo, hi))


def solve_identity_focal(
    keyframes: Sequence[Keyframe],
    rig: FaceRig,
    identity: np.ndarray,
    focal: float,
    center: np.ndarray,
    cfg: Optional[FitConfig] = None,
) -> Tuple[np.ndarray, float, SolverReport]:
    if not keyframes:
        raise ValueError("Identity/focal solve needs at least one keyframe")
    cfg = cfg or FitConfig()
    u = np.asarray(identity, dtype=np.float64).copy()
    f = float(focal)
    lo, hi = focal_bounds(2.0 * float(center[0]), cfg)
    bound = cfg.identity_bound

    try:
        value = identity_focal_objective(u, f, keyframes, rig, center)[0]
    except ProjectionError as exc:
        raise SolverError(f"Keyframe landmark {exc.landmark_index} projects behind the camera") from exc
    report = SolverReport(objective=value, history=[value])

    def u_objective(values: np.ndarray) -> Tuple[float, np.ndarray]:
        try:
            obj, grad_u, _ = identity_focal_objective(values, f, keyframes, rig, center)
        except ProjectionError as exc:
            raise SolverError(f"Identity step moved landmark {exc.landmark_index} behind the camera") from exc
        return obj, grad_u

    for alternation in range(cfg.max_alternations):
        previous = value
        if rig.n_identity:
            u, _ = box_qn_minimize(
                u_objective, (np.full(u.shape, -bound), np.full(u.shape, bound)), u, cfg.identity_qn_iterations, cfg.qn_memory
            )
        candidate = _optimal_focal(u, keyframes, rig, center, lo, hi, f)
        try:
            candidate_value = identity_focal_objective(u, candidate, keyframes, rig, center)[0]
        except ProjectionError:
            candidate_value = math.inf
        current_value = identity_focal_objective(u, f, keyframes, rig, center)[0]
        if candidate_value <= current_value:
            f, value = candidate, candidate_value
        else:
            value = current_value
        report.history.append(value)
        report.iterations = alternation + 1
        if previous - value <= cfg.alternation_tolerance * max(previous, 1e-300):
            report.converged = True
            break
    report.objective = value
    _, grad_u, grad_f = identity_focal_objective(u, f, keyframes, rig, center)
    report.gradient_norm = float(np.sqrt(grad_u @ grad_u + grad_f**2))
    logger.info("Identity/focal solve: %d alternations, objective %.6g, f=%.3f", report.iterations, value, f)
    return u, f, report
