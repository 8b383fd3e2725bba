from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .models import BoundingBox, ProjectionError, ShapeParams

logger = logging.getLogger(__name__)

DEPTH_EPSILON = 1e-6


@dataclass(frozen=True)
class FaceRig:
    """
    Identity/expression face model. core_tensor has shape (3V, n+1, n_id+1): the expression axis holds the neutral
    slice followed by n blendshape deltas, the identity axis holds the identity origin followed by n_id bases.
    Vertices are laid out as (x0, y0, z0, x1, ...).
    """

    core_tensor: np.ndarray
    mean_landmarks: np.ndarray
    landmark_indices: np.ndarray
    triangles: np.ndarray
    eye_corners: Tuple[int, int]

    def __post_init__(self) -> None:
        core = np.asarray(self.core_tensor, dtype=np.float64)
        if core.ndim != 3 or core.shape[0] % 3 != 0:
            raise ValueError(f"Core tensor must be (3V, n+1, n_id+1), got {core.shape}")
        if core.shape[1] < 1 or core.shape[2] < 1:
            raise ValueError(f"Core tensor has empty axes: {core.shape}")
        if not np.all(np.isfinite(core)):
            raise ValueError("Core tensor contains non-finite values")
        indices = np.asarray(self.landmark_indices, dtype=np.int64).reshape(-1)
        vertex_count = core.shape[0] // 3
        if indices.size == 0 or indices.min() < 0 or indices.max() >= vertex_count:
            raise ValueError(f"Landmark indices must lie in [0, {vertex_count})")
        mean = np.asarray(self.mean_landmarks, dtype=np.float64)
        if mean.shape != (indices.size, 2):
            raise ValueError(f"Mean landmarks {mean.shape} do not match {indices.size} landmark indices")
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size and (triangles.min() < 0 or triangles.max() >= vertex_count):
            raise ValueError("Triangle indices out of range")
        left, right = (int(i) for i in self.eye_corners)
        if not (0 <= left < indices.size and 0 <= right < indices.size) or left == right:
            raise ValueError(f"Eye corners {self.eye_corners} must be two distinct landmark positions")
        for name, value in (
            ("core_tensor", core),
            ("mean_landmarks", mean),
            ("landmark_indices", indices),
            ("triangles", triangles),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "eye_corners", (left, right))

    @property
    def vertex_count(self) -> int:
        return self.core_tensor.shape[0] // 3

    @property
    def n_expressions(self) -> int:
        return self.core_tensor.shape[1] - 1

    @property
    def n_identity(self) -> int:
        return self.core_tensor.shape[2] - 1

    @property
    def n_landmarks(self) -> int:
        return int(self.landmark_indices.size)

    @property
    def landmark_rows(self) -> np.ndarray:
        """Core tensor rows (3 per landmark) of the landmark vertices."""
        return (3 * self.landmark_indices[:, None] + np.arange(3)[None, :]).reshape(-1)


def evaluate_rig(identity: np.ndarray, rig: FaceRig) -> Tuple[np.ndarray, np.ndarray]:
    u = np.asarray(identity, dtype=np.float64).reshape(-1)
    if u.shape[0] != rig.n_identity:
        raise ValueError(f"Identity has {u.shape[0]} coefficients, rig expects {rig.n_identity}")
    contracted = rig.core_tensor[..., 0] + rig.core_tensor[..., 1:] @ u
    return contracted[:, 0].copy(), contracted[:, 1:].copy()


def _check_expression(expression: np.ndarray, rig: FaceRig, strict: bool) -> np.ndarray:
    x = np.asarray(expression, dtype=np.float64).reshape(-1)
    if x.shape[0] != rig.n_expressions:
        raise ValueError(f"Expression has {x.shape[0]} coefficients, rig expects {rig.n_expressions}")
    if np.any(x < 0.0) or np.any(x > 1.0):
        if strict:
            raise ValueError("Expression coefficients must lie in [0, 1]")
        logger.warning("Clamping %d expression coefficients into [0, 1]", int(np.sum((x < 0.0) | (x > 1.0))))
        x = np.clip(x, 0.0, 1.0)
    return x


def shape_vertices(identity: np.ndarray, expression: np.ndarray, rig: FaceRig, strict: bool = True) -> np.ndarray:
    """(V, 3) vertices b0 + B x. strict rejects x outside [0, 1]; otherwise x is clamped with a warning."""
    x = _check_expression(expression, rig, strict)
    b0, basis = evaluate_rig(identity, rig)
    return (b0 + basis @ x).reshape(-1, 3)


def landmark_vertices(identity: np.ndarray, expression: np.ndarray, rig: FaceRig, strict: bool = True) -> np.ndarray:
    """Landmark vertices only, without evaluating the full mesh."""
    x = _check_expression(expression, rig, strict)
    u = np.asarray(identity, dtype=np.float64).reshape(-1)
    if u.shape[0] != rig.n_identity:
        raise ValueError(f"Identity has {u.shape[0]} coefficients, rig expects {rig.n_identity}")
    core = rig.core_tensor[rig.landmark_rows]
    contracted = core[..., 0] + core[..., 1:] @ u
    return (contracted[:, 0] + contracted[:, 1:] @ x).reshape(-1, 3)


def project_points(points: np.ndarray, focal: float, center: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-frame points; raises ProjectionError naming the first bad point."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    depth = pts[:, 2]
    bad = np.flatnonzero(~(depth > DEPTH_EPSILON))
    if bad.size:
        raise ProjectionError(int(bad[0]), float(depth[bad[0]]))
    return focal * pts[:, :2] / depth[:, None] + np.asarray(center, dtype=np.float64)[None, :]


def camera_points(params: ShapeParams, vertices: np.ndarray) -> np.ndarray:
    return vertices @ params.rotation_matrix.T + params.translation[None, :]


def project_landmarks(params: ShapeParams, rig: FaceRig, center: np.ndarray, strict: bool = False) -> np.ndarray:
    verts = landmark_vertices(params.identity, params.expression, rig, strict=strict)
    projected = project_points(camera_points(params, verts), params.focal, center)
    if params.displacements.shape != projected.shape:
        raise ValueError(f"Displacements {params.displacements.shape} do not match {projected.shape} landmarks")
    return projected + params.displacements


def project_mesh(params: ShapeParams, rig: FaceRig, center: np.ndarray, strict: bool = False) -> np.ndarray:
    verts = shape_vertices(params.identity, params.expression, rig, strict=strict)
    return project_points(camera_points(params, verts), params.focal, center)


def project_bbox(params: ShapeParams, rig: FaceRig, center: np.ndarray, margin: float = 0.2) -> BoundingBox:
    """Bound of the projected mesh, at least one pixel on each side, grown by margin about its centre."""
    projected = project_mesh(params, rig, center)
    lo = projected.min(axis=0)
    hi = projected.max(axis=0)
    mid = (lo + hi) / 2.0
    extent = np.maximum(hi - lo, 1.0)
    corner = mid - extent / 2.0
    return BoundingBox(float(corner[0]), float(corner[1]), float(extent[0]), float(extent[1])).expanded(margin)


def inter_ocular_distance(landmarks: np.ndarray, rig: FaceRig) -> float:
    left, right = rig.eye_corners
    return float(np.linalg.norm(landmarks[left] - landmarks[right]))


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


@dataclass
class LandmarkJacobian:
    """Blocks of d(landmarks)/d(parameters), each with 2m rows ordered (x0, y0, x1, y1, ...).

    Rotation is the left tangent increment R <- exp([w]x) R.
    """

    rotation: np.ndarray
    translation: np.ndarray
    expression: np.ndarray
    identity: np.ndarray
    focal: np.ndarray


def landmark_jacobian(params: ShapeParams, rig: FaceRig, center: np.ndarray) -> LandmarkJacobian:
    x = np.clip(params.expression, 0.0, 1.0)
    rows = rig.landmark_rows
    core = rig.core_tensor[rows]
    m = rig.n_landmarks
    rot = params.rotation_matrix

    contracted = core[..., 0] + core[..., 1:] @ params.identity
    verts = (contracted[:, 0] + contracted[:, 1:] @ x).reshape(m, 3)
    rotated = verts @ rot.T
    cam = rotated + params.translation[None, :]
    depth = cam[:, 2]
    bad = np.flatnonzero(~(depth > DEPTH_EPSILON))
    if bad.size:
        raise ProjectionError(int(bad[0]), float(depth[bad[0]]))

    f = params.focal
    inv_z = 1.0 / depth
    # d(p)/d(X) per landmark, (m, 2, 3)
    dp_dX = np.zeros((m, 2, 3))
    dp_dX[:, 0, 0] = f * inv_z
    dp_dX[:, 1, 1] = f * inv_z
    dp_dX[:, 0, 2] = -f * cam[:, 0] * inv_z**2
    dp_dX[:, 1, 2] = -f * cam[:, 1] * inv_z**2

    dX_dw = np.stack([-skew(v) for v in rotated])
    d_rotation = np.einsum("mij,mjk->mik", dp_dX, dX_dw).reshape(2 * m, 3)
    d_translation = dp_dX.reshape(2 * m, 3)

    basis = contracted[:, 1:].reshape(m, 3, -1)
    dX_dx = np.einsum("ij,mjk->mik", rot, basis)
    d_expression = np.einsum("mij,mjk->mik", dp_dX, dX_dx).reshape(2 * m, -1)

    weights = np.concatenate([[1.0], x])
    dv_du = np.einsum("rkj,k->rj", core[..., 1:], weights).reshape(m, 3, -1)
    dX_du = np.einsum("ij,mjk->mik", rot, dv_du)
    d_identity = np.einsum("mij,mjk->mik", dp_dX, dX_du).reshape(2 * m, -1)

    d_focal = (cam[:, :2] * inv_z[:, None]).reshape(2 * m)
    return LandmarkJacobian(d_rotation, d_translation, d_expression, d_identity, d_focal)


def grid_triangles(rows: int, cols: int) -> np.ndarray:
    tris = []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a = r * cols + c
            b = a + 1
            d = a + cols
            e = d + 1
            tris.append((a, d, b))
            tris.append((b, d, e))
    return np.asarray(tris, dtype=np.int64)


def make_toy_rig(
    n_expressions: int = 46,
    n_identity: int = 50,
    n_landmarks: int = 73,
    grid: int = 15,
    seed: int = 0,
) -> FaceRig:
    """
    Procedural rig: a domed grid with a nose bump, smooth cosine identity fields, localized expression bumps and a
    small identity/expression interaction. Units are metres-ish (face about 0.15 x 0.18).
    """
    if grid < 4:
        raise ValueError("Toy rig grid must be at least 4x4")
    interior = (grid - 2) ** 2
    if n_landmarks < 3 or n_landmarks > interior:
        raise ValueError(f"n_landmarks must lie in [3, {interior}] for a {grid}x{grid} grid")
    rng = np.random.default_rng(seed)

    a, b = np.meshgrid(np.linspace(-1.0, 1.0, grid), np.linspace(-1.0, 1.0, grid))
    a = a.reshape(-1)
    b = b.reshape(-1)
    vertex_count = a.size
    z = -0.04 * np.exp(-(a**2 + b**2)) - 0.02 * np.exp(-(a**2 + (b - 0.1) ** 2) / 0.05)
    neutral = np.stack([0.075 * a, 0.09 * b, z], axis=1)

    core = np.zeros((3 * vertex_count, n_expressions + 1, n_identity + 1))
    core[:, 0, 0] = neutral.reshape(-1)

    for j in range(n_identity):
        fa, fb = rng.integers(1, 4, size=2)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=2)
        field_ = np.cos(fa * np.pi * a / 2.0 + phase[0]) * np.cos(fb * np.pi * b / 2.0 + phase[1])
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        core[:, 0, 1 + j] = (0.004 * field_[:, None] * direction[None, :]).reshape(-1)

    for k in range(n_expressions):
        center = rng.uniform(-0.8, 0.8, size=2)
        bump = np.exp(-((a - center[0]) ** 2 + (b - center[1]) ** 2) / (2.0 * 0.3**2))
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        delta = (0.01 * bump[:, None] * direction[None, :]).reshape(-1)
        core[:, 1 + k, 0] = delta
        core[:, 1 + k, 1:] = 0.05 * delta[:, None] * rng.normal(size=n_identity)[None, :]

    interior_ids = np.flatnonzero((np.abs(a) < 0.999) & (np.abs(b) < 0.999))
    eyes = []
    for target in ((-0.6, -0.3), (0.6, -0.3)):
        dist = (a[interior_ids] - target[0]) ** 2 + (b[interior_ids] - target[1]) ** 2
        eyes.append(int(interior_ids[np.argmin(dist)]))
    rest = np.setdiff1d(interior_ids, eyes)
    chosen = rng.choice(rest, size=n_landmarks - 2, replace=False)
    indices = np.concatenate([eyes, np.sort(chosen)]).astype(np.int64)

    xy = neutral[indices, :2]
    lo = xy.min(axis=0)
    span = np.maximum(xy.max(axis=0) - lo, 1e-12)
    mean_landmarks = (xy - lo) / span

    return FaceRig(
        core_tensor=core,
        mean_landmarks=mean_landmarks,
        landmark_indices=indices,
        triangles=grid_triangles(grid, grid),
        eye_corners=(0, 1),
    )


def default_focal(image_width: int) -> float:
    return float(image_width)


def image_center(width: int, height: Optional[int] = None) -> np.ndarray:
    return np.array([width / 2.0, (height if height is not None else width) / 2.0])
