from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .facemodel import FaceRig, project_landmarks
from .models import ShapeParams, ShapeVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeaturePointSet:
    """Points stored as (triangle, barycentric weights) over a triangulation of the mean landmarks."""

    points: np.ndarray  # (P, 2) unit-square samples
    triangle_ids: np.ndarray  # (P,)
    barycentric: np.ndarray  # (P, 3), rows sum to 1
    triangles: np.ndarray  # (T, 3) landmark indices

    def __len__(self) -> int:
        return int(self.points.shape[0])


def triangulate(landmarks: np.ndarray) -> Delaunay:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if landmarks.shape[0] < 3:
        raise ValueError("Need at least 3 landmarks to triangulate")
    try:
        tri = Delaunay(landmarks)
    except QhullError as exc:
        raise ValueError(f"Degenerate landmark triangulation: {exc}") from exc
    if len(tri.simplices) == 0:
        raise ValueError("Degenerate landmark triangulation: no triangles")
    return tri


def encode_points(points: np.ndarray, tri: Delaunay) -> tuple[np.ndarray, np.ndarray]:
    """
    Barycentric encoding. Points outside the hull take the triangle with the nearest centroid and keep its
    (extrapolated) weights, so decoding against the same landmarks is still exact.
    """
    points = np.asarray(points, dtype=np.float64)
    ids = tri.find_simplex(points)
    outside = ids < 0
    if np.any(outside):
        centroids = tri.points[tri.simplices].mean(axis=1)
        d2 = ((points[outside, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        ids[outside] = d2.argmin(axis=1)
    transform = tri.transform[ids]
    partial = np.einsum("pij,pj->pi", transform[:, :2, :], points - transform[:, 2, :])
    bary = np.column_stack([partial, 1.0 - partial.sum(axis=1)])
    return ids.astype(np.int64), bary


def sample_feature_points(
    mean_landmarks: np.ndarray,
    count: int,
    rng: np.random.Generator,
    sigma: float = 0.25,
) -> FeaturePointSet:
    tri = triangulate(mean_landmarks)
    collected = np.empty((0, 2))
    while collected.shape[0] < count:
        draw = rng.normal(0.5, sigma, size=(2 * count, 2))
        inside = np.all((draw >= 0.0) & (draw <= 1.0), axis=1)
        collected = np.vstack([collected, draw[inside]])
    points = collected[:count]
    ids, bary = encode_points(points, tri)
    return FeaturePointSet(points=points, triangle_ids=ids, barycentric=bary, triangles=tri.simplices.astype(np.int64))


def decode_points(fps: FeaturePointSet, landmarks: np.ndarray) -> np.ndarray:
    corners = np.asarray(landmarks, dtype=np.float64)[fps.triangles[fps.triangle_ids]]  # (P, 3, 2)
    return np.einsum("pk,pkd->pd", fps.barycentric, corners)


def current_landmarks(
    shape: ShapeVector, rig: FaceRig, identity: np.ndarray, focal: float, center: np.ndarray
) -> np.ndarray:
    clamped = shape.copy()
    clamped.expression = np.clip(clamped.expression, 0.0, 1.0)
    params = ShapeParams.from_vector(clamped, identity, focal)
    return project_landmarks(params, rig, center)


def localize_features(
    shape: ShapeVector,
    fps: FeaturePointSet,
    rig: FaceRig,
    identity: np.ndarray,
    focal: float,
    center: np.ndarray,
) -> np.ndarray:
    return decode_points(fps, current_landmarks(shape, rig, identity, focal, center))


def masked_image(image: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if mask is None:
        return image
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != image.shape[:2]:
        raise ValueError(f"Mask {mask.shape} does not match image {image.shape[:2]}")
    return np.where(mask, image, 0.0)


def pixel_indices(coords: np.ndarray, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    cols = np.clip(np.rint(coords[:, 0]).astype(np.int64), 0, width - 1)
    rows = np.clip(np.rint(coords[:, 1]).astype(np.int64), 0, height - 1)
    return rows, cols


def extract_features(image: np.ndarray, mask: Optional[np.ndarray], coords: np.ndarray) -> np.ndarray:
    """Nearest-pixel intensities at (x, y) coords, border-clamped; off-face pixels read 0."""
    working = masked_image(image, mask)
    rows, cols = pixel_indices(np.asarray(coords, dtype=np.float64), working.shape[0], working.shape[1])
    return working[rows, cols]
