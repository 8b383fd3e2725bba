from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .facemodel import FaceRig, image_center
from .features import (
    FeaturePointSet,
    current_landmarks,
    decode_points,
    extract_features,
    pixel_indices,
    sample_feature_points,
)
from .models import ProjectionError, RegressionResult, ShapeVector

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CascadeConfig:
    stages: int = 10
    ferns: int = 300
    depth: int = 5
    shrinkage: float = 1000.0
    feature_points: int = 400
    feature_sigma: float = 0.25
    exclude_offface_pairs: bool = False
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if self.stages < 1 or self.ferns < 1 or self.depth < 1:
            raise ValueError("stages, ferns and depth must all be positive")
        if self.feature_points < 2:
            raise ValueError("Need at least two feature points")
        if self.shrinkage < 0.0:
            raise ValueError("Shrinkage must be non-negative")


@dataclass
class Fern:
    pairs: np.ndarray  # (F, 2) feature indices
    thresholds: np.ndarray  # (F,)
    outputs: np.ndarray  # (2**F, D)

    @property
    def depth(self) -> int:
        return int(self.pairs.shape[0])

    def bins(self, features: np.ndarray) -> np.ndarray:
        """Bin index per row of an (N, P) feature matrix (or a single (P,) vector)."""
        features = np.atleast_2d(features)
        diff = features[:, self.pairs[:, 0]] - features[:, self.pairs[:, 1]]
        bits = (diff > self.thresholds[None, :]).astype(np.int64)
        return (bits << np.arange(self.depth)[None, :]).sum(axis=1)


@dataclass
class Stage:
    points: FeaturePointSet
    ferns: List[Fern]


@dataclass
class CascadeModel:
    stages: List[Stage]
    mean_landmarks: np.ndarray
    config: CascadeConfig
    n_expressions: int
    n_landmarks: int
    training_errors: List[float] = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return ShapeVector.size(self.n_expressions, self.n_landmarks)


@dataclass
class TrainingSample:
    image: np.ndarray  # grayscale
    mask: np.ndarray
    initial: ShapeVector
    target: ShapeVector
    identity: np.ndarray
    focal: float

    def __post_init__(self) -> None:
        if np.asarray(self.mask).shape != np.asarray(self.image).shape[:2]:
            raise ValueError(f"Mask {np.asarray(self.mask).shape} does not match image {np.asarray(self.image).shape}")

    @property
    def center(self) -> np.ndarray:
        height, width = np.asarray(self.image).shape[:2]
        return image_center(width, height)


def block_slices(n_expressions: int, n_landmarks: int) -> List[slice]:
    return [
        slice(0, 3),
        slice(3, 6),
        slice(6, 6 + n_expressions),
        slice(6 + n_expressions, 6 + n_expressions + 2 * n_landmarks),
    ]


def block_scales(residuals: np.ndarray, n_expressions: int, n_landmarks: int) -> np.ndarray:
    """Per-component divisor: the standard deviation of each parameter block."""
    scales = np.ones(residuals.shape[1])
    for block in block_slices(n_expressions, n_landmarks):
        if block.stop <= block.start:
            continue
        std = float(residuals[:, block].std())
        scales[block] = std if std > 1e-12 else 1.0
    return scales


def pair_correlations(
    features: np.ndarray,
    feature_cov: np.ndarray,
    target: np.ndarray,
) -> np.ndarray:
    """corr(f_i - f_j, target) for all pairs from the feature covariance; NaN where undefined."""
    centered_y = target - target.mean()
    var_y = float(centered_y @ centered_y) / len(target)
    centered_f = features - features.mean(axis=0)
    cov_fy = centered_f.T @ centered_y / len(target)
    var_f = np.diag(feature_cov)
    denom = var_y * (var_f[:, None] + var_f[None, :] - 2.0 * feature_cov)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = (cov_fy[:, None] - cov_fy[None, :]) / np.sqrt(denom)
    corr[~(denom > 1e-12)] = np.nan
    np.fill_diagonal(corr, np.nan)
    return corr


def _stage_features(
    samples: Sequence[TrainingSample],
    shapes: np.ndarray,
    points: FeaturePointSet,
    rig: FaceRig,
    n_expressions: int,
    n_landmarks: int,
    workers: int,
) -> Tuple[np.ndarray, np.ndarray]:
    def one(i: int) -> Tuple[np.ndarray, np.ndarray]:
        sample = samples[i]
        shape = ShapeVector.from_flat(shapes[i], n_expressions, n_landmarks)
        try:
            landmarks = current_landmarks(shape, rig, sample.identity, sample.focal, sample.center)
        except ProjectionError as exc:
            logger.warning("Training sample %d failed to project (%s); using zero features", i, exc)
            return np.zeros(len(points)), np.zeros(len(points), dtype=bool)
        coords = decode_points(points, landmarks)
        rows, cols = pixel_indices(coords, sample.mask.shape[0], sample.mask.shape[1])
        return extract_features(sample.image, sample.mask, coords), np.asarray(sample.mask)[rows, cols]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(one, range(len(samples))))
    else:
        results = [one(i) for i in range(len(samples))]
    features = np.stack([r[0] for r in results])
    on_face = np.stack([r[1] for r in results])
    return features, on_face


def _train_fern(
    features: np.ndarray,
    feature_cov: np.ndarray,
    residuals: np.ndarray,
    scales: np.ndarray,
    allowed: np.ndarray,
    cfg: CascadeConfig,
    rng: np.random.Generator,
) -> Fern:
    depth = cfg.depth
    pairs = np.zeros((depth, 2), dtype=np.int64)
    thresholds = np.zeros(depth)
    normalized = residuals / scales[None, :]
    for level in range(depth):
        direction = rng.normal(size=residuals.shape[1])
        direction /= np.linalg.norm(direction)
        projection = normalized @ direction
        corr = pair_correlations(features, feature_cov, projection)
        corr[~allowed[:, None] | ~allowed[None, :]] = np.nan
        score = np.abs(corr)
        if np.all(np.isnan(score)):
            logger.warning("No informative feature pair at fern level %d; picking a random pair", level)
            i, j = rng.choice(features.shape[1], size=2, replace=False)
        else:
            i, j = np.unravel_index(np.nanargmax(score), score.shape)
        pairs[level] = (i, j)
        diff = features[:, i] - features[:, j]
        lo, hi = float(diff.min()), float(diff.max())
        thresholds[level] = rng.uniform(lo, hi) if hi > lo else lo

    fern = Fern(pairs=pairs, thresholds=thresholds, outputs=np.zeros((2**depth, residuals.shape[1])))
    bins = fern.bins(features)
    sums = np.zeros_like(fern.outputs)
    np.add.at(sums, bins, residuals)
    counts = np.bincount(bins, minlength=2**depth).astype(np.float64)
    fern.outputs = sums / (counts[:, None] + cfg.shrinkage)
    fern.outputs[counts == 0] = 0.0
    return fern


def train_cascade(
    samples: Sequence[TrainingSample],
    rig: FaceRig,
    cfg: Optional[CascadeConfig] = None,
) -> CascadeModel:
    cfg = cfg or CascadeConfig()
    if len(samples) < 2**cfg.depth:
        raise ValueError(f"Need at least {2**cfg.depth} samples for depth-{cfg.depth} ferns, got {len(samples)}")
    n, m = rig.n_expressions, rig.n_landmarks
    dim = ShapeVector.size(n, m)
    for sample in samples:
        if sample.initial.flatten().shape != (dim,) or sample.target.flatten().shape != (dim,):
            raise ValueError("Sample shape vectors do not match the rig dimensions")

    rng = np.random.default_rng(cfg.seed)
    shapes = np.stack([s.initial.flatten() for s in samples])
    targets = np.stack([s.target.flatten() for s in samples])
    model = CascadeModel(stages=[], mean_landmarks=np.array(rig.mean_landmarks), config=cfg, n_expressions=n, n_landmarks=m)
    initial_error = float(((targets - shapes) ** 2).sum())
    logger.info("Training cascade on %d samples, initial error %.6g", len(samples), initial_error)

    for t in range(cfg.stages):
        points = sample_feature_points(rig.mean_landmarks, cfg.feature_points, rng, cfg.feature_sigma)
        features, on_face = _stage_features(samples, shapes, points, rig, n, m, cfg.workers)
        allowed = np.ones(len(points), dtype=bool)
        if cfg.exclude_offface_pairs:
            allowed = on_face.mean(axis=0) >= 0.5
            if allowed.sum() < 2:
                logger.warning("Stage %d: fewer than two mostly-on-face points; ignoring the exclusion", t)
                allowed[:] = True
        feature_cov = np.cov(features, rowvar=False, bias=True)
        residuals = targets - shapes
        scales = block_scales(residuals, n, m)
        stage_delta = np.zeros_like(shapes)
        ferns = []
        for k in range(cfg.ferns):
            fern = _train_fern(features, feature_cov, residuals, scales, allowed, cfg, rng)
            update = fern.outputs[fern.bins(features)]
            stage_delta += update
            residuals -= update
            ferns.append(fern)
            logger.debug("stage %d fern %d residual %.6g", t, k, float((residuals**2).sum()))
        shapes = shapes + stage_delta
        error = float(((targets - shapes) ** 2).sum())
        model.training_errors.append(error)
        model.stages.append(Stage(points=points, ferns=ferns))
        logger.info("Stage %d/%d training error %.6g", t + 1, cfg.stages, error)
    return model


def regress(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    initial: ShapeVector,
    model: CascadeModel,
    rig: FaceRig,
    identity: np.ndarray,
    focal: float,
    center: Optional[np.ndarray] = None,
) -> RegressionResult:
    image = np.asarray(image, dtype=np.float64)
    if center is None:
        center = image_center(image.shape[1], image.shape[0])
    n, m = model.n_expressions, model.n_landmarks
    shape = initial.flatten()
    if shape.shape != (model.dimension,):
        raise ValueError(f"Initial shape has {shape.shape[0]} entries, model expects {model.dimension}")
    for t, stage in enumerate(model.stages):
        current = ShapeVector.from_flat(shape, n, m)
        try:
            landmarks = current_landmarks(current, rig, identity, focal, center)
        except ProjectionError as exc:
            logger.warning("Regression stopped at stage %d: %s", t, exc)
            return RegressionResult(shape=_clamped(current), failed=True, failed_stage=t)
        features = extract_features(image, mask, decode_points(stage.points, landmarks))
        delta = np.zeros_like(shape)
        for fern in stage.ferns:
            delta += fern.outputs[fern.bins(features)[0]]
        shape = shape + delta
    return RegressionResult(shape=_clamped(ShapeVector.from_flat(shape, n, m)))


def _clamped(shape: ShapeVector) -> ShapeVector:
    out = shape.copy()
    out.expression = np.clip(out.expression, 0.0, 1.0)
    return out
