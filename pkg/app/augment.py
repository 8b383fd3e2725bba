from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .facemodel import FaceRig, project_bbox, project_landmarks
from .maskrefine import luma
from .models import BoundingBox, ShapeParams, ShapeVector
from .regressor import TrainingSample
from .synth import SyntheticSample

logger = logging.getLogger(__name__)

GROUPS = ("expression", "rotation", "translation", "identity", "focal")


@dataclass(frozen=True)
class PerturbRanges:
    rotation: float = 0.15  # radians
    translation: float = 0.05  # fraction of face depth
    expression: float = 0.3
    identity: float = 0.5
    focal: float = 0.15  # relative
    expression_count: int = 15
    other_count: int = 5

    def __post_init__(self) -> None:
        if min(self.rotation, self.translation, self.expression, self.identity, self.focal) < 0.0:
            raise ValueError("Perturbation half-widths must be non-negative")
        if self.expression_count < 0 or self.other_count < 0:
            raise ValueError("Perturbation counts must be non-negative")
        if self.focal >= 1.0:
            raise ValueError("Relative focal perturbation must stay below 1")

    def count(self, group: str) -> int:
        return self.expression_count if group == "expression" else self.other_count

    @property
    def total(self) -> int:
        return sum(self.count(group) for group in GROUPS)


def augmented_count(inputs: int, ranges: PerturbRanges) -> int:
    return inputs * ranges.total


@dataclass
class PerturbedShape:
    initial: ShapeVector
    target: ShapeVector
    identity: np.ndarray
    focal: float
    group: str


def _retargeted(gt: ShapeParams, identity: np.ndarray, focal: float, rig: FaceRig, center: np.ndarray) -> ShapeVector:
    """Same (R, t, x); D absorbs the landmark shift caused by the changed identity or focal length."""
    landmarks = project_landmarks(gt, rig, center)
    moved = gt.with_updates(identity=identity, focal=focal, displacements=np.zeros_like(gt.displacements))
    target = gt.to_vector()
    target.displacements = landmarks - project_landmarks(moved, rig, center)
    return target


def perturb_shape(
    gt: ShapeParams,
    ranges: PerturbRanges,
    rng: np.random.Generator,
    rig: Optional[FaceRig] = None,
    center: Optional[np.ndarray] = None,
) -> List[PerturbedShape]:
    """
    One parameter group per variant: expression_count expression draws, then other_count draws each for rotation,
    translation, identity and focal. Without a rig the identity/focal targets stay the ground-truth vector.
    """
    if np.any(gt.expression < 0.0) or np.any(gt.expression > 1.0):
        raise ValueError("Ground-truth expression coefficients must lie in [0, 1]")
    base = gt.to_vector()
    out: List[PerturbedShape] = []
    for group in GROUPS:
        for _ in range(ranges.count(group)):
            initial = base.copy()
            identity = gt.identity.copy()
            focal = gt.focal
            target = base.copy()
            if group == "expression":
                delta = rng.uniform(-ranges.expression, ranges.expression, size=initial.expression.shape)
                initial.expression = np.clip(initial.expression + delta, 0.0, 1.0)
            elif group == "rotation":
                delta = rng.uniform(-ranges.rotation, ranges.rotation, size=3)
                rotation = Rotation.from_rotvec(delta) * Rotation.from_quat(gt.rotation)
                initial.rotation = rotation.as_rotvec()
            elif group == "translation":
                scale = ranges.translation * float(gt.translation[2])
                initial.translation = initial.translation + rng.uniform(-scale, scale, size=3)
            elif group == "identity":
                identity = identity + rng.uniform(-ranges.identity, ranges.identity, size=identity.shape)
            else:
                focal = focal * (1.0 + rng.uniform(-ranges.focal, ranges.focal))
            if group in ("identity", "focal") and rig is not None and center is not None:
                target = _retargeted(gt, identity, focal, rig, center)
            out.append(PerturbedShape(initial=initial, target=target, identity=identity, focal=focal, group=group))
    return out


def paint_rectangle(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    rect: Tuple[int, int, int, int],
    color,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Fill half-open (x0, y0, x1, y1) with color; the mask becomes non-face there."""
    image = np.array(image, dtype=np.float64)
    x0, y0, x1, y1 = rect
    height, width = image.shape[:2]
    x0, x1 = max(0, x0), min(width, x1)
    y0, y1 = max(0, y0), min(height, y1)
    out_mask = None if mask is None else np.array(mask, dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return image, out_mask
    image[y0:y1, x0:x1] = color
    if out_mask is not None:
        out_mask[y0:y1, x0:x1] = False
    return image, out_mask


def occlusion_rect_segmentation(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    min_fraction: float = 0.1,
    max_fraction: float = 0.6,
) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int, int, int]]:
    """A uniformly coloured rectangle with sides in [min_fraction, max_fraction] of the image sides."""
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0:
        raise ValueError("Cannot occlude an empty image")
    height, width = image.shape[:2]
    rect_w = int(round(rng.uniform(min_fraction, max_fraction) * width))
    rect_h = int(round(rng.uniform(min_fraction, max_fraction) * height))
    x0 = int(rng.integers(0, width - rect_w + 1))
    y0 = int(rng.integers(0, height - rect_h + 1))
    color = rng.uniform(0.0, 255.0, size=image.shape[2]) if image.ndim == 3 else rng.uniform(0.0, 255.0)
    rect = (x0, y0, x0 + rect_w, y0 + rect_h)
    painted, out_mask = paint_rectangle(image, mask, rect, color)
    return painted, out_mask, rect


def coverage_rectangle(bbox: BoundingBox, center: np.ndarray, fractions: Tuple[float, float]) -> BoundingBox:
    width = fractions[0] * bbox.width
    height = fractions[1] * bbox.height
    return BoundingBox(float(center[0]) - width / 2.0, float(center[1]) - height / 2.0, width, height)


def occlusion_crop_regression(
    sample: TrainingSample,
    rng: np.random.Generator,
    rig: FaceRig,
    max_coverage: float = 0.8,
) -> TrainingSample:
    """Zero image and mask under a box centred ~N(face centre, bbox/4) with sides in (0, max_coverage] of the bbox."""
    gt = ShapeParams.from_vector(sample.target, sample.identity, sample.focal)
    bbox = project_bbox(gt, rig, sample.center, margin=0.0)
    center = rng.normal(bbox.center, np.array([bbox.width, bbox.height]) / 4.0)
    fractions = max_coverage * (1.0 - rng.uniform(0.0, 1.0, size=2))
    box = coverage_rectangle(bbox, center, (float(fractions[0]), float(fractions[1])))
    x0 = int(math.floor(box.x + 0.5))
    y0 = int(math.floor(box.y + 0.5))
    x1 = int(math.floor(box.x + box.width + 0.5))
    y1 = int(math.floor(box.y + box.height + 0.5))
    image, mask = paint_rectangle(sample.image, sample.mask, (x0, y0, x1, y1), 0.0)
    return TrainingSample(
        image=image,
        mask=mask,
        initial=sample.initial.copy(),
        target=sample.target.copy(),
        identity=np.array(sample.identity),
        focal=sample.focal,
    )


@dataclass(frozen=True)
class Similarity:
    """out = scale * R(angle) * in + (tx, ty), in (x, y) pixel coordinates."""

    scale: float = 1.0
    angle: float = 0.0
    tx: float = 0.0
    ty: float = 0.0

    def input_coordinates(self) -> Tuple[np.ndarray, np.ndarray]:
        """(matrix, offset) mapping output (row, col) to input (row, col) for ndimage.affine_transform."""
        if self.scale <= 0.0:
            raise ValueError(f"Similarity scale must be positive, got {self.scale}")
        c, s = math.cos(self.angle), math.sin(self.angle)
        inverse = np.array([[c, -s], [s, c]]) / self.scale
        offset = -inverse @ np.array([self.ty, self.tx])
        return inverse, offset


def warp(image: np.ndarray, transform: Similarity, shape: Tuple[int, int], order: int = 1, cval: float = 0.0, mode: str = "constant") -> np.ndarray:
    matrix, offset = transform.input_coordinates()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return ndimage.affine_transform(image, matrix, offset, output_shape=shape, order=order, mode=mode, cval=cval)
    return np.stack(
        [
            ndimage.affine_transform(image[..., c], matrix, offset, output_shape=shape, order=order, mode=mode, cval=cval)
            for c in range(image.shape[2])
        ],
        axis=2,
    )


def random_similarity(
    rng: np.random.Generator,
    fg_shape: Tuple[int, int],
    bg_shape: Tuple[int, int],
    scale_range: Tuple[float, float] = (0.5, 1.2),
    max_angle: float = math.radians(30.0),
) -> Similarity:
    scale = rng.uniform(*scale_range)
    angle = rng.uniform(-max_angle, max_angle)
    target = np.array([rng.uniform(0.0, bg_shape[1]), rng.uniform(0.0, bg_shape[0])])
    fg_center = np.array([fg_shape[1] / 2.0, fg_shape[0] / 2.0])
    c, s = math.cos(angle), math.sin(angle)
    moved = scale * np.array([c * fg_center[0] - s * fg_center[1], s * fg_center[0] + c * fg_center[1]])
    tx, ty = target - moved
    return Similarity(scale=scale, angle=angle, tx=float(tx), ty=float(ty))


def composite(
    foreground: np.ndarray,
    alpha: np.ndarray,
    background: np.ndarray,
    mask: np.ndarray,
    transform: Optional[Similarity] = None,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Over-composite a warped occluder; face pixels under alpha > 0.5 become non-face."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0.0) or np.any(alpha > 1.0):
        raise ValueError("Alpha must lie in [0, 1]")
    background = np.asarray(background, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    shape = background.shape[:2]
    if transform is None:
        transform = random_similarity(rng or np.random.default_rng(), alpha.shape[:2], shape)
    warped_alpha = np.clip(warp(alpha, transform, shape), 0.0, 1.0)
    if not np.any(warped_alpha > 0.0):
        logger.warning("Occluder lands outside the image; passing the sample through")
        return background.copy(), mask.copy()
    warped_fg = warp(foreground, transform, shape)
    if background.ndim == 3 and warped_fg.ndim == 2:
        warped_fg = np.repeat(warped_fg[..., None], background.shape[2], axis=2)
    elif background.ndim == 2 and warped_fg.ndim == 3:
        warped_fg = luma(warped_fg)
    weight = warped_alpha[..., None] if background.ndim == 3 else warped_alpha
    image = weight * warped_fg + (1.0 - weight) * background
    return image, mask & ~(warped_alpha > 0.5)


def negative_samples(
    pool: Sequence[np.ndarray],
    count: int,
    rng: np.random.Generator,
    max_shift: float = 0.1,
    scale_range: Tuple[float, float] = (0.8, 1.25),
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Randomly translated and scaled copies of face-free images, each with an all non-face mask."""
    if not pool:
        raise ValueError("Negative sample pool is empty")
    out = []
    for _ in range(count):
        source = np.asarray(pool[int(rng.integers(len(pool)))], dtype=np.float64)
        height, width = source.shape[:2]
        scale = rng.uniform(*scale_range)
        shift = rng.uniform(-max_shift, max_shift, size=2) * np.array([width, height])
        center = np.array([width / 2.0, height / 2.0])
        tx, ty = center + shift - scale * center
        image = warp(source, Similarity(scale=scale, tx=float(tx), ty=float(ty)), (height, width), mode="reflect")
        out.append((image, np.zeros((height, width), dtype=bool)))
    return out


def perturb_image(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    max_shift: float = 0.1,
    max_angle: float = math.radians(15.0),
    scale_range: Tuple[float, float] = (0.9, 1.1),
) -> Tuple[np.ndarray, np.ndarray]:
    """Random translation, rotation and scaling about the image centre, applied to image and mask alike."""
    height, width = np.asarray(image).shape[:2]
    scale = rng.uniform(*scale_range)
    angle = rng.uniform(-max_angle, max_angle)
    shift = rng.uniform(-max_shift, max_shift, size=2) * np.array([width, height])
    center = np.array([width / 2.0, height / 2.0])
    c, s = math.cos(angle), math.sin(angle)
    moved = scale * np.array([c * center[0] - s * center[1], s * center[0] + c * center[1]])
    tx, ty = center + shift - moved
    transform = Similarity(scale=scale, angle=angle, tx=float(tx), ty=float(ty))
    warped = warp(image, transform, (height, width), mode="nearest")
    warped_mask = warp(np.asarray(mask, dtype=np.float64), transform, (height, width), order=0) > 0.5
    return warped, warped_mask


def segmentation_augment(
    image: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator,
    occluders: Optional[Sequence[Tuple[np.ndarray, np.ndarray]]] = None,
) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Perturbed, rectangle-occluded and (with an occluder pool) composited copies of one face sample."""
    out = [perturb_image(image, mask, rng)]
    painted, painted_mask, _ = occlusion_rect_segmentation(image, mask, rng)
    out.append((painted, painted_mask))
    if occluders:
        fg, alpha = occluders[int(rng.integers(len(occluders)))]
        out.append(composite(fg, alpha, image, mask, rng=rng))
    return out


def build_regression_samples(
    samples: Sequence[SyntheticSample],
    rig: FaceRig,
    ranges: Optional[PerturbRanges] = None,
    rng: Optional[np.random.Generator] = None,
    masked: bool = True,
    occlusion: bool = True,
) -> List[TrainingSample]:
    """
    The perturbation set for each face, plus one occlusion-cropped copy per perturbed sample when occlusion is on.
    Unmasked training uses all-face masks and no occlusion copies.
    """
    ranges = ranges or PerturbRanges()
    rng = rng or np.random.default_rng(0)
    seeds = rng.integers(0, 2**31 - 1, size=len(samples))
    out: List[TrainingSample] = []
    for sample, seed in zip(samples, seeds):
        sample_rng = np.random.default_rng(int(seed))
        center = sample.center
        mask = sample.mask if masked else np.ones_like(sample.mask, dtype=bool)
        for variant in perturb_shape(sample.params, ranges, sample_rng, rig, center):
            training = TrainingSample(
                image=sample.image,
                mask=mask,
                initial=variant.initial,
                target=variant.target,
                identity=variant.identity,
                focal=variant.focal,
            )
            out.append(training)
            if masked and occlusion:
                out.append(occlusion_crop_regression(training, sample_rng, rig))
    logger.info("Built %d regression samples from %d faces (masked=%s)", len(out), len(samples), masked)
    return out
