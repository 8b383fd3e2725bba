from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .facemodel import (
    FaceRig,
    camera_points,
    default_focal,
    image_center,
    project_landmarks,
    project_points,
    shape_vertices,
)
from .models import ProjectionError, ShapeParams

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 128
    pixel_noise: float = 2.0
    max_rotation: float = math.radians(30.0)
    identity_range: float = 2.0
    expression_max: float = 1.0
    depth: float = 0.3
    depth_jitter: float = 0.03
    offset_jitter: float = 0.02
    background: float = 60.0
    background_texture: float = 25.0
    max_retries: int = 20

    def __post_init__(self) -> None:
        if self.image_size < 8:
            raise ValueError(f"image_size must be at least 8, got {self.image_size}")
        if self.pixel_noise < 0.0 or self.depth <= 0.0:
            raise ValueError("pixel_noise must be non-negative and depth positive")


@dataclass
class SyntheticSample:
    image: np.ndarray  # grayscale, [0, 255]
    mask: np.ndarray
    params: ShapeParams
    landmarks: np.ndarray
    seed: int
    rig: Optional[FaceRig] = field(default=None, repr=False)

    @property
    def center(self) -> np.ndarray:
        return image_center(self.image.shape[1], self.image.shape[0])


def facet_albedo(rig: FaceRig) -> np.ndarray:
    """Fixed per-triangle reflectance; alternating bands give the renderer some shape-indexed structure."""
    tris = rig.triangles
    band = (np.arange(len(tris)) // 4) % 3
    return np.array([0.75, 0.95, 0.6])[band]


def render_face(
    params: ShapeParams,
    rig: FaceRig,
    width: int,
    height: int,
    background: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Flat-shaded z-buffer rasterisation. Returns (image in [0, 255], footprint mask)."""
    center = image_center(width, height)
    verts = camera_points(params, shape_vertices(params.identity, params.expression, rig, strict=False))
    screen = project_points(verts, params.focal, center)
    tris = rig.triangles
    albedo = facet_albedo(rig)

    zbuf = np.full((height, width), np.inf)
    image = np.zeros((height, width)) if background is None else np.array(background, dtype=np.float64)
    if image.shape != (height, width):
        raise ValueError(f"Background {image.shape} does not match {(height, width)}")

    edges1 = verts[tris[:, 1]] - verts[tris[:, 0]]
    edges2 = verts[tris[:, 2]] - verts[tris[:, 0]]
    normals = np.cross(edges1, edges2)
    lengths = np.linalg.norm(normals, axis=1)
    facing = np.abs(normals[:, 2]) / np.maximum(lengths, 1e-18)
    shade = 255.0 * albedo * (0.25 + 0.75 * facing)

    for k, (a, b, c) in enumerate(tris):
        p0, p1, p2 = screen[a], screen[b], screen[c]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])
        if abs(area) < 1e-12:
            continue
        lo = np.floor(np.minimum(np.minimum(p0, p1), p2)).astype(int)
        hi = np.ceil(np.maximum(np.maximum(p0, p1), p2)).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], width - 1), min(hi[1], height - 1)
        if x1 < x0 or y1 < y0:
            continue
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        w1 = ((xs - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (ys - p0[1])) / area
        w2 = ((p1[0] - p0[0]) * (ys - p0[1]) - (xs - p0[0]) * (p1[1] - p0[1])) / area
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-9) & (w1 >= -1e-9) & (w2 >= -1e-9)
        if not inside.any():
            continue
        depth = w0 * verts[a, 2] + w1 * verts[b, 2] + w2 * verts[c, 2]
        window = zbuf[y0 : y1 + 1, x0 : x1 + 1]
        closer = inside & (depth < window)
        window[closer] = depth[closer]
        image[y0 : y1 + 1, x0 : x1 + 1][closer] = shade[k]
    return image, np.isfinite(zbuf)


def random_background(width: int, height: int, rng: np.random.Generator, level: float = 60.0, texture: float = 25.0) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(size=(height, width)), sigma=4.0)
    noise /= max(float(noise.std()), 1e-12)
    return np.clip(level + texture * noise, 0.0, 255.0)


def random_shape(rig: FaceRig, cfg: SynthConfig, rng: np.random.Generator, focal: Optional[float] = None) -> ShapeParams:
    angles = rng.uniform(-cfg.max_rotation, cfg.max_rotation, size=3)
    depth = cfg.depth + rng.uniform(-cfg.depth_jitter, cfg.depth_jitter)
    offset = rng.uniform(-cfg.offset_jitter, cfg.offset_jitter, size=2)
    return ShapeParams(
        rotation=Rotation.from_euler("xyz", angles).as_quat(),
        translation=np.array([offset[0], offset[1], depth]),
        expression=rng.uniform(0.0, cfg.expression_max, size=rig.n_expressions),
        displacements=np.zeros((rig.n_landmarks, 2)),
        identity=rng.uniform(-cfg.identity_range, cfg.identity_range, size=rig.n_identity),
        focal=default_focal(cfg.image_size) if focal is None else focal,
    )


def render_sample(
    params: ShapeParams, rig: FaceRig, cfg: SynthConfig, rng: np.random.Generator, seed: int = 0
) -> SyntheticSample:
    size = cfg.image_size
    background = random_background(size, size, rng, cfg.background, cfg.background_texture)
    image, mask = render_face(params, rig, size, size, background)
    if cfg.pixel_noise > 0.0:
        image = np.clip(image + rng.normal(0.0, cfg.pixel_noise, size=image.shape), 0.0, 255.0)
    landmarks = project_landmarks(params, rig, image_center(size, size))
    return SyntheticSample(image=image, mask=mask, params=params, landmarks=landmarks, seed=seed, rig=rig)


def _fits(landmarks: np.ndarray, mask: np.ndarray) -> bool:
    height, width = mask.shape
    if np.any(landmarks < 1.0) or np.any(landmarks[:, 0] > width - 2) or np.any(landmarks[:, 1] > height - 2):
        return False
    return bool(mask.any())


def gen_synthetic_sample(rig: FaceRig, cfg: SynthConfig, seed: int) -> SyntheticSample:
    rng = np.random.default_rng(seed)
    for attempt in range(cfg.max_retries):
        params = random_shape(rig, cfg, rng)
        try:
            sample = render_sample(params, rig, cfg, rng, seed=seed)
        except ProjectionError as exc:
            logger.debug("Seed %d attempt %d: %s", seed, attempt, exc)
            continue
        if _fits(sample.landmarks, sample.mask):
            return sample
        logger.debug("Seed %d attempt %d: face leaves the image, resampling", seed, attempt)
    raise RuntimeError(f"Could not place a face inside the image after {cfg.max_retries} attempts (seed {seed})")


def gen_synthetic_dataset(
    rig: FaceRig,
    count: int,
    cfg: Optional[SynthConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> List[SyntheticSample]:
    """Each sample draws from its own generator, seeded from the master rng, so order does not matter."""
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count}")
    if len(rig.triangles) < 4:
        raise ValueError("Synthetic rendering needs a rig with at least 4 triangles")
    cfg = cfg or SynthConfig()
    rng = rng or np.random.default_rng(0)
    seeds = rng.integers(0, 2**31 - 1, size=count)
    samples = [gen_synthetic_sample(rig, cfg, int(seed)) for seed in seeds]
    logger.info("Generated %d synthetic faces at %dx%d", count, cfg.image_size, cfg.image_size)
    return samples


def gen_sequence(
    rig: FaceRig,
    frames: int,
    cfg: Optional[SynthConfig] = None,
    rng: Optional[np.random.Generator] = None,
    motion: float = 0.35,
) -> List[SyntheticSample]:
    """Smooth head motion and expression drift for one subject; identity and focal stay fixed."""
    cfg = cfg or SynthConfig()
    rng = rng or np.random.default_rng(0)
    identity = rng.uniform(-cfg.identity_range, cfg.identity_range, size=rig.n_identity) * 0.5
    amplitude = rng.uniform(0.3, 1.0, size=3) * cfg.max_rotation * motion
    periods = rng.uniform(60.0, 180.0, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    expr_base = rng.uniform(0.1, 0.5, size=rig.n_expressions)
    expr_amp = rng.uniform(0.0, 0.3, size=rig.n_expressions)
    expr_period = rng.uniform(40.0, 120.0, size=rig.n_expressions)
    seeds = rng.integers(0, 2**31 - 1, size=frames)

    sequence = []
    for t in range(frames):
        angles = amplitude * np.sin(2.0 * np.pi * t / periods + phases)
        expression = np.clip(expr_base + expr_amp * np.sin(2.0 * np.pi * t / expr_period), 0.0, 1.0)
        params = ShapeParams(
            rotation=Rotation.from_euler("xyz", angles).as_quat(),
            translation=np.array([0.0, 0.0, cfg.depth]),
            expression=expression,
            displacements=np.zeros((rig.n_landmarks, 2)),
            identity=identity,
            focal=default_focal(cfg.image_size),
        )
        frame_rng = np.random.default_rng(int(seeds[t]))
        sequence.append(render_sample(params, rig, cfg, frame_rng, seed=int(seeds[t])))
    return sequence


def gen_blob_dataset(
    count: int,
    size: int = 128,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Skin-coloured ellipses over textured cool-toned backgrounds: a desk-scale segmentation task."""
    rng = rng or np.random.default_rng(0)
    images: List[np.ndarray] = []
    masks: List[np.ndarray] = []
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(count):
        background = np.stack(
            [random_background(size, size, rng, level, 30.0) for level in (70.0, 90.0, 120.0)], axis=2
        )
        cy, cx = rng.uniform(0.3, 0.7, size=2) * size
        ay, ax = rng.uniform(0.18, 0.35, size=2) * size
        theta = rng.uniform(0.0, np.pi)
        dy, dx = rows - cy, cols - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        skin = np.array([205.0, 155.0, 125.0]) + rng.uniform(-20.0, 20.0, size=3)
        face = skin[None, None, :] + rng.normal(0.0, 6.0, size=(size, size, 3))
        image = np.where(mask[..., None], face, background)
        images.append(np.clip(image, 0.0, 255.0))
        masks.append(mask)
    return images, masks
