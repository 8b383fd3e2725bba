from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .maxflow import grid_maxflow

logger = logging.getLogger(__name__)

FOUR_CONNECTED = ((0, 1), (1, 0))
DIAGONALS = ((1, 1), (1, -1))


@dataclass
class PairwiseTerm:
    dy: int
    dx: int
    # weights[i, j] couples (i, j) with (i + dy, j + dx); zero where the neighbour is off-grid
    weights: np.ndarray


@dataclass
class GridEnergy:
    sink_cost: np.ndarray  # cost of labelling a pixel face
    source_cost: np.ndarray  # cost of labelling a pixel non-face
    pairwise: List[PairwiseTerm] = field(default_factory=list)
    lam: float = 10.0
    sigma: float = 5.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.sink_cost.shape

    @property
    def connectivity(self) -> int:
        return 8 if any(term.dy != 0 and term.dx != 0 for term in self.pairwise) else 4


def _validate_probability(prob: np.ndarray) -> np.ndarray:
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 2 or prob.shape[0] == 0 or prob.shape[1] == 0:
        raise ValueError(f"Probability map must be a non-empty 2-D grid, got {prob.shape}")
    if not np.all(np.isfinite(prob)) or prob.min() < 0.0 or prob.max() > 1.0:
        raise ValueError("Probability map values must lie in [0, 1]")
    return prob


def luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.ndim == 3 and image.shape[2] >= 3:
        return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]
    raise ValueError(f"Expected grayscale or RGB image, got {image.shape}")


def _shifted_weights(intensity: np.ndarray, dy: int, dx: int, sigma: float) -> np.ndarray:
    height, width = intensity.shape
    weights = np.zeros((height, width))
    r0, r1 = 0, height - dy
    c0, c1 = max(0, -dx), width - max(0, dx)
    if r1 <= r0 or c1 <= c0:
        return weights
    here = intensity[r0:r1, c0:c1]
    there = intensity[r0 + dy : r1 + dy, c0 + dx : c1 + dx]
    weights[r0:r1, c0:c1] = np.exp(-((here - there) ** 2) / (2.0 * sigma))
    return weights


def build_energy(
    prob: np.ndarray,
    intensity: np.ndarray,
    lam: float = 10.0,
    sigma: float = 5.0,
    epsilon: float = 1e-6,
    connectivity: int = 4,
) -> GridEnergy:
    prob = _validate_probability(prob)
    intensity = luma(intensity)
    if intensity.shape != prob.shape:
        raise ValueError(f"Intensity {intensity.shape} and probability {prob.shape} dimensions differ")
    if lam < 0.0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if not sigma > 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if connectivity not in (4, 8):
        raise ValueError(f"Connectivity must be 4 or 8, got {connectivity}")

    sink_cost = -np.log(np.clip(prob, epsilon, 1.0 - epsilon))
    source_cost = -np.log(np.clip(1.0 - prob, epsilon, 1.0 - epsilon))
    offsets = FOUR_CONNECTED + (DIAGONALS if connectivity == 8 else ())
    pairwise = []
    for dy, dx in offsets:
        weights = _shifted_weights(intensity, dy, dx, sigma)
        if dy != 0 and dx != 0:
            weights /= math.sqrt(2.0)
        pairwise.append(PairwiseTerm(dy, dx, weights))
    return GridEnergy(sink_cost=sink_cost, source_cost=source_cost, pairwise=pairwise, lam=float(lam), sigma=sigma)


def min_cut(energy: GridEnergy) -> np.ndarray:
    """Exact minimiser of the energy; True marks face. Ties resolve to face."""
    pairwise = [(term.dy, term.dx, energy.lam * term.weights) for term in energy.pairwise]
    # a face pixel sits on the sink side and pays the source->pixel edge, i.e. sink_cost
    source_side, flow = grid_maxflow(
        energy.sink_cost, energy.source_cost, pairwise, connectivity=energy.connectivity
    )
    logger.debug("min_cut %sx%s flow=%.6f", energy.shape[0], energy.shape[1], flow)
    return ~source_side


def energy_of(labeling: np.ndarray, energy: GridEnergy) -> float:
    face = np.asarray(labeling, dtype=bool)
    if face.shape != energy.shape:
        raise ValueError(f"Labeling {face.shape} does not match energy {energy.shape}")
    total = float(np.sum(np.where(face, energy.sink_cost, energy.source_cost)))
    height, width = face.shape
    for term in energy.pairwise:
        dy, dx = term.dy, term.dx
        r1 = height - dy
        c0, c1 = max(0, -dx), width - max(0, dx)
        if r1 <= 0 or c1 <= c0:
            continue
        differs = face[0:r1, c0:c1] != face[dy : r1 + dy, c0 + dx : c1 + dx]
        total += energy.lam * float(np.sum(term.weights[0:r1, c0:c1][differs]))
    return total


def _bilinear_sample_positions(source: int, target: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = source / target
    pos = np.clip((np.arange(target) + 0.5) * scale - 0.5, 0.0, source - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, source - 1)
    return lo, hi, pos - lo


def resample_bilinear(field_: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Centre-aligned bilinear resampling of a 2-D field."""
    field_ = np.asarray(field_, dtype=np.float64)
    rlo, rhi, rw = _bilinear_sample_positions(field_.shape[0], target_h)
    clo, chi, cw = _bilinear_sample_positions(field_.shape[1], target_w)
    top = field_[rlo][:, clo] * (1.0 - cw) + field_[rlo][:, chi] * cw
    bottom = field_[rhi][:, clo] * (1.0 - cw) + field_[rhi][:, chi] * cw
    return top * (1.0 - rw[:, None]) + bottom * rw[:, None]


def upsample_mask(mask: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    if target_w < width or target_h < height:
        raise ValueError(f"Target {target_w}x{target_h} is smaller than source {width}x{height}")
    if (target_w, target_h) == (width, height):
        return mask.copy()
    return resample_bilinear(mask.astype(np.float64), target_w, target_h) >= 0.5


def resize_mask(mask: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Any-direction resize: bilinear when growing, nearest when shrinking an axis."""
    mask = np.asarray(mask, dtype=bool)
    height, width = mask.shape
    if target_w >= width and target_h >= height:
        return upsample_mask(mask, target_w, target_h)
    rows = np.minimum(((np.arange(target_h) + 0.5) * height / target_h).astype(np.int64), height - 1)
    cols = np.minimum(((np.arange(target_w) + 0.5) * width / target_w).astype(np.int64), width - 1)
    return mask[rows][:, cols]


def refine(
    prob: np.ndarray,
    intensity: np.ndarray,
    lam: float = 10.0,
    sigma: float = 5.0,
    epsilon: float = 1e-6,
    connectivity: int = 4,
    target_size: Optional[tuple[int, int]] = None,
) -> np.ndarray:
    energy = build_energy(prob, intensity, lam=lam, sigma=sigma, epsilon=epsilon, connectivity=connectivity)
    mask = min_cut(energy)
    if target_size is not None:
        mask = upsample_mask(mask, target_size[0], target_size[1])
    return mask


def iou(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted = np.asarray(predicted, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if predicted.shape != truth.shape:
        raise ValueError(f"Mask shapes differ: {predicted.shape} vs {truth.shape}")
    union = np.logical_or(predicted, truth).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(predicted, truth).sum() / union)
