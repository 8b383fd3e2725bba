from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from matplotlib.figure import Figure

from .augment import paint_rectangle
from .facemodel import FaceRig, inter_ocular_distance, project_bbox
from .features import current_landmarks
from .images import PathLike
from .models import BoundingBox
from .regressor import CascadeModel, regress
from .synth import SyntheticSample, SynthConfig, gen_sequence

logger = logging.getLogger(__name__)

DEFAULT_COVERAGES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@dataclass
class SweepResult:
    coverages: List[float]
    errors: Dict[str, List[float]] = field(default_factory=dict)

    def rows(self) -> List[Dict[str, float]]:
        return [
            {"coverage": c, **{variant: values[i] for variant, values in self.errors.items()}}
            for i, c in enumerate(self.coverages)
        ]


def occluder_box(face: BoundingBox, coverage: float) -> Tuple[int, int, int, int]:
    """Box of area coverage x face bbox, same aspect, centred on the lower half of the face."""
    if not 0.0 <= coverage <= 1.0:
        raise ValueError(f"coverage must lie in [0, 1], got {coverage}")
    side = math.sqrt(coverage)
    width = side * face.width
    height = side * face.height
    cx = face.x + face.width / 2.0
    cy = face.y + 0.75 * face.height
    x0 = int(round(cx - width / 2.0))
    y0 = int(round(cy - height / 2.0))
    return x0, y0, x0 + int(round(width)), y0 + int(round(height))


def occlude(sample: SyntheticSample, rig: FaceRig, coverage: float, color: float) -> Tuple[np.ndarray, np.ndarray]:
    face = project_bbox(sample.params, rig, sample.center, margin=0.0)
    image, mask = paint_rectangle(sample.image, sample.mask, occluder_box(face, coverage), color)
    return image, mask


def sequence_error(
    sequence: Sequence[SyntheticSample],
    model: CascadeModel,
    rig: FaceRig,
    coverage: float,
    masked: bool,
    color: float,
) -> float:
    """
    Mean normalised landmark error over a sequence. Each frame regresses from the previous frame's true shape, so
    errors measure one tracking step and do not compound.
    """
    errors = []
    for previous, sample in zip(sequence[:-1], sequence[1:]):
        image, mask = occlude(sample, rig, coverage, color)
        params = sample.params
        result = regress(
            image,
            mask if masked else None,
            previous.params.to_vector(),
            model,
            rig,
            params.identity,
            params.focal,
            sample.center,
        )
        if result.failed:
            logger.warning("Regression failed on an occluded frame (coverage %.2f)", coverage)
        predicted = current_landmarks(result.shape, rig, params.identity, params.focal, sample.center)
        iod = inter_ocular_distance(sample.landmarks, rig)
        errors.append(float(np.linalg.norm(predicted - sample.landmarks, axis=1).mean()) / max(iod, 1e-12))
    return float(np.mean(errors)) if errors else 0.0


def evaluate_occlusion_sweep(
    models: Dict[str, Tuple[CascadeModel, bool]],
    sequences: Sequence[Sequence[SyntheticSample]],
    rig: FaceRig,
    coverages: Sequence[float] = DEFAULT_COVERAGES,
    color: float = 128.0,
) -> SweepResult:
    """models maps a variant name to (model, uses masks). Returns the mean error per variant and coverage."""
    if not sequences or any(len(seq) < 2 for seq in sequences):
        raise ValueError("Occlusion sweep needs sequences of at least two frames")
    for seq in sequences:
        for sample in seq:
            if sample.landmarks is None or sample.params is None:
                raise ValueError("Occlusion sweep needs ground truth for every frame")
    result = SweepResult(coverages=[float(c) for c in coverages])
    for name, (model, masked) in models.items():
        curve = []
        for coverage in coverages:
            value = float(np.mean([sequence_error(seq, model, rig, coverage, masked, color) for seq in sequences]))
            curve.append(value)
            logger.info("Sweep %s coverage %.2f error %.4f", name, coverage, value)
        result.errors[name] = curve
    return result


def make_sweep_sequences(
    rig: FaceRig,
    count: int = 3,
    frames: int = 180,
    cfg: Optional[SynthConfig] = None,
    seed: int = 0,
) -> List[List[SyntheticSample]]:
    rng = np.random.default_rng(seed)
    return [gen_sequence(rig, frames, cfg, np.random.default_rng(int(rng.integers(2**31 - 1)))) for _ in range(count)]


def write_csv(result: SweepResult, path: PathLike) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["coverage", *result.errors.keys()])
        writer.writeheader()
        for row in result.rows():
            writer.writerow(row)
    logger.info("Wrote sweep table to %s", path)


def plot_sweep(result: SweepResult, path: PathLike) -> None:
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    for name, values in result.errors.items():
        ax.plot(np.asarray(result.coverages) * 100.0, values, marker="o", label=name)
    ax.set_xlabel("occluded face area (%)")
    ax.set_ylabel("landmark error / inter-ocular distance")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path))
    logger.info("Wrote sweep plot to %s", path)
