from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .facemodel import FaceRig, image_center, project_landmarks
from .images import PathLike, load_image, load_mask, save_gray, save_mask
from .models import FormatError, ShapeParams
from .synth import SyntheticSample

logger = logging.getLogger(__name__)

MANIFEST_HEADER = "# capture-dataset 1"


@dataclass
class DatasetEntry:
    name: str
    seed: int


def _name(index: int) -> str:
    return f"{index:04d}"


def save_dataset(samples: Sequence[SyntheticSample], out_dir: PathLike) -> Path:
    """Writes images/NNNN.pgm, masks/NNNN.pbm, params/NNNN.txt (shape text plus a landmarks line) and manifest.txt."""
    root = Path(out_dir)
    for sub in ("images", "masks", "params"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER, f"count {len(samples)}"]
    for index, sample in enumerate(samples):
        name = _name(index)
        save_gray(root / "images" / f"{name}.pgm", sample.image)
        save_mask(root / "masks" / f"{name}.pbm", sample.mask)
        landmarks = " ".join(repr(float(v)) for v in np.asarray(sample.landmarks).reshape(-1))
        (root / "params" / f"{name}.txt").write_text(sample.params.to_text() + f"landmarks {landmarks}\n")
        lines.append(f"{name} {sample.seed}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    logger.info("Wrote %d samples to %s", len(samples), root)
    return root


def read_manifest(root: PathLike) -> List[DatasetEntry]:
    path = Path(root) / "manifest.txt"
    if not path.exists():
        raise FormatError(f"{path} not found")
    lines = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing '{MANIFEST_HEADER}' header")
    entries: List[DatasetEntry] = []
    count: Optional[int] = None
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "count":
            count = int(rest)
            continue
        try:
            entries.append(DatasetEntry(name=key, seed=int(rest)))
        except ValueError as exc:
            raise FormatError(f"{path}: bad entry {line!r}") from exc
    if count is not None and count != len(entries):
        raise FormatError(f"{path}: count {count} but {len(entries)} entries")
    return entries


def _landmarks_from_text(text: str) -> Optional[np.ndarray]:
    for line in text.splitlines():
        key, _, rest = line.strip().partition(" ")
        if key == "landmarks":
            return np.array([float(tok) for tok in rest.split()]).reshape(-1, 2)
    return None


def load_dataset(root: PathLike, rig: Optional[FaceRig] = None, limit: Optional[int] = None) -> List[SyntheticSample]:
    root = Path(root)
    entries = read_manifest(root)
    if limit is not None:
        entries = entries[:limit]
    samples: List[SyntheticSample] = []
    for entry in entries:
        image = load_image(root / "images" / f"{entry.name}.pgm")
        if image.ndim == 3:
            raise FormatError(f"{entry.name}: dataset images must be grayscale")
        mask = load_mask(root / "masks" / f"{entry.name}.pbm")
        if mask.shape != image.shape:
            raise FormatError(f"{entry.name}: mask {mask.shape} does not match image {image.shape}")
        text = (root / "params" / f"{entry.name}.txt").read_text()
        params = ShapeParams.from_text(text)
        landmarks = _landmarks_from_text(text)
        if landmarks is None:
            if rig is None:
                raise FormatError(f"{entry.name}: no landmarks stored and no rig to project them")
            landmarks = project_landmarks(params, rig, image_center(image.shape[1], image.shape[0]))
        samples.append(
            SyntheticSample(image=image, mask=mask, params=params, landmarks=landmarks, seed=entry.seed, rig=rig)
        )
    logger.info("Loaded %d samples from %s", len(samples), root)
    return samples
