from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Optional

import numpy as np

from .images import PathLike, load_probability
from .models import FormatError, UntrainedModelError
from .segnet import NetworkGraph, infer_probability_map

logger = logging.getLogger(__name__)

SOURCE_KINDS = ("net", "dir", "all-face")


class ProbabilitySource(ABC):
    """Face probability for a crop. None means unavailable; the tracker then falls back to an all-face mask."""

    name = "abstract"
    all_face = False

    @abstractmethod
    def probability(self, crop: np.ndarray, frame_index: int) -> Optional[np.ndarray]:
        ...


class NetSource(ProbabilitySource):
    name = "net"

    def __init__(self, net: NetworkGraph) -> None:
        self.net = net

    def probability(self, crop: np.ndarray, frame_index: int) -> Optional[np.ndarray]:
        try:
            return infer_probability_map(self.net, crop)
        except UntrainedModelError:
            logger.warning("Segmentation network is untrained; frame %d has no probability map", frame_index)
            return None


class DirectorySource(ProbabilitySource):
    """Per-frame maps named NNNN.pfm (or .pgm) in one directory."""

    name = "dir"

    def __init__(self, directory: PathLike) -> None:
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise ValueError(f"Probability directory {self.directory} does not exist")

    def path_for(self, frame_index: int) -> Optional[Path]:
        for suffix in (".pfm", ".pgm"):
            candidate = self.directory / f"{frame_index:04d}{suffix}"
            if candidate.exists():
                return candidate
        return None

    def probability(self, crop: np.ndarray, frame_index: int) -> Optional[np.ndarray]:
        path = self.path_for(frame_index)
        if path is None:
            logger.warning("No probability map for frame %d in %s", frame_index, self.directory)
            return None
        try:
            prob = load_probability(path)
        except (FormatError, OSError) as exc:
            logger.warning("Unreadable probability map %s: %s", path, exc)
            return None
        if prob.shape != crop.shape[:2]:
            logger.warning("Probability map %s is %s, crop is %s", path, prob.shape, crop.shape[:2])
            return None
        return prob


class AllFaceSource(ProbabilitySource):
    name = "all-face"
    all_face = True

    def probability(self, crop: np.ndarray, frame_index: int) -> Optional[np.ndarray]:
        return np.ones(crop.shape[:2])


def make_source(
    kind: str,
    net: Optional[NetworkGraph] = None,
    directory: Optional[PathLike] = None,
) -> ProbabilitySource:
    if kind == "net":
        if net is None:
            raise ValueError("The net probability source needs a segmentation checkpoint")
        return NetSource(net)
    if kind == "dir":
        if directory is None:
            raise ValueError("The dir probability source needs a directory")
        return DirectorySource(directory)
    if kind == "all-face":
        return AllFaceSource()
    raise ValueError(f"Unknown probability source {kind!r}; expected one of {', '.join(SOURCE_KINDS)}")
