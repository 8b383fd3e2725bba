from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from scipy.spatial.transform import Rotation


class ProjectionError(ValueError):
    def __init__(self, landmark_index: int, depth: float) -> None:
        super().__init__(f"Point {landmark_index} at depth {depth:.3g} is at or behind the camera plane")
        self.landmark_index = landmark_index
        self.depth = depth


class SolverError(RuntimeError):
    pass


class TrainingDivergedError(RuntimeError):
    pass


class UntrainedModelError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


# (m, 2) pixel coordinates
Landmarks2D = np.ndarray


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    width: float
    height: float

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x + self.width / 2.0, self.y + self.height / 2.0])

    def expanded(self, margin: float) -> "BoundingBox":
        w = self.width * (1.0 + margin)
        h = self.height * (1.0 + margin)
        cx, cy = self.center
        return BoundingBox(cx - w / 2.0, cy - h / 2.0, w, h)

    def contains(self, points: np.ndarray) -> bool:
        pts = np.atleast_2d(points)
        return bool(
            np.all(pts[:, 0] >= self.x)
            and np.all(pts[:, 0] <= self.x + self.width)
            and np.all(pts[:, 1] >= self.y)
            and np.all(pts[:, 1] <= self.y + self.height)
        )

    def square(self) -> "BoundingBox":
        side = max(self.width, self.height)
        cx, cy = self.center
        return BoundingBox(cx - side / 2.0, cy - side / 2.0, side, side)

    def clamped(self, frame_width: int, frame_height: int) -> "BoundingBox":
        """Shift (then shrink if needed) so the box lies inside the frame."""
        w = min(self.width, float(frame_width))
        h = min(self.height, float(frame_height))
        x = min(max(self.x, 0.0), frame_width - w)
        y = min(max(self.y, 0.0), frame_height - h)
        return BoundingBox(x, y, w, h)

    def to_pixels(self) -> tuple[int, int, int, int]:
        """Integer (x0, y0, x1, y1), half-open, at least one pixel wide."""
        x0 = int(math.floor(self.x))
        y0 = int(math.floor(self.y))
        x1 = max(x0 + 1, int(math.ceil(self.x + self.width)))
        y1 = max(y0 + 1, int(math.ceil(self.y + self.height)))
        return x0, y0, x1, y1


@dataclass
class ShapeVector:
    """Regressed subset (R, t, x, D). Rotation is a rotation vector so deltas add."""

    rotation: np.ndarray
    translation: np.ndarray
    expression: np.ndarray
    displacements: np.ndarray

    @staticmethod
    def size(n_expressions: int, n_landmarks: int) -> int:
        return 3 + 3 + n_expressions + 2 * n_landmarks

    @property
    def n_expressions(self) -> int:
        return int(self.expression.shape[0])

    @property
    def n_landmarks(self) -> int:
        return int(self.displacements.shape[0])

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [
                np.asarray(self.rotation, dtype=np.float64),
                np.asarray(self.translation, dtype=np.float64),
                np.asarray(self.expression, dtype=np.float64),
                np.asarray(self.displacements, dtype=np.float64).reshape(-1),
            ]
        )

    @classmethod
    def from_flat(cls, values: np.ndarray, n_expressions: int, n_landmarks: int) -> "ShapeVector":
        values = np.asarray(values, dtype=np.float64)
        expected = cls.size(n_expressions, n_landmarks)
        if values.shape != (expected,):
            raise ValueError(f"Shape vector length {values.shape} does not match expected ({expected},)")
        n = n_expressions
        return cls(
            rotation=values[0:3].copy(),
            translation=values[3:6].copy(),
            expression=values[6 : 6 + n].copy(),
            displacements=values[6 + n :].reshape(n_landmarks, 2).copy(),
        )

    def copy(self) -> "ShapeVector":
        return ShapeVector(
            self.rotation.copy(), self.translation.copy(), self.expression.copy(), self.displacements.copy()
        )


@dataclass
class ShapeParams:
    rotation: np.ndarray  # unit quaternion (x, y, z, w)
    translation: np.ndarray
    expression: np.ndarray
    displacements: np.ndarray
    identity: np.ndarray
    focal: float

    def __post_init__(self) -> None:
        quat = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        norm = float(np.linalg.norm(quat))
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("Rotation quaternion must be finite and non-zero")
        self.rotation = quat / norm
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.expression = np.asarray(self.expression, dtype=np.float64).reshape(-1)
        self.displacements = np.asarray(self.displacements, dtype=np.float64).reshape(-1, 2)
        self.identity = np.asarray(self.identity, dtype=np.float64).reshape(-1)
        self.focal = float(self.focal)
        if not self.focal > 0.0:
            raise ValueError(f"Focal length must be positive, got {self.focal}")

    @classmethod
    def neutral(
        cls,
        n_expressions: int,
        n_landmarks: int,
        n_identity: int,
        focal: float,
        depth: float = 1.0,
    ) -> "ShapeParams":
        return cls(
            rotation=np.array([0.0, 0.0, 0.0, 1.0]),
            translation=np.array([0.0, 0.0, depth]),
            expression=np.zeros(n_expressions),
            displacements=np.zeros((n_landmarks, 2)),
            identity=np.zeros(n_identity),
            focal=focal,
        )

    @property
    def rotation_matrix(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation).as_matrix()

    def to_vector(self) -> ShapeVector:
        return ShapeVector(
            rotation=Rotation.from_quat(self.rotation).as_rotvec(),
            translation=self.translation.copy(),
            expression=self.expression.copy(),
            displacements=self.displacements.copy(),
        )

    @classmethod
    def from_vector(cls, vector: ShapeVector, identity: np.ndarray, focal: float) -> "ShapeParams":
        return cls(
            rotation=Rotation.from_rotvec(vector.rotation).as_quat(),
            translation=vector.translation.copy(),
            expression=vector.expression.copy(),
            displacements=vector.displacements.copy(),
            identity=np.array(identity, dtype=np.float64),
            focal=focal,
        )

    def with_updates(self, **changes) -> "ShapeParams":
        return replace(self, **changes)

    def copy(self) -> "ShapeParams":
        return ShapeParams(
            self.rotation.copy(),
            self.translation.copy(),
            self.expression.copy(),
            self.displacements.copy(),
            self.identity.copy(),
            self.focal,
        )

    def to_text(self) -> str:
        def row(values: np.ndarray) -> str:
            return " ".join(repr(float(v)) for v in np.asarray(values).reshape(-1))

        lines = [
            f"rotation {row(self.rotation)}",
            f"translation {row(self.translation)}",
            f"expression {row(self.expression)}",
            f"displacements {row(self.displacements)}",
            f"identity {row(self.identity)}",
            f"focal {self.focal!r}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ShapeParams":
        fields_: Dict[str, np.ndarray] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            fields_[key] = np.array([float(tok) for tok in rest.split()], dtype=np.float64)
        missing = {"rotation", "translation", "expression", "displacements", "identity", "focal"} - set(fields_)
        if missing:
            raise FormatError(f"Shape parameter text missing fields: {', '.join(sorted(missing))}")
        return cls(
            rotation=fields_["rotation"],
            translation=fields_["translation"],
            expression=fields_["expression"],
            displacements=fields_["displacements"].reshape(-1, 2),
            identity=fields_["identity"],
            focal=float(fields_["focal"][0]),
        )


@dataclass
class RegressionResult:
    shape: ShapeVector
    failed: bool = False
    failed_stage: Optional[int] = None


@dataclass(frozen=True)
class Keyframe:
    rotation: np.ndarray  # quaternion (x, y, z, w)
    translation: np.ndarray
    expression: np.ndarray
    landmarks: np.ndarray
    frame_index: int = 0

    @classmethod
    def from_params(cls, params: ShapeParams, landmarks: np.ndarray, frame_index: int = 0) -> "Keyframe":
        return cls(
            rotation=params.rotation.copy(),
            translation=params.translation.copy(),
            expression=params.expression.copy(),
            landmarks=np.array(landmarks, dtype=np.float64),
            frame_index=frame_index,
        )


@dataclass
class FrameResult:
    shape: ShapeVector
    crop_mask: np.ndarray
    frame_mask: np.ndarray
    landmarks: np.ndarray
    bbox: BoundingBox
    timings: Dict[str, float] = field(default_factory=dict)
    failed: bool = False
    warnings: List[str] = field(default_factory=list)
