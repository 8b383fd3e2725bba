from __future__ import annotations

import threading
import uuid
from concurrent.futures import Executor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .facemodel import FaceRig
from .models import BoundingBox, Keyframe, ShapeParams
from .regressor import CascadeModel


def rotation_distance(q1: np.ndarray, q2: np.ndarray) -> float:
    """Geodesic angle between two unit quaternions, insensitive to sign."""
    dot = abs(float(np.dot(q1, q2)))
    return 2.0 * float(np.arccos(min(1.0, dot)))


class KeyframeStore:
    def __init__(self, max_keyframes: int = 20, alpha: float = 1.0, threshold: float = 0.3) -> None:
        if max_keyframes < 1:
            raise ValueError("Keyframe store needs room for at least one keyframe")
        self.max_keyframes = max_keyframes
        self.alpha = alpha
        self.threshold = threshold
        self._lock = threading.Lock()
        self._keyframes: List[Keyframe] = []

    def novelty(self, params: ShapeParams) -> float:
        with self._lock:
            stored = list(self._keyframes)
        return self._novelty(params, stored)

    def _novelty(self, params: ShapeParams, stored: List[Keyframe]) -> float:
        if not stored:
            return float("inf")
        return min(
            rotation_distance(params.rotation, kf.rotation) + self.alpha * float(np.linalg.norm(params.expression - kf.expression))
            for kf in stored
        )

    def consider(self, params: ShapeParams, landmarks: np.ndarray, frame_index: int) -> bool:
        """Admit when novelty exceeds the threshold; a full store evicts the keyframe farthest in time."""
        with self._lock:
            if self._novelty(params, self._keyframes) <= self.threshold:
                return False
            if len(self._keyframes) >= self.max_keyframes:
                farthest = max(range(len(self._keyframes)), key=lambda i: abs(frame_index - self._keyframes[i].frame_index))
                self._keyframes.pop(farthest)
            self._keyframes.append(Keyframe.from_params(params, landmarks, frame_index))
            return True

    def snapshot(self) -> Tuple[Keyframe, ...]:
        with self._lock:
            return tuple(self._keyframes)

    def __len__(self) -> int:
        with self._lock:
            return len(self._keyframes)


class IdentityStatus(str, Enum):
    IDLE = "idle"
    RUNNING = "running"
    READY = "ready"


@dataclass(frozen=True)
class IdentityUpdate:
    identity: np.ndarray
    focal: float
    objective: float
    keyframes: int


@dataclass
class TrackerState:
    params: ShapeParams
    bbox: BoundingBox
    model: CascadeModel
    rig: FaceRig
    frame_size: Tuple[int, int]  # (width, height)
    keyframes: KeyframeStore
    landmarks: Optional[np.ndarray] = None
    frame_index: int = 0
    executor: Optional[Executor] = None  # None runs the identity solve synchronously
    identity_solver: Optional[Callable] = None
    identity_converged: bool = False
    identity_tolerance: float = 1e-3
    merges: int = 0
    _status: IdentityStatus = IdentityStatus.IDLE
    _pending: Optional[IdentityUpdate] = None
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def identity_status(self) -> IdentityStatus:
        with self._lock:
            return self._status

    def try_start_solve(self) -> bool:
        with self._lock:
            if self._status is not IdentityStatus.IDLE:
                return False
            self._status = IdentityStatus.RUNNING
            return True

    def offer_identity(self, update: IdentityUpdate) -> None:
        with self._lock:
            self._pending = update
            self._status = IdentityStatus.READY

    def solve_failed(self) -> None:
        with self._lock:
            self._status = IdentityStatus.IDLE

    def take_pending(self) -> Optional[IdentityUpdate]:
        with self._lock:
            update, self._pending = self._pending, None
            if update is not None:
                self._status = IdentityStatus.IDLE
            return update


@dataclass
class SessionRecord:
    session_id: str
    frames_dir: str
    out_dir: Optional[str]
    status: str = "queued"
    frames_total: int = 0
    frames_done: int = 0
    keyframes: int = 0
    identity_status: str = IdentityStatus.IDLE.value
    last_timings: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None


class SessionStore:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._sessions: Dict[str, SessionRecord] = {}

    def create(self, frames_dir: str, out_dir: Optional[str]) -> SessionRecord:
        record = SessionRecord(session_id=uuid.uuid4().hex[:12], frames_dir=frames_dir, out_dir=out_dir)
        with self._lock:
            self._sessions[record.session_id] = record
        return record

    def update(self, session_id: str, **changes) -> None:
        with self._lock:
            record = self._sessions[session_id]
            for key, value in changes.items():
                setattr(record, key, value)

    def find(self, session_id: str) -> Optional[SessionRecord]:
        with self._lock:
            record = self._sessions.get(session_id)
            return replace(record) if record else None

    def list_sessions(self) -> List[SessionRecord]:
        with self._lock:
            return [replace(record) for record in self._sessions.values()]
