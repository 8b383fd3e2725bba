from __future__ import annotations

import csv
import glob
import logging
import time
from concurrent.futures import Future
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .config import Settings, settings as default_settings
from .facemodel import FaceRig, image_center, inter_ocular_distance, project_bbox, project_landmarks
from .images import PathLike, crop_and_resize, load_image, save_mask, to_rgb
from .maskrefine import build_energy, luma, min_cut, resize_mask
from .models import BoundingBox, FrameResult, ProjectionError, ShapeParams
from .probsource import ProbabilitySource
from .regressor import CascadeModel, regress
from .solvers import FitConfig, fit_ground_truth, solve_identity_focal
from .state import IdentityUpdate, KeyframeStore, TrackerState

logger = logging.getLogger(__name__)


def _frame_bbox(params: ShapeParams, rig: FaceRig, frame_size: Tuple[int, int], margin: float) -> BoundingBox:
    width, height = frame_size
    return project_bbox(params, rig, image_center(width, height), margin).square().clamped(width, height)


def init_tracker(
    params: ShapeParams,
    rig: FaceRig,
    model: CascadeModel,
    frame_size: Tuple[int, int],
    bbox: Optional[BoundingBox] = None,
    executor=None,
    cfg: Optional[Settings] = None,
) -> TrackerState:
    """First-frame state from a known shape; the bbox defaults to the projected shape."""
    cfg = cfg or default_settings
    width, height = frame_size
    if bbox is None:
        bbox = _frame_bbox(params, rig, frame_size, cfg.bbox_margin)
    else:
        bbox = bbox.clamped(width, height)
    landmarks = project_landmarks(params, rig, image_center(width, height))
    return TrackerState(
        params=params.copy(),
        bbox=bbox,
        model=model,
        rig=rig,
        frame_size=(width, height),
        keyframes=KeyframeStore(cfg.max_keyframes, cfg.keyframe_alpha, cfg.keyframe_threshold),
        landmarks=landmarks,
        executor=executor,
        identity_tolerance=cfg.identity_tolerance,
    )


def init_from_landmarks(
    landmarks: np.ndarray,
    rig: FaceRig,
    model: CascadeModel,
    frame_size: Tuple[int, int],
    bbox: Optional[BoundingBox] = None,
    executor=None,
    cfg: Optional[Settings] = None,
) -> TrackerState:
    """First frame from externally supplied landmarks, fitted with the ground-truth solver."""
    cfg = cfg or default_settings
    width, height = frame_size
    center = image_center(width, height)
    start = ShapeParams.neutral(rig.n_expressions, rig.n_landmarks, rig.n_identity, focal=float(width), depth=0.3)
    params, report = fit_ground_truth(landmarks, rig, start, center, FitConfig.from_settings(cfg))
    logger.info("First-frame fit objective %.6g after %d rounds", report.objective, report.iterations)
    return init_tracker(params, rig, model, frame_size, bbox=bbox, executor=executor, cfg=cfg)


def _merge_identity(state: TrackerState) -> None:
    update = state.take_pending()
    if update is None:
        return
    old_u, old_f = state.params.identity, state.params.focal
    change = np.linalg.norm(update.identity - old_u) / max(np.linalg.norm(old_u), 1.0) + abs(update.focal - old_f) / old_f
    state.params = state.params.with_updates(identity=np.array(update.identity), focal=update.focal)
    state.merges += 1
    if change < state.identity_tolerance:
        state.identity_converged = True
    logger.info(
        "Merged identity solve from %d keyframes (objective %.6g, f=%.3f, change %.3g)",
        update.keyframes,
        update.objective,
        update.focal,
        change,
    )


def _paste_mask(crop_mask: np.ndarray, bbox: BoundingBox, frame_size: Tuple[int, int]) -> np.ndarray:
    width, height = frame_size
    x0, y0, x1, y1 = bbox.to_pixels()
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, width), min(y1, height)
    frame_mask = np.zeros((height, width), dtype=bool)
    if x1 > x0 and y1 > y0:
        frame_mask[y0:y1, x0:x1] = resize_mask(crop_mask, x1 - x0, y1 - y0)
    return frame_mask


def track_frame(
    frame: np.ndarray,
    source: ProbabilitySource,
    state: TrackerState,
    cfg: Optional[Settings] = None,
) -> Tuple[FrameResult, TrackerState]:
    cfg = cfg or default_settings
    started = time.perf_counter()
    timings = {}
    warnings: List[str] = []
    frame = np.asarray(frame, dtype=np.float64)
    height, width = frame.shape[:2]
    if (width, height) != state.frame_size:
        raise ValueError(f"Frame is {width}x{height}, tracker expects {state.frame_size[0]}x{state.frame_size[1]}")
    center = image_center(width, height)
    _merge_identity(state)

    bbox = state.bbox
    if state.landmarks is not None and not bbox.contains(state.landmarks):
        lo = state.landmarks.min(axis=0)
        hi = state.landmarks.max(axis=0)
        bbox = (
            BoundingBox(float(lo[0]), float(lo[1]), float(hi[0] - lo[0]), float(hi[1] - lo[1]))
            .expanded(cfg.bbox_margin)
            .square()
            .clamped(width, height)
        )
        logger.warning("Frame %d: crop missed the previous landmarks; re-centering", state.frame_index)

    tick = time.perf_counter()
    rgb = to_rgb(frame)
    crop = crop_and_resize(rgb, bbox, cfg.crop_size)
    timings["crop"] = time.perf_counter() - tick

    tick = time.perf_counter()
    prob = source.probability(crop, state.frame_index)
    timings["segment"] = time.perf_counter() - tick

    tick = time.perf_counter()
    if source.all_face:
        crop_mask = np.ones((cfg.crop_size, cfg.crop_size), dtype=bool)
        frame_mask = np.ones((height, width), dtype=bool)
    elif prob is None:
        warnings.append("probability map unavailable; tracking with an all-face mask")
        logger.warning("Frame %d: %s", state.frame_index, warnings[-1])
        crop_mask = np.ones((cfg.crop_size, cfg.crop_size), dtype=bool)
        frame_mask = np.ones((height, width), dtype=bool)
    else:
        energy = build_energy(
            prob,
            luma(crop),
            lam=cfg.graphcut_lambda,
            sigma=cfg.graphcut_sigma,
            epsilon=cfg.probability_epsilon,
            connectivity=cfg.connectivity,
        )
        crop_mask = min_cut(energy)
        frame_mask = _paste_mask(crop_mask, bbox, (width, height))
    timings["refine"] = time.perf_counter() - tick

    tick = time.perf_counter()
    gray = luma(frame) if frame.ndim == 3 else frame
    params = state.params
    result = regress(gray, frame_mask, params.to_vector(), state.model, state.rig, params.identity, params.focal, center)
    timings["regress"] = time.perf_counter() - tick

    failed = result.failed
    if failed:
        warnings.append(f"regression failed at stage {result.failed_stage}; holding the previous shape")
        logger.warning("Frame %d: %s", state.frame_index, warnings[-1])
        new_params = params
        landmarks = state.landmarks if state.landmarks is not None else project_landmarks(params, state.rig, center)
        new_bbox = bbox
    else:
        new_params = ShapeParams.from_vector(result.shape, params.identity, params.focal)
        try:
            landmarks = project_landmarks(new_params, state.rig, center)
            new_bbox = _frame_bbox(new_params, state.rig, (width, height), cfg.bbox_margin)
        except ProjectionError as exc:
            failed = True
            warnings.append(f"regressed shape does not project ({exc}); holding the previous shape")
            logger.warning("Frame %d: %s", state.frame_index, warnings[-1])
            new_params = params
            landmarks = state.landmarks
            new_bbox = bbox

    frame_result = FrameResult(
        shape=new_params.to_vector(),
        crop_mask=crop_mask,
        frame_mask=frame_mask,
        landmarks=np.array(landmarks),
        bbox=bbox,
        failed=failed,
        warnings=warnings,
    )
    state.params = new_params
    state.landmarks = np.array(landmarks)
    state.bbox = new_bbox
    if not failed:
        keyframe_update(state, new_params, landmarks, cfg)
    state.frame_index += 1
    timings["total"] = time.perf_counter() - started
    frame_result.timings = timings
    return frame_result, state


def keyframe_update(
    state: TrackerState, params: ShapeParams, landmarks: np.ndarray, cfg: Optional[Settings] = None
) -> TrackerState:
    admitted = state.keyframes.consider(params, landmarks, state.frame_index)
    if admitted:
        logger.debug("Frame %d admitted as keyframe (%d stored)", state.frame_index, len(state.keyframes))
        if not state.identity_converged:
            run_identity_solve_async(state, cfg)
    return state


def _solve_job(state: TrackerState, snapshot, identity: np.ndarray, focal: float, fit_cfg: FitConfig) -> Optional[IdentityUpdate]:
    solver = state.identity_solver or solve_identity_focal
    width, height = state.frame_size
    try:
        u, f, report = solver(snapshot, state.rig, identity, focal, image_center(width, height), fit_cfg)
        update = IdentityUpdate(identity=np.array(u), focal=float(f), objective=report.objective, keyframes=len(snapshot))
    except Exception:
        logger.exception("Identity/focal solve over %d keyframes failed; keeping the previous values", len(snapshot))
        state.solve_failed()
        return None
    state.offer_identity(update)
    return update


def run_identity_solve_async(state: TrackerState, cfg: Optional[Settings] = None) -> Optional[Future]:
    """
    Solve on a snapshot of the keyframes. The result waits in the state until the next frame boundary. Returns
    None when there is nothing to do or a solve is already in flight.
    """
    snapshot = state.keyframes.snapshot()
    if not snapshot:
        return None
    if not state.try_start_solve():
        return None
    fit_cfg = FitConfig.from_settings(cfg or default_settings)
    identity = np.array(state.params.identity)
    focal = state.params.focal
    if state.executor is None:
        future: Future = Future()
        future.set_result(_solve_job(state, snapshot, identity, focal, fit_cfg))
        return future
    return state.executor.submit(_solve_job, state, snapshot, identity, focal, fit_cfg)


def track_sequence(
    frames: Iterable[np.ndarray],
    source: ProbabilitySource,
    state: TrackerState,
    cfg: Optional[Settings] = None,
) -> List[FrameResult]:
    results = []
    for frame in frames:
        result, state = track_frame(frame, source, state, cfg)
        results.append(result)
    return results


FRAME_SUFFIXES = (".pgm", ".ppm", ".png", ".jpg", ".jpeg", ".bmp")
TIMING_FIELDS = ("frame", "crop", "segment", "refine", "regress", "total", "failed")


def list_frames(frames: PathLike) -> List[Path]:
    """A directory of frame images (sorted by name) or a glob pattern."""
    path = Path(frames)
    if path.is_dir():
        found = sorted(p for p in path.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)
    else:
        found = sorted(Path(p) for p in glob.glob(str(frames)))
    if not found:
        raise ValueError(f"No frames found at {frames}")
    return found


def track_files(
    paths: Sequence[Path],
    source: ProbabilitySource,
    state: TrackerState,
    out_dir: Optional[PathLike] = None,
    cfg: Optional[Settings] = None,
    on_frame: Optional[Callable[[int, FrameResult, TrackerState], None]] = None,
) -> List[FrameResult]:
    """
    Tracks frame files in order. With out_dir, writes params/NNNN.txt, masks/NNNN.pbm and timings.csv as frames
    complete.
    """
    writer = None
    handle = None
    if out_dir is not None:
        out = Path(out_dir)
        (out / "params").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
        handle = open(out / "timings.csv", "w", newline="")
        writer = csv.DictWriter(handle, fieldnames=list(TIMING_FIELDS))
        writer.writeheader()
    results = []
    try:
        for index, path in enumerate(paths):
            result, state = track_frame(load_image(path), source, state, cfg)
            results.append(result)
            if writer is not None:
                name = f"{index:04d}"
                params = ShapeParams.from_vector(result.shape, state.params.identity, state.params.focal)
                (out / "params" / f"{name}.txt").write_text(params.to_text())
                save_mask(out / "masks" / f"{name}.pbm", result.frame_mask)
                writer.writerow({"frame": index, "failed": int(result.failed), **result.timings})
                handle.flush()
            if on_frame is not None:
                on_frame(index, result, state)
    finally:
        if handle is not None:
            handle.close()
    logger.info("Tracked %d frames (%d failed)", len(results), sum(r.failed for r in results))
    return results


def landmark_errors(results: Sequence[FrameResult], truth: Sequence[np.ndarray], rig: FaceRig) -> np.ndarray:
    """Per-frame mean landmark error divided by the true inter-ocular distance."""
    errors = []
    for result, gt in zip(results, truth):
        iod = inter_ocular_distance(gt, rig)
        errors.append(float(np.linalg.norm(result.landmarks - gt, axis=1).mean()) / max(iod, 1e-12))
    return np.asarray(errors)
