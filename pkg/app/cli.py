from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .augment import PerturbRanges, build_regression_samples, negative_samples, segmentation_augment
from .config import Settings
from .dataset import load_dataset, save_dataset
from .evaluation import DEFAULT_COVERAGES, evaluate_occlusion_sweep, make_sweep_sequences, plot_sweep, write_csv
from .facemodel import make_toy_rig
from .images import crop_and_resize, load_image, load_probability, save_mask, save_probability, to_rgb
from .maskrefine import luma, refine, resize_mask
from .models import BoundingBox, ShapeParams
from .pipeline import init_from_landmarks, init_tracker, list_frames, track_files
from .probsource import SOURCE_KINDS, make_source
from .regressor import CascadeConfig, train_cascade
from .segnet import infer_probability_map, normalize_image
from .segtrain import TrainConfig, evaluate_iou, fine_tune, new_network, train
from .storage import load_cascade, load_rig, load_segnet, save_cascade, save_rig, save_segnet
from .synth import SynthConfig, gen_blob_dataset, gen_synthetic_dataset, random_background

logger = logging.getLogger("capture")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _setup(args: argparse.Namespace) -> Settings:
    cfg = Settings.load(args.config)
    level = args.log_level or cfg.log_level
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, force=True)
    logger.debug("Effective settings: %s", cfg.as_dict())
    return cfg


def _square(image: np.ndarray, size: int) -> np.ndarray:
    height, width = image.shape[:2]
    return crop_and_resize(image, BoundingBox(0.0, 0.0, float(width), float(height)), size)


def cmd_make_rig(args: argparse.Namespace, cfg: Settings) -> int:
    rig = make_toy_rig(
        n_expressions=args.expressions,
        n_identity=args.identity,
        n_landmarks=args.landmarks,
        grid=args.grid,
        seed=args.seed,
    )
    save_rig(rig, args.out)
    logger.info(
        "Wrote rig with %d vertices, %d expressions, %d identity bases, %d landmarks to %s",
        rig.vertex_count,
        rig.n_expressions,
        rig.n_identity,
        rig.n_landmarks,
        args.out,
    )
    return 0


def cmd_refine(args: argparse.Namespace, cfg: Settings) -> int:
    prob = load_probability(args.prob)
    image = load_image(args.image)
    if image.shape[:2] != prob.shape:
        raise ValueError(f"Image {image.shape[:2]} does not match probability map {prob.shape}")
    target = (args.width, args.height) if args.width and args.height else None
    mask = refine(
        prob,
        luma(image),
        lam=args.lam if args.lam is not None else cfg.graphcut_lambda,
        sigma=args.sigma if args.sigma is not None else cfg.graphcut_sigma,
        epsilon=cfg.probability_epsilon,
        connectivity=args.connectivity or cfg.connectivity,
        target_size=target,
    )
    save_mask(args.out, mask)
    logger.info("Wrote %dx%d mask (%.1f%% face) to %s", mask.shape[1], mask.shape[0], 100.0 * mask.mean(), args.out)
    return 0


def _background_pool(count: int, size: int, rng: np.random.Generator) -> List[np.ndarray]:
    return [
        np.stack([random_background(size, size, rng, level, 30.0) for level in (70.0, 90.0, 120.0)], axis=2)
        for _ in range(count)
    ]


def _segmentation_data(args: argparse.Namespace, tcfg: TrainConfig, rng: np.random.Generator):
    size = tcfg.input_size
    if args.data:
        samples = load_dataset(args.data, limit=args.limit)
        rgb = [_square(to_rgb(s.image), size) for s in samples]
        masks = [resize_mask(s.mask, size, size) for s in samples]
    else:
        rgb, masks = gen_blob_dataset(args.blobs, size, rng)
    if args.augment:
        extra_rgb, extra_masks = [], []
        for image, mask in zip(rgb, masks):
            for aug_image, aug_mask in segmentation_augment(image, mask, rng):
                extra_rgb.append(aug_image)
                extra_masks.append(aug_mask)
        rgb, masks = rgb + extra_rgb, masks + extra_masks
    return rgb, masks


def cmd_train_segnet(args: argparse.Namespace, cfg: Settings) -> int:
    tcfg = TrainConfig.from_file(Path(args.train_config)) if args.train_config else TrainConfig()
    if args.iterations is not None:
        tcfg = replace(tcfg, iterations=args.iterations)
    rng = np.random.default_rng(tcfg.seed)
    rgb, masks = _segmentation_data(args, tcfg, rng)
    holdout = max(1, int(round(len(rgb) * args.holdout))) if args.holdout > 0 else 0
    train_rgb, train_masks = rgb[holdout:], masks[holdout:]
    if not train_rgb:
        raise ValueError("No training images left after the hold-out split")
    net = load_segnet(args.resume) if args.resume else new_network(tcfg)
    images = np.stack([normalize_image(image) for image in train_rgb])
    losses = train(net, images, np.stack(train_masks), tcfg)
    if args.negatives:
        pool = _background_pool(args.negatives, tcfg.input_size, rng)
        negatives = np.stack([normalize_image(image) for image, _ in negative_samples(pool, len(train_rgb), rng)])
        losses += fine_tune(net, images, np.stack(train_masks), negatives, tcfg)
    save_segnet(net, args.out)
    logger.info("Wrote segnet checkpoint to %s (final loss %.5f)", args.out, losses[-1] if losses else float("nan"))
    if holdout:
        logger.info("Held-out IOU over %d images: %.4f", holdout, evaluate_iou(net, rgb[:holdout], masks[:holdout]))
    return 0


def cmd_infer_segnet(args: argparse.Namespace, cfg: Settings) -> int:
    net = load_segnet(args.model)
    image = to_rgb(load_image(args.image))
    crop = _square(image, net.input_size)
    prob = infer_probability_map(net, crop)
    save_probability(args.out, prob)
    logger.info("Wrote probability map to %s", args.out)
    if args.mask:
        mask = refine(
            prob,
            luma(crop),
            lam=cfg.graphcut_lambda,
            sigma=cfg.graphcut_sigma,
            epsilon=cfg.probability_epsilon,
            connectivity=cfg.connectivity,
        )
        save_mask(args.mask, mask)
        logger.info("Wrote refined mask to %s", args.mask)
    return 0


def cmd_synth_data(args: argparse.Namespace, cfg: Settings) -> int:
    rig = load_rig(args.rig)
    samples = gen_synthetic_dataset(rig, args.count, SynthConfig(image_size=args.size), np.random.default_rng(args.seed))
    save_dataset(samples, args.out)
    return 0


def _cascade_config(args: argparse.Namespace, cfg: Settings) -> CascadeConfig:
    return CascadeConfig(
        stages=args.T if args.T is not None else cfg.stages,
        ferns=args.K if args.K is not None else cfg.ferns,
        depth=args.F if args.F is not None else cfg.fern_depth,
        shrinkage=args.beta if args.beta is not None else cfg.shrinkage,
        feature_points=args.points if args.points is not None else cfg.feature_points,
        feature_sigma=cfg.feature_sigma,
        exclude_offface_pairs=args.exclude_offface,
        seed=args.seed,
        workers=args.workers,
    )


def _train_variant(samples, rig, ccfg: CascadeConfig, masked: bool, occlusion: bool, seed: int):
    training = build_regression_samples(
        samples, rig, PerturbRanges(), np.random.default_rng(seed), masked=masked, occlusion=occlusion
    )
    return train_cascade(training, rig, ccfg)


def cmd_train_regressor(args: argparse.Namespace, cfg: Settings) -> int:
    rig = load_rig(args.rig)
    samples = load_dataset(args.data, rig, limit=args.limit)
    model = _train_variant(samples, rig, _cascade_config(args, cfg), not args.unmasked, not args.no_occlusion, args.seed)
    save_cascade(model, args.out)
    logger.info("Wrote %d-stage cascade to %s", len(model.stages), args.out)
    return 0


def _read_landmarks(path: str) -> np.ndarray:
    values = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if values.shape[1] != 2:
        raise ValueError(f"{path}: expected one 'x y' pair per line, got {values.shape[1]} columns")
    return values


def cmd_track(args: argparse.Namespace, cfg: Settings) -> int:
    if args.prob_source:
        cfg = replace(cfg, prob_source=args.prob_source)
    if args.prob_dir:
        cfg = replace(cfg, prob_dir=args.prob_dir)
    if args.segnet:
        cfg = replace(cfg, segnet_checkpoint=args.segnet)
    rig = load_rig(args.rig)
    model = load_cascade(args.model)
    net = load_segnet(cfg.segnet_checkpoint) if cfg.prob_source == "net" and cfg.segnet_checkpoint else None
    source = make_source(cfg.prob_source, net=net, directory=cfg.prob_dir)
    paths = list_frames(args.frames)
    height, width = load_image(paths[0]).shape[:2]
    executor = None if args.sync else ThreadPoolExecutor(max_workers=max(1, cfg.identity_workers))
    try:
        if args.init_landmarks:
            state = init_from_landmarks(
                _read_landmarks(args.init_landmarks), rig, model, (width, height), executor=executor, cfg=cfg
            )
        else:
            if args.init:
                params = ShapeParams.from_text(Path(args.init).read_text())
            else:
                params = ShapeParams.neutral(
                    rig.n_expressions, rig.n_landmarks, rig.n_identity, focal=float(width), depth=args.depth
                )
            state = init_tracker(params, rig, model, (width, height), executor=executor, cfg=cfg)
        results = track_files(paths, source, state, args.out, cfg)
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    failed = sum(r.failed for r in results)
    mean_total = float(np.mean([r.timings.get("total", 0.0) for r in results]))
    logger.info("Tracked %d frames from %s, %d failed, %.1f ms/frame", len(results), args.frames, failed, mean_total * 1e3)
    return 0


def cmd_eval_occlusion(args: argparse.Namespace, cfg: Settings) -> int:
    rig = load_rig(args.rig)
    if args.masked_model and args.unmasked_model:
        masked, unmasked = load_cascade(args.masked_model), load_cascade(args.unmasked_model)
    elif args.data:
        samples = load_dataset(args.data, rig, limit=args.limit)
        ccfg = _cascade_config(args, cfg)
        masked = _train_variant(samples, rig, ccfg, True, True, args.seed)
        unmasked = _train_variant(samples, rig, ccfg, False, False, args.seed)
    else:
        raise ValueError("eval-occlusion needs --masked-model and --unmasked-model, or --data to train both")
    sequences = make_sweep_sequences(rig, args.sequences, args.frames, SynthConfig(image_size=args.size), args.seed)
    result = evaluate_occlusion_sweep(
        {"masked": (masked, True), "unmasked": (unmasked, False)},
        sequences,
        rig,
        coverages=args.coverages,
        color=args.color,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(result, out / "occlusion_sweep.csv")
    plot_sweep(result, out / "occlusion_sweep.png")
    return 0


def cmd_serve(args: argparse.Namespace, cfg: Settings) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port, log_level=(args.log_level or cfg.log_level).lower())
    return 0


def _regressor_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--T", type=int, default=None, help="cascade stages")
    parser.add_argument("--K", type=int, default=None, help="ferns per stage")
    parser.add_argument("--F", type=int, default=None, help="fern depth")
    parser.add_argument("--beta", type=float, default=None, help="fern bin shrinkage")
    parser.add_argument("--points", type=int, default=None, help="feature points per stage")
    parser.add_argument("--exclude-offface", action="store_true", help="skip feature pairs that mostly fall off the face")
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--limit", type=int, default=None, help="use only the first N dataset samples")
    parser.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key/value config file overriding the defaults")
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="python -m app", description="Segmentation-aware face capture toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-rig", parents=[common], help="write a procedural toy rig")
    p.add_argument("--out", required=True)
    p.add_argument("--expressions", type=int, default=46)
    p.add_argument("--identity", type=int, default=50)
    p.add_argument("--landmarks", type=int, default=73)
    p.add_argument("--grid", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_rig)

    p = sub.add_parser("refine", parents=[common], help="graph-cut refine a probability map")
    p.add_argument("--prob", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--connectivity", type=int, choices=[4, 8], default=None)
    p.add_argument("--width", type=int, default=None, help="upsample the mask to this width")
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("train-segnet", parents=[common], help="train the two-stream segmentation network")
    p.add_argument("--train-config", default=None, help="plain-text [train] config mirroring TrainConfig")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--data", default=None, help="synthetic dataset directory")
    group.add_argument("--blobs", type=int, default=200, help="train on N generated blob images")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--augment", action="store_true", help="add perturbed and occluded copies")
    p.add_argument("--negatives", type=int, default=0, help="fine-tune with negatives drawn from N backgrounds")
    p.add_argument("--holdout", type=float, default=0.1, help="fraction held out for IOU reporting")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--resume", default=None, help="continue from a checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_segnet)

    p = sub.add_parser("infer-segnet", parents=[common], help="face probability map for one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help=".pfm or 16-bit .pgm")
    p.add_argument("--mask", default=None, help="also write the graph-cut refined mask")
    p.set_defaults(func=cmd_infer_segnet)

    p = sub.add_parser("synth-data", parents=[common], help="render a synthetic face dataset")
    p.add_argument("--rig", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train-regressor", parents=[common], help="train the cascaded fern regressor")
    p.add_argument("--data", required=True)
    p.add_argument("--rig", required=True)
    p.add_argument("--unmasked", action="store_true", help="train without segmentation masks")
    p.add_argument("--no-occlusion", action="store_true", help="skip the occlusion-cropped copies")
    _regressor_options(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_regressor)

    p = sub.add_parser("track", parents=[common], help="track a frame sequence")
    p.add_argument("--frames", required=True, help="directory of frames or a glob pattern")
    p.add_argument("--rig", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--prob-source", choices=SOURCE_KINDS, default=None)
    p.add_argument("--prob-dir", default=None)
    p.add_argument("--segnet", default=None, help="segmentation checkpoint for --prob-source net")
    init = p.add_mutually_exclusive_group()
    init.add_argument("--init", default=None, help="first-frame shape parameter text file")
    init.add_argument("--init-landmarks", default=None, help="first-frame landmarks, one 'x y' per line")
    p.add_argument("--depth", type=float, default=0.3, help="initial depth when starting from the neutral shape")
    p.add_argument("--sync", action="store_true", help="run the identity solve inline")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval-occlusion", parents=[common], help="landmark error against occluder coverage")
    p.add_argument("--rig", required=True)
    p.add_argument("--masked-model", default=None)
    p.add_argument("--unmasked-model", default=None)
    p.add_argument("--data", default=None, help="train both variants from this dataset instead")
    _regressor_options(p)
    p.add_argument("--sequences", type=int, default=3)
    p.add_argument("--frames", type=int, default=180)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--coverages", type=float, nargs="+", default=list(DEFAULT_COVERAGES))
    p.add_argument("--color", type=float, default=128.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_occlusion)

    p = sub.add_parser("serve", parents=[common], help="run the HTTP control surface")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    cfg = _setup(args)
    try:
        return args.func(args, cfg)
    except (ValueError, RuntimeError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        logger.debug("Traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
