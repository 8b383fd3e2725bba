from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .config import coerce_value, read_key_values
from .maskrefine import iou
from .models import TrainingDivergedError
from .segnet import HEADS, NetworkGraph, build_two_stream_net, forward, initialize, normalize_image
from .segnet_layers import softmax

logger = logging.getLogger(__name__)

CE_EPSILON = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    weight_deconv: float = 0.5
    weight_fcn: float = 0.5
    weight_fused: float = 1.0
    batch_size: int = 4
    iterations: int = 2000
    fine_tune_learning_rate: float = 0.001
    fine_tune_iterations: int = 500
    init_std: Optional[float] = None
    scale: float = 1.0 / 16.0
    input_size: int = 128
    learn_upsampling: bool = True
    freeze_fcn: bool = False
    seed: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.learning_rate <= 0.0 or self.fine_tune_learning_rate <= 0.0:
            raise ValueError("Learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"Momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0.0:
            raise ValueError("Weight decay must be non-negative")
        if min(self.weight_deconv, self.weight_fcn, self.weight_fused) < 0.0:
            raise ValueError("Loss weights must be non-negative")
        if self.batch_size <= 0 or self.iterations < 0:
            raise ValueError("batch_size must be positive and iterations non-negative")

    @property
    def loss_weights(self) -> Dict[str, float]:
        return {"deconv": self.weight_deconv, "fcn": self.weight_fcn, "fused": self.weight_fused}

    @classmethod
    def from_file(cls, path: Path) -> "TrainConfig":
        raw = read_key_values(path, section="train")
        base = cls()
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"Unknown train config keys: {', '.join(unknown)}")
        values = {}
        for name, text in raw.items():
            if name == "init_std":
                values[name] = None if text.strip().lower() in ("", "none") else float(text)
            else:
                values[name] = coerce_value(getattr(base, name), text)
        return replace(base, **values)


def _truth_batch(truth: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    truth = np.asarray(truth, dtype=bool)
    if truth.ndim == 2:
        truth = truth[None]
    if truth.shape != (shape[0],) + tuple(shape[2:]):
        raise ValueError(f"Truth masks {truth.shape} do not match outputs {shape}")
    return truth


def cross_entropy(prob: np.ndarray, truth: np.ndarray) -> float:
    """Mean per-pixel cross-entropy of (N, 2, H, W) probabilities against face truth."""
    truth = _truth_batch(truth, prob.shape)
    picked = np.where(truth, prob[:, 1], prob[:, 0])
    return float(np.mean(-np.log(np.clip(picked, CE_EPSILON, 1.0 - CE_EPSILON))))


def loss(outputs: Dict[str, np.ndarray], truth: np.ndarray, cfg: TrainConfig) -> float:
    weights = cfg.loss_weights
    return float(sum(weights[head] * cross_entropy(outputs[head], truth) for head in HEADS))


def loss_and_gradients(net: NetworkGraph, images: np.ndarray, truth: np.ndarray, cfg: TrainConfig) -> float:
    logits = net.forward_logits(images)
    probs = {head: softmax(value) for head, value in logits.items()}
    total = loss(probs, truth, cfg)
    truth = _truth_batch(truth, probs["fused"].shape)
    onehot = np.stack([~truth, truth], axis=1).astype(np.float64)
    count = float(truth.size)
    head_grads = {}
    for head, weight in cfg.loss_weights.items():
        if weight == 0.0:
            continue
        picked = np.where(truth, probs[head][:, 1], probs[head][:, 0])
        active = ((picked > CE_EPSILON) & (picked < 1.0 - CE_EPSILON))[:, None]
        head_grads[head] = np.where(active, weight * (probs[head] - onehot) / count, 0.0)
    net.backward(head_grads)
    return total


def momentum_update(
    param: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    learning_rate: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """Classic momentum, in place: v <- mu v - lr (g + wd theta); theta <- theta + v."""
    velocity *= momentum
    velocity -= learning_rate * (grad + weight_decay * param)
    param += velocity


def sgd_step(
    net: NetworkGraph,
    batch: Tuple[np.ndarray, np.ndarray],
    cfg: TrainConfig,
    learning_rate: Optional[float] = None,
    velocity: Optional[Dict[str, np.ndarray]] = None,
) -> float:
    images, truth = batch
    if len(images) == 0:
        raise ValueError("Empty training batch")
    value = loss_and_gradients(net, images, truth, cfg)
    bad = [name for name, node, pname, _ in net.parameters() if not np.all(np.isfinite(node.layer.grads[pname]))]
    if bad or not np.isfinite(value):
        raise TrainingDivergedError(f"Non-finite loss {value} or gradients in: {', '.join(bad) or 'none'}")
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    state = velocity if velocity is not None else net.velocity
    for name, node, pname, param in net.parameters():
        if not node.layer.trainable:
            continue
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(param)
        momentum_update(param, node.layer.grads[pname], v, lr, cfg.momentum, cfg.weight_decay)
    net.trained = True
    return value


def _batches(count: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(count)
        for start in range(0, count - batch_size + 1, batch_size):
            yield order[start : start + batch_size]


def train(
    net: NetworkGraph,
    images: np.ndarray,
    masks: np.ndarray,
    cfg: TrainConfig,
    iterations: Optional[int] = None,
    learning_rate: Optional[float] = None,
    callback: Optional[Callable[[int, float], None]] = None,
) -> List[float]:
    """images (N, 3, H, W) already normalised, masks (N, H, W). Returns the per-iteration losses."""
    images = np.asarray(images, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if len(images) == 0 or len(images) != len(masks):
        raise ValueError(f"Need matching non-empty images/masks, got {len(images)} / {len(masks)}")
    rng = np.random.default_rng(cfg.seed)
    total = cfg.iterations if iterations is None else iterations
    batch_size = min(cfg.batch_size, len(images))
    losses: List[float] = []
    batches = _batches(len(images), batch_size, rng)
    for it in range(total):
        idx = next(batches)
        value = sgd_step(net, (images[idx], masks[idx]), cfg, learning_rate=learning_rate)
        losses.append(value)
        if cfg.log_every and (it % cfg.log_every == 0 or it == total - 1):
            logger.info("segnet iteration %d/%d loss=%.5f", it + 1, total, value)
        if callback:
            callback(it, value)
    return losses


def fine_tune(
    net: NetworkGraph,
    images: np.ndarray,
    masks: np.ndarray,
    negatives: np.ndarray,
    cfg: TrainConfig,
) -> List[float]:
    """Continue training at the fine-tune rate with negatives (all non-face) balanced 1:1 against positives."""
    if len(negatives) == 0:
        raise ValueError("Fine-tuning needs at least one negative sample")
    rng = np.random.default_rng(cfg.seed + 1)
    pick = rng.choice(len(negatives), size=len(images), replace=len(negatives) < len(images))
    neg = np.asarray(negatives, dtype=np.float64)[pick]
    all_images = np.concatenate([np.asarray(images, dtype=np.float64), neg])
    all_masks = np.concatenate([np.asarray(masks, dtype=bool), np.zeros((len(neg),) + masks.shape[1:], dtype=bool)])
    logger.info("Fine-tuning on %d positives + %d negatives", len(images), len(neg))
    return train(
        net,
        all_images,
        all_masks,
        cfg,
        iterations=cfg.fine_tune_iterations,
        learning_rate=cfg.fine_tune_learning_rate,
    )


def gradient_check(
    net: NetworkGraph,
    sample: Tuple[np.ndarray, np.ndarray],
    cfg: Optional[TrainConfig] = None,
    step: float = 1e-4,
    samples: int = 60,
    rng: Optional[np.random.Generator] = None,
    max_parameters: int = 10_000,
    min_magnitude: float = 0.0,
) -> float:
    """
    Max relative error |analytic - central difference| / max(|analytic|, |cd|, 1e-8) over sampled parameters.
    Entries whose perturbation flips a ReLU mask or a pooling switch are skipped. NaN when every sampled entry
    was skipped.
    """
    if net.parameter_count() > max_parameters:
        raise ValueError(f"Gradient check limited to {max_parameters} parameters, net has {net.parameter_count()}")
    cfg = cfg or TrainConfig()
    rng = rng or np.random.default_rng(0)
    image, truth = sample
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[None]

    loss_and_gradients(net, image, truth, cfg)
    base_signature = net.kink_signature()
    analytic = {name: node.layer.grads[pname].copy() for name, node, pname, _ in net.parameters()}
    entries = [(name, param, i) for name, _, _, param in net.parameters() for i in range(param.size)]
    chosen = rng.choice(len(entries), size=min(samples, len(entries)), replace=False)

    def evaluate() -> Tuple[float, bool]:
        value = loss(forward(net, image), truth, cfg)
        same = all(np.array_equal(a, b) for a, b in zip(base_signature, net.kink_signature()))
        return value, same

    worst = 0.0
    checked = 0
    for pick in chosen:
        name, param, i = entries[pick]
        flat = param.reshape(-1)
        original = flat[i]
        flat[i] = original + step
        plus, same_plus = evaluate()
        flat[i] = original - step
        minus, same_minus = evaluate()
        flat[i] = original
        if not (same_plus and same_minus):
            continue
        numeric = (plus - minus) / (2.0 * step)
        exact = analytic[name].reshape(-1)[i]
        scale = max(abs(exact), abs(numeric), 1e-8)
        if max(abs(exact), abs(numeric)) < min_magnitude:
            continue
        checked += 1
        worst = max(worst, abs(exact - numeric) / scale)
    if checked == 0:
        logger.warning("Gradient check: all %d sampled entries were skipped", len(chosen))
        return float("nan")
    logger.info("Gradient check: %d entries checked, max relative error %.3g", checked, worst)
    return worst


def evaluate_iou(net: NetworkGraph, rgb_images: List[np.ndarray], masks: List[np.ndarray]) -> float:
    scores = []
    for rgb, truth in zip(rgb_images, masks):
        prob = forward(net, normalize_image(rgb))["fused"][0, 1]
        scores.append(iou(prob >= 0.5, truth))
    return float(np.mean(scores)) if scores else 0.0


def new_network(cfg: TrainConfig) -> NetworkGraph:
    net = build_two_stream_net(
        scale=cfg.scale,
        input_size=cfg.input_size,
        learn_upsampling=cfg.learn_upsampling,
        freeze_fcn=cfg.freeze_fcn,
    )
    initialize(net, np.random.default_rng(cfg.seed), init_std=cfg.init_std)
    return net
