from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .models import UntrainedModelError
from .segnet_layers import (
    Add,
    Concat,
    Conv2D,
    Layer,
    MaxPool2x2,
    ReLU,
    TransposedConv2D,
    Unpool2x2,
    softmax,
)

logger = logging.getLogger(__name__)

VGG_BLOCKS: Tuple[Tuple[int, int], ...] = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
DENSE_WIDTH = 4096
HEADS = ("deconv", "fcn", "fused")

TRUNK = "trunk"
DECONV = "deconv-stream"
FCN = "fcn-stream"
FUSION = "fusion"


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: Tuple[str, ...]
    stream: str


@dataclass
class NetworkGraph:
    """Layers in execution order. Each node reads named values produced earlier; "input" is the image batch."""

    nodes: List[Node]
    heads: Dict[str, str]  # head name -> node producing its 2-channel logits
    scale: float = 1.0
    input_size: int = 128
    trained: bool = False
    config: Dict[str, object] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen = {"input"}
        for node in self.nodes:
            for name in node.inputs:
                if name not in seen:
                    raise ValueError(f"Node {node.name} reads {name} before it is produced")
            if node.name in seen:
                raise ValueError(f"Duplicate node name {node.name}")
            seen.add(node.name)
        for head, name in self.heads.items():
            if name not in seen:
                raise ValueError(f"Head {head} refers to unknown node {name}")
        self._values: Dict[str, np.ndarray] = {}

    def node(self, name: str) -> Node:
        for node in self.nodes:
            if node.name == name:
                return node
        raise KeyError(name)

    def node_names(self) -> List[str]:
        return [node.name for node in self.nodes]

    def parameters(self) -> Iterator[Tuple[str, Node, str, np.ndarray]]:
        for node in self.nodes:
            for pname, value in node.layer.params.items():
                yield f"{node.name}.{pname}", node, pname, value

    def parameter_count(self) -> int:
        return int(sum(node.layer.num_params() for node in self.nodes))

    def forward_logits(self, images: np.ndarray) -> Dict[str, np.ndarray]:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[2:] != (self.input_size, self.input_size):
            raise ValueError(f"Expected (N, C, {self.input_size}, {self.input_size}) input, got {images.shape}")
        values: Dict[str, np.ndarray] = {"input": images}
        for node in self.nodes:
            values[node.name] = node.layer.forward(*(values[name] for name in node.inputs))
        self._values = values
        return {head: values[name] for head, name in self.heads.items()}

    def backward(self, head_grads: Dict[str, np.ndarray]) -> None:
        """Accumulates parameter gradients from d(loss)/d(head logits)."""
        for node in self.nodes:
            node.layer.zero_grad()
        grads: Dict[str, np.ndarray] = {}
        for head, dlogits in head_grads.items():
            name = self.heads[head]
            grads[name] = grads[name] + dlogits if name in grads else dlogits
        for node in reversed(self.nodes):
            dy = grads.pop(node.name, None)
            if dy is None:
                continue
            for name, dx in zip(node.inputs, node.layer.backward(dy)):
                grads[name] = grads[name] + dx if name in grads else dx

    def kink_signature(self) -> List[np.ndarray]:
        """ReLU masks and pool switches of the last forward pass."""
        signature = []
        for node in self.nodes:
            if isinstance(node.layer, ReLU):
                signature.append(node.layer.mask.copy())
            elif isinstance(node.layer, MaxPool2x2):
                signature.append(node.layer.switches.copy())
        return signature

    def activation(self, name: str) -> np.ndarray:
        return self._values[name]


def forward(net: NetworkGraph, image: np.ndarray) -> Dict[str, np.ndarray]:
    """Per-head 2-class probability maps, (N, 2, H, W); a single (3, H, W) image yields N = 1."""
    logits = net.forward_logits(image)
    return {head: softmax(value) for head, value in logits.items()}


def infer_probability_map(net: NetworkGraph, crop: np.ndarray) -> np.ndarray:
    """Face probability (channel 1 of the fused head) for an (H, W, 3) crop in [0, 255]."""
    if not net.trained:
        raise UntrainedModelError("Segmentation network has not been trained or loaded")
    crop = np.asarray(crop, dtype=np.float64)
    if crop.ndim != 3 or crop.shape[2] != 3:
        raise ValueError(f"Expected an RGB crop, got {crop.shape}")
    outputs = forward(net, normalize_image(crop))
    return outputs["fused"][0, 1]


def normalize_image(rgb: np.ndarray) -> np.ndarray:
    """(H, W, 3) in [0, 255] -> (3, H, W) roughly zero-mean."""
    return (np.asarray(rgb, dtype=np.float64).transpose(2, 0, 1) - 127.5) / 127.5


def scaled_width(channels: int, scale: float) -> int:
    return max(1, int(round(channels * scale)))


def build_two_stream_net(
    scale: float = 1.0 / 16.0,
    input_size: int = 128,
    learn_upsampling: bool = True,
    freeze_fcn: bool = False,
) -> NetworkGraph:
    if input_size <= 0 or input_size % 32:
        raise ValueError(f"input_size must be a positive multiple of 32, got {input_size}")
    if scale < 1.0 / 64.0:
        raise ValueError(f"Channel scale {scale} below 1/64")

    nodes: List[Node] = []

    def add(name: str, layer: Layer, inputs: Sequence[str], stream: str) -> str:
        nodes.append(Node(name, layer, tuple(inputs), stream))
        return name

    # shared VGG trunk
    prev, channels = "input", 3
    pools: Dict[int, Tuple[str, MaxPool2x2, int]] = {}
    block_widths: List[List[int]] = []
    for b, (width, repeats) in enumerate(VGG_BLOCKS, start=1):
        out = scaled_width(width, scale)
        block_widths.append([channels] + [out] * repeats)
        for r in range(1, repeats + 1):
            prev = add(f"conv{b}_{r}", Conv2D(channels, out, 3, pad=1), [prev], TRUNK)
            prev = add(f"relu{b}_{r}", ReLU(), [prev], TRUNK)
            channels = out
        pool = MaxPool2x2()
        prev = add(f"pool{b}", pool, [prev], TRUNK)
        pools[b] = (prev, pool, channels)

    # first dense layer as a convolution spanning the whole trunk output
    dense_kernel = input_size // 32
    dense = scaled_width(DENSE_WIDTH, scale)
    fc6 = add("fc6", Conv2D(channels, dense, dense_kernel), ["pool5"], TRUNK)
    fc6 = add("relu6", ReLU(), [fc6], TRUNK)

    # mirrored deconvolution stream
    prev = add("deconv6", TransposedConv2D(dense, channels, dense_kernel), [fc6], DECONV)
    prev = add("derelu6", ReLU(), [prev], DECONV)
    for b in range(len(VGG_BLOCKS), 0, -1):
        _, pool, _ = pools[b]
        prev = add(f"unpool{b}", Unpool2x2(pool), [prev], DECONV)
        widths = block_widths[b - 1]
        repeats = len(widths) - 1
        width = widths[1]
        # the last deconvolution of a block narrows to the previous block's width, except in block 1
        final = widths[0] if b > 1 else width
        for r in range(1, repeats + 1):
            out_ch = final if r == repeats else width
            prev = add(f"deconv{b}_{r}", TransposedConv2D(width, out_ch, 3, pad=1), [prev], DECONV)
            prev = add(f"derelu{b}_{r}", ReLU(), [prev], DECONV)
    score_deconv = add("score_deconv", Conv2D(block_widths[0][1], 2, 1), [prev], DECONV)

    # FCN-8s style skip fusion
    score5 = add("score_pool5", Conv2D(pools[5][2], 2, 1), ["pool5"], FCN)
    up5 = add("upscore_pool5", TransposedConv2D(2, 2, 4, stride=2, pad=1, bias=False), [score5], FCN)
    score4 = add("score_pool4", Conv2D(pools[4][2], 2, 1), ["pool4"], FCN)
    fuse4 = add("fuse_pool4", Add(), [up5, score4], FCN)
    up4 = add("upscore_pool4", TransposedConv2D(2, 2, 4, stride=2, pad=1, bias=False), [fuse4], FCN)
    score3 = add("score_pool3", Conv2D(pools[3][2], 2, 1), ["pool3"], FCN)
    fuse3 = add("fuse_pool3", Add(), [up4, score3], FCN)
    score_fcn = add("upscore8", TransposedConv2D(2, 2, 16, stride=8, pad=4, bias=False), [fuse3], FCN)

    concat = add("concat", Concat(), [score_deconv, score_fcn], FUSION)
    fused = add("score_fused", Conv2D(4, 2, 1), [concat], FUSION)

    net = NetworkGraph(
        nodes=nodes,
        heads={"deconv": score_deconv, "fcn": score_fcn, "fused": fused},
        scale=scale,
        input_size=input_size,
        config={"learn_upsampling": learn_upsampling, "freeze_fcn": freeze_fcn},
    )
    for node in net.nodes:
        if isinstance(node.layer, TransposedConv2D) and node.stream == FCN:
            node.layer.trainable = learn_upsampling and not freeze_fcn
        elif node.stream == FCN and freeze_fcn:
            node.layer.trainable = False
    check_shapes(net)
    return net


def check_shapes(net: NetworkGraph) -> Dict[str, Tuple[int, ...]]:
    """Dry-run a zero image and assert the trunk chain and head shapes."""
    size = net.input_size
    net.forward_logits(np.zeros((1, 3, size, size)))
    shapes = {name: value.shape for name, value in net._values.items()}
    if any(name.startswith("pool") for name in shapes):
        chain = [shapes["input"][2]] + [shapes[f"pool{b}"][2] for b in range(1, len(VGG_BLOCKS) + 1)]
        expected = [size // (2**b) for b in range(len(VGG_BLOCKS) + 1)]
        assert chain == expected, f"trunk spatial chain {chain} != {expected}"
        assert shapes["fc6"][2:] == (1, 1), f"dense output {shapes['fc6']}"
        assert shapes["concat"] == (1, 4, size, size), f"concat {shapes['concat']}"
    for head, name in net.heads.items():
        assert shapes[name] == (1, 2, size, size), f"head {head} produces {shapes[name]}"
    return shapes


def initialize(net: NetworkGraph, rng: np.random.Generator, init_std: Optional[float] = None) -> None:
    """
    Zero-mean Gaussian weights, std sqrt(2 / fan_in) unless init_std is given; zero biases. Frozen FCN upsamplers
    and all FCN upsamplers at start are bilinear.
    """
    for node in net.nodes:
        layer = node.layer
        if isinstance(layer, TransposedConv2D) and node.stream == FCN:
            layer.set_bilinear()
            continue
        if "weight" not in layer.params:
            continue
        std = init_std if init_std is not None else np.sqrt(2.0 / max(1, layer.fan_in))
        layer.params["weight"][...] = rng.normal(0.0, std, size=layer.params["weight"].shape)
        if "bias" in layer.params:
            layer.params["bias"][...] = 0.0
    logger.info("Initialised segnet scale=%s with %d parameters", net.scale, net.parameter_count())


def linear_probe_net(input_size: int = 8, in_channels: int = 3) -> NetworkGraph:
    """One 1x1 convolution feeding all three heads; handy for exact gradient checks."""
    conv = Conv2D(in_channels, 2, 1)
    return NetworkGraph(
        nodes=[Node("score", conv, ("input",), FUSION)],
        heads={head: "score" for head in HEADS},
        scale=1.0,
        input_size=input_size,
    )
