from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# All tensors are (N, C, H, W) float64.


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(x: np.ndarray, kernel: int) -> np.ndarray:
    # (N, C, Ho, Wo, k, k)
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))


def correlate(x: np.ndarray, weight: np.ndarray, pad: int = 0) -> np.ndarray:
    """Stride-1 cross-correlation; weight is (out, in, k, k)."""
    windows = _windows(_pad(x, pad), weight.shape[2])
    return np.einsum("nchwij,ocij->nohw", windows, weight, optimize=True)


def correlate_input_grad(dy: np.ndarray, weight: np.ndarray, pad: int) -> np.ndarray:
    kernel = weight.shape[2]
    flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    return correlate(_pad(dy, kernel - 1 - pad), flipped)


def dilate(x: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1), dtype=x.dtype)
    out[:, :, ::stride, ::stride] = x
    return out


def bilinear_kernel(size: int) -> np.ndarray:
    factor = (size + 1) // 2
    center = factor - 1 if size % 2 == 1 else factor - 0.5
    og = np.arange(size)
    filt = 1.0 - np.abs(og - center) / factor
    return np.outer(filt, filt)


class Layer(ABC):
    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.trainable = True

    @abstractmethod
    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        ...

    def zero_grad(self) -> None:
        for name, value in self.params.items():
            self.grads[name] = np.zeros_like(value)

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


class Conv2D(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, pad: int = 0, bias: bool = True) -> None:
        super().__init__()
        self.kernel = kernel
        self.pad = pad
        self.params["weight"] = np.zeros((out_channels, in_channels, kernel, kernel))
        if bias:
            self.params["bias"] = np.zeros(out_channels)
        self._x: Optional[np.ndarray] = None

    @property
    def fan_in(self) -> int:
        w = self.params["weight"]
        return int(w.shape[1] * w.shape[2] * w.shape[3])

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        y = correlate(x, self.params["weight"], self.pad)
        if "bias" in self.params:
            y = y + self.params["bias"][None, :, None, None]
        return y

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        windows = _windows(_pad(self._x, self.pad), self.kernel)
        self.grads["weight"] = np.einsum("nchwij,nohw->ocij", windows, dy, optimize=True)
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        return (correlate_input_grad(dy, self.params["weight"], self.pad),)


class TransposedConv2D(Layer):
    """Weight is (in, out, k, k); output side (H - 1) * stride + k - 2 * pad."""

    def __init__(
        self, in_channels: int, out_channels: int, kernel: int, stride: int = 1, pad: int = 0, bias: bool = True
    ) -> None:
        super().__init__()
        if pad > kernel - 1:
            raise ValueError(f"Padding {pad} too large for kernel {kernel}")
        self.kernel = kernel
        self.stride = stride
        self.pad = pad
        self.params["weight"] = np.zeros((in_channels, out_channels, kernel, kernel))
        if bias:
            self.params["bias"] = np.zeros(out_channels)
        self._x: Optional[np.ndarray] = None

    @property
    def fan_in(self) -> int:
        w = self.params["weight"]
        # input positions contributing to one output pixel
        return int(w.shape[0] * max(1, (w.shape[2] // self.stride) ** 2))

    def set_bilinear(self) -> None:
        w = self.params["weight"]
        w[...] = 0.0
        kernel = bilinear_kernel(self.kernel)
        for c in range(min(w.shape[0], w.shape[1])):
            w[c, c] = kernel
        if "bias" in self.params:
            self.params["bias"][...] = 0.0

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        weight = self.params["weight"][:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        y = correlate(dilate(x, self.stride), weight, self.kernel - 1 - self.pad)
        if "bias" in self.params:
            y = y + self.params["bias"][None, :, None, None]
        return y

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        x = self._x
        h, w = x.shape[2], x.shape[3]
        windows = _windows(_pad(dy, self.pad), self.kernel)[:, :, :: self.stride, :: self.stride][:, :, :h, :w]
        self.grads["weight"] = np.einsum("nchw,nohwij->coij", x, windows, optimize=True)
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        dx = np.einsum("nohwij,coij->nchw", windows, self.params["weight"], optimize=True)
        return (dx,)


class ReLU(Layer):
    def __init__(self) -> None:
        super().__init__()
        self.mask: Optional[np.ndarray] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0.0
        return np.where(self.mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        return (np.where(self.mask, dy, 0.0),)


class MaxPool2x2(Layer):
    """Records argmax switches (first maximum on ties) for the matching Unpool2x2."""

    def __init__(self) -> None:
        super().__init__()
        self.switches: Optional[np.ndarray] = None
        self.input_shape: Optional[Tuple[int, ...]] = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"Max pooling needs even spatial size, got {h}x{w}")
        self.input_shape = x.shape
        blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        self.switches = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.switches[..., None], axis=-1)[..., 0]

    def scatter(self, values: np.ndarray) -> np.ndarray:
        n, c, h, w = self.input_shape
        blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=values.dtype)
        np.put_along_axis(blocks, self.switches[..., None], values[..., None], axis=-1)
        return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)

    def gather(self, values: np.ndarray) -> np.ndarray:
        n, c, h, w = values.shape
        blocks = values.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
        return np.take_along_axis(blocks, self.switches[..., None], axis=-1)[..., 0]

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        return (self.scatter(dy),)


class Unpool2x2(Layer):
    def __init__(self, pool: MaxPool2x2) -> None:
        super().__init__()
        self.pool = pool

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.pool.switches is None or self.pool.switches.shape != x.shape:
            raise ValueError(f"Unpool input {x.shape} does not match recorded switches")
        return self.pool.scatter(x)

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        return (self.pool.gather(dy),)


class Add(Layer):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.shape != b.shape:
            raise ValueError(f"Skip fusion shapes differ: {a.shape} vs {b.shape}")
        return a + b

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        return dy, dy


class Concat(Layer):
    def __init__(self) -> None:
        super().__init__()
        self._split: Optional[int] = None

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        self._split = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, dy: np.ndarray) -> Tuple[np.ndarray, ...]:
        return dy[:, : self._split], dy[:, self._split :]


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)
