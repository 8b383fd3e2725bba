from __future__ import annotations

import logging
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .models import BoundingBox, FormatError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def load_image(path: PathLike) -> np.ndarray:
    """Grayscale (H, W) or RGB (H, W, 3) float64 in [0, 255]."""
    with Image.open(path) as img:
        if img.mode in ("L", "RGB"):
            return np.asarray(img, dtype=np.float64)
        if img.mode in ("I;16", "I;16B", "I"):
            return np.asarray(img, dtype=np.float64) * (255.0 / 65535.0)
        return np.asarray(img.convert("RGB"), dtype=np.float64)


def save_gray(path: PathLike, image: np.ndarray) -> None:
    Image.fromarray(np.clip(np.rint(image), 0, 255).astype(np.uint8)).save(path)


def load_mask(path: PathLike) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) >= 128


def save_mask(path: PathLike, mask: np.ndarray) -> None:
    """PBM for .pbm paths, 8-bit grayscale (0 / 255) otherwise."""
    path = Path(path)
    data = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    img = Image.fromarray(data)
    if path.suffix.lower() == ".pbm":
        img = img.convert("1")
    img.save(path)


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as handle:
        kind = handle.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = handle.readline().split()
        scale_line = handle.readline().strip()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (IndexError, ValueError) as exc:
            raise FormatError(f"{path}: bad PFM header") from exc
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(handle.read(), dtype=dtype)
    expected = width * height * channels
    if data.size != expected:
        raise FormatError(f"{path}: expected {expected} floats, found {data.size}")
    shape = (height, width, channels) if channels == 3 else (height, width)
    # rows are stored bottom to top
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path: PathLike, values: np.ndarray) -> None:
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"PFM writer expects a 2-D map, got {values.shape}")
    height, width = values.shape
    with open(path, "wb") as handle:
        handle.write(f"Pf\n{width} {height}\n-1.0\n".encode("ascii"))
        handle.write(np.ascontiguousarray(np.flipud(values)).tobytes())


def load_probability(path: PathLike) -> np.ndarray:
    """PFM floats or 8/16-bit PGM scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        prob = read_pfm(path)
    else:
        with Image.open(path) as img:
            raw = np.asarray(img, dtype=np.float64)
            full_scale = 255.0 if img.mode == "L" else 65535.0
        prob = raw / full_scale
    return np.clip(prob, 0.0, 1.0)


def save_probability(path: PathLike, prob: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, prob)
        return
    # 16-bit PGM: Pillow writes mode "I" images with maxval 65535
    data = np.rint(np.clip(prob, 0.0, 1.0) * 65535.0).astype(np.int32)
    Image.fromarray(data, mode="I").save(path)


def to_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return image[..., :3]
    return np.repeat(image[..., None], 3, axis=2)


def crop_and_resize(image: np.ndarray, bbox: BoundingBox, size: int) -> np.ndarray:
    """Bilinear resample of the box region to size x size; samples outside the frame repeat the border."""
    image = np.asarray(image, dtype=np.float64)
    rows = bbox.y + (np.arange(size) + 0.5) * bbox.height / size - 0.5
    cols = bbox.x + (np.arange(size) + 0.5) * bbox.width / size - 0.5
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([grid_r, grid_c])
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    return np.stack(
        [ndimage.map_coordinates(image[..., c], coords, order=1, mode="nearest") for c in range(image.shape[2])],
        axis=2,
    )
