from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict
from typing import Any, BinaryIO, Dict, List, Tuple

import numpy as np

from .facemodel import FaceRig
from .features import FeaturePointSet
from .images import PathLike
from .models import FormatError
from .regressor import CascadeConfig, CascadeModel, Fern, Stage
from .segnet import NetworkGraph, build_two_stream_net, linear_probe_net

logger = logging.getLogger(__name__)

RIG_MAGIC = b"FRIG"
CASCADE_MAGIC = b"FCAS"
SEGNET_MAGIC = b"FSEG"
VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "i4": np.dtype("<i4")}


def _write_container(path: PathLike, magic: bytes, meta: Dict[str, Any], arrays: List[Tuple[str, np.ndarray]]) -> None:
    """magic, version, header length, JSON header, then each array as little-endian float32 / int32."""
    entries = []
    for name, value in arrays:
        value = np.asarray(value)
        code = "i4" if np.issubdtype(value.dtype, np.integer) or value.dtype == bool else "f4"
        entries.append({"name": name, "dtype": code, "shape": list(value.shape)})
    header = json.dumps({"meta": meta, "arrays": entries}).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(magic)
        handle.write(struct.pack("<II", VERSION, len(header)))
        handle.write(header)
        for (_, value), entry in zip(arrays, entries):
            handle.write(np.ascontiguousarray(value, dtype=_DTYPES[entry["dtype"]]).tobytes())


def _read_exact(handle: BinaryIO, size: int, path: PathLike) -> bytes:
    data = handle.read(size)
    if len(data) != size:
        raise FormatError(f"{path}: truncated file")
    return data


def _read_container(path: PathLike, magic: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    with open(path, "rb") as handle:
        found = handle.read(4)
        if found != magic:
            raise FormatError(f"{path}: expected magic {magic!r}, found {found!r}")
        version, header_size = struct.unpack("<II", _read_exact(handle, 8, path))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        try:
            header = json.loads(_read_exact(handle, header_size, path).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: corrupt header") from exc
        arrays: Dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise FormatError(f"{path}: unknown dtype {entry['dtype']}")
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(handle, count * dtype.itemsize, path)
            value = np.frombuffer(raw, dtype=dtype).reshape(shape)
            arrays[entry["name"]] = value.astype(np.int64 if entry["dtype"] == "i4" else np.float64)
        if handle.read(1):
            raise FormatError(f"{path}: trailing bytes after the last array")
    return header["meta"], arrays


def save_rig(rig: FaceRig, path: PathLike) -> None:
    meta = {
        "vertices": rig.vertex_count,
        "expressions": rig.n_expressions,
        "identity": rig.n_identity,
        "landmarks": rig.n_landmarks,
        "triangles": int(len(rig.triangles)),
        "eye_corners": list(rig.eye_corners),
    }
    _write_container(
        path,
        RIG_MAGIC,
        meta,
        [
            ("core_tensor", rig.core_tensor),
            ("mean_landmarks", rig.mean_landmarks),
            ("landmark_indices", rig.landmark_indices),
            ("triangles", rig.triangles),
        ],
    )
    logger.info("Saved rig (V=%d, n=%d, n_id=%d, m=%d) to %s", *(meta[k] for k in ("vertices", "expressions", "identity", "landmarks")), path)


def load_rig(path: PathLike) -> FaceRig:
    meta, arrays = _read_container(path, RIG_MAGIC)
    core = arrays["core_tensor"]
    expected = (3 * meta["vertices"], meta["expressions"] + 1, meta["identity"] + 1)
    if core.shape != expected:
        raise FormatError(f"{path}: core tensor {core.shape} does not match header {expected}")
    if arrays["landmark_indices"].shape != (meta["landmarks"],):
        raise FormatError(f"{path}: landmark count does not match header")
    if arrays["triangles"].shape[0] != meta["triangles"]:
        raise FormatError(f"{path}: triangle count does not match header")
    try:
        return FaceRig(
            core_tensor=core,
            mean_landmarks=arrays["mean_landmarks"],
            landmark_indices=arrays["landmark_indices"],
            triangles=arrays["triangles"],
            eye_corners=tuple(meta["eye_corners"]),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_cascade(model: CascadeModel, path: PathLike) -> None:
    meta = {
        "config": asdict(model.config),
        "n_expressions": model.n_expressions,
        "n_landmarks": model.n_landmarks,
        "stages": len(model.stages),
        "training_errors": list(model.training_errors),
    }
    arrays: List[Tuple[str, np.ndarray]] = [("mean_landmarks", model.mean_landmarks)]
    for t, stage in enumerate(model.stages):
        arrays.extend(
            [
                (f"stage{t}.points", stage.points.points),
                (f"stage{t}.triangle_ids", stage.points.triangle_ids),
                (f"stage{t}.barycentric", stage.points.barycentric),
                (f"stage{t}.triangles", stage.points.triangles),
                (f"stage{t}.pairs", np.stack([fern.pairs for fern in stage.ferns])),
                (f"stage{t}.thresholds", np.stack([fern.thresholds for fern in stage.ferns])),
                (f"stage{t}.outputs", np.stack([fern.outputs for fern in stage.ferns])),
            ]
        )
    _write_container(path, CASCADE_MAGIC, meta, arrays)
    logger.info("Saved cascade with %d stages to %s", len(model.stages), path)


def load_cascade(path: PathLike) -> CascadeModel:
    meta, arrays = _read_container(path, CASCADE_MAGIC)
    config = CascadeConfig(**meta["config"])
    stages = []
    for t in range(int(meta["stages"])):
        points = FeaturePointSet(
            points=arrays[f"stage{t}.points"],
            triangle_ids=arrays[f"stage{t}.triangle_ids"],
            barycentric=arrays[f"stage{t}.barycentric"],
            triangles=arrays[f"stage{t}.triangles"],
        )
        pairs = arrays[f"stage{t}.pairs"]
        thresholds = arrays[f"stage{t}.thresholds"]
        outputs = arrays[f"stage{t}.outputs"]
        if not (len(pairs) == len(thresholds) == len(outputs)):
            raise FormatError(f"{path}: stage {t} fern tables disagree in length")
        ferns = [Fern(pairs=pairs[k], thresholds=thresholds[k], outputs=outputs[k]) for k in range(len(pairs))]
        stages.append(Stage(points=points, ferns=ferns))
    model = CascadeModel(
        stages=stages,
        mean_landmarks=arrays["mean_landmarks"],
        config=config,
        n_expressions=int(meta["n_expressions"]),
        n_landmarks=int(meta["n_landmarks"]),
        training_errors=list(meta["training_errors"]),
    )
    for t, stage in enumerate(model.stages):
        for fern in stage.ferns:
            if fern.outputs.shape[1] != model.dimension:
                raise FormatError(f"{path}: stage {t} outputs have dimension {fern.outputs.shape[1]}, expected {model.dimension}")
    return model


def save_segnet(net: NetworkGraph, path: PathLike) -> None:
    meta = {
        "kind": "probe" if net.node_names() == ["score"] else "two-stream",
        "scale": net.scale,
        "input_size": net.input_size,
        "trained": net.trained,
        "config": dict(net.config),
        "layers": [
            {"name": node.name, "type": type(node.layer).__name__, "stream": node.stream, "trainable": node.layer.trainable}
            for node in net.nodes
        ],
    }
    arrays = [(name, value) for name, _, _, value in net.parameters()]
    _write_container(path, SEGNET_MAGIC, meta, arrays)
    logger.info("Saved segnet checkpoint (%d parameters) to %s", net.parameter_count(), path)


def load_segnet(path: PathLike) -> NetworkGraph:
    meta, arrays = _read_container(path, SEGNET_MAGIC)
    if meta["kind"] == "probe":
        net = linear_probe_net(input_size=int(meta["input_size"]), in_channels=int(arrays["score.weight"].shape[1]))
    else:
        config = meta.get("config", {})
        net = build_two_stream_net(
            scale=float(meta["scale"]),
            input_size=int(meta["input_size"]),
            learn_upsampling=bool(config.get("learn_upsampling", True)),
            freeze_fcn=bool(config.get("freeze_fcn", False)),
        )
    if [layer["name"] for layer in meta["layers"]] != net.node_names():
        raise FormatError(f"{path}: layer list does not match the rebuilt network")
    for name, _, _, value in net.parameters():
        stored = arrays.get(name)
        if stored is None or stored.shape != value.shape:
            raise FormatError(f"{path}: tensor {name} missing or mis-shaped")
        value[...] = stored
    for layer, node in zip(meta["layers"], net.nodes):
        node.layer.trainable = bool(layer.get("trainable", True))
    net.trained = bool(meta["trained"])
    return net
