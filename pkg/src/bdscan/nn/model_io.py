"""Versioned binary model container.

Layout: magic "BSNN" | u32 format version | u32 header length | JSON header
(input shape, layer table, cut index) | little-endian float32 parameter blobs
in layer order (W then b per parameterized layer). Parameter shapes are not
stored: they are re-derived from the layer table.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ModelFormatError, ModelVersionError
from .layers import LayerSpec, output_shape
from .network import Network

MAGIC = b"BSNN"
FORMAT_VERSION = 1

_PARAM_ORDER = ("W", "b")


def save_model(net: Network, path: str | Path) -> None:
    header = {
        "input_shape": list(net.input_shape),
        "cut_index": net.cut_index,
        "layers": [spec.to_dict() for spec in net.layers],
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for params in net.params:
            for key in _PARAM_ORDER:
                if key in params:
                    f.write(np.ascontiguousarray(params[key], dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ModelFormatError(f"truncated model file while reading {what}")
    return data


def load_model(path: str | Path) -> Network:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise ModelFormatError("not a model file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version > FORMAT_VERSION:
            raise ModelVersionError(
                f"model format version {version} is newer than supported {FORMAT_VERSION}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header"))
            input_shape = tuple(int(v) for v in header["input_shape"])
            layers = [LayerSpec.from_dict(d) for d in header["layers"]]
            cut_index = header["cut_index"]
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"corrupt model header: {exc}") from exc
        params: list[dict[str, np.ndarray]] = []
        shape = input_shape
        for spec in layers:
            p: dict[str, np.ndarray] = {}
            if spec.kind == "conv2d":
                p["W"] = _read_tensor(f, (spec.kernel, spec.kernel, shape[2], spec.filters))
                p["b"] = _read_tensor(f, (spec.filters,))
            elif spec.kind == "dense":
                p["W"] = _read_tensor(f, (shape[0], spec.units))
                p["b"] = _read_tensor(f, (spec.units,))
            params.append(p)
            shape = output_shape(spec, shape)
        if f.read(1):
            raise ModelFormatError("trailing bytes after parameter blobs")
    return Network(input_shape, layers, params, cut_index)


def _read_tensor(f, shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape))
    data = _read_exact(f, 4 * n, f"tensor {shape}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).copy()
