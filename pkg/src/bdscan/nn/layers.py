"""Layer definitions and forward/backward kernels.

Layers operate on channels-last batches (N, H, W, C). Each kernel returns a
cache from the forward pass that the backward kernels consume. Two backward
paths exist: input-only (cheap, used by the perturbation search) and
input+parameters (used by training).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..errors import ConfigurationError

LAYER_KINDS = ("conv2d", "relu", "flatten", "dense", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of the network: a kind plus its hyperparameters."""

    kind: str
    filters: int = 0        # conv2d: number of output channels
    kernel: int = 0         # conv2d: square kernel size
    stride: int = 1         # conv2d
    units: int = 0          # dense: output width

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.filters < 1 or self.kernel < 1 or self.stride < 1):
            raise ConfigurationError("conv2d needs filters >= 1, kernel >= 1, stride >= 1")
        if self.kind == "dense" and self.units < 1:
            raise ConfigurationError("dense needs units >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = {"kind": self.kind}
        if self.kind == "conv2d":
            d.update(filters=self.filters, kernel=self.kernel, stride=self.stride)
        elif self.kind == "dense":
            d.update(units=self.units)
        return d

    @staticmethod
    def from_dict(d: dict[str, Any]) -> "LayerSpec":
        return LayerSpec(
            kind=d["kind"],
            filters=int(d.get("filters", 0)),
            kernel=int(d.get("kernel", 0)),
            stride=int(d.get("stride", 1)),
            units=int(d.get("units", 0)),
        )


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Deterministic output shape of a layer, validating the input shape."""
    if spec.kind == "conv2d":
        if len(in_shape) != 3:
            raise ConfigurationError(f"conv2d expects (H, W, C) input, got {in_shape}")
        h, w, _ = in_shape
        k, s = spec.kernel, spec.stride
        if h < k or w < k:
            raise ConfigurationError(f"conv2d kernel {k} larger than input {in_shape}")
        return ((h - k) // s + 1, (w - k) // s + 1, spec.filters)
    if spec.kind == "relu":
        return in_shape
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if spec.kind == "dense":
        if len(in_shape) != 1:
            raise ConfigurationError(f"dense expects flat input, got {in_shape}")
        return (spec.units,)
    if spec.kind == "softmax":
        if len(in_shape) != 1:
            raise ConfigurationError(f"softmax expects flat input, got {in_shape}")
        return in_shape
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


def init_params(spec: LayerSpec, in_shape: tuple[int, ...], rng: np.random.Generator,
                dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform fan-in initialization: W ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), b = 0."""
    if spec.kind == "conv2d":
        c_in = in_shape[2]
        fan_in = spec.kernel * spec.kernel * c_in
        limit = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-limit, limit, size=(spec.kernel, spec.kernel, c_in, spec.filters))
        return {"W": w.astype(dtype), "b": np.zeros(spec.filters, dtype=dtype)}
    if spec.kind == "dense":
        fan_in = in_shape[0]
        limit = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, spec.units))
        return {"W": w.astype(dtype), "b": np.zeros(spec.units, dtype=dtype)}
    return {}


# ---------------------------------------------------------------------------
# conv2d via im2col

def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    """(N, H, W, C) -> (N, Ho, Wo, k*k*C) patch matrix."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    windows = windows[:, ::s, ::s]                    # (N, Ho, Wo, C, k, k)
    windows = windows.transpose(0, 1, 2, 4, 5, 3)     # (N, Ho, Wo, k, k, C)
    n, ho, wo = windows.shape[:3]
    return np.ascontiguousarray(windows).reshape(n, ho, wo, -1)


def _col2im(dcols: np.ndarray, x_shape: tuple[int, ...], k: int, s: int) -> np.ndarray:
    """Scatter-add patch gradients back to the input layout."""
    n, h, w, c = x_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    dcols = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros(x_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, i:i + ho * s:s, j:j + wo * s:s, :] += dcols[:, :, :, i, j, :]
    return dx


def _conv2d_forward(x, params, spec):
    k, s = spec.kernel, spec.stride
    cols = _im2col(x, k, s)                           # (N, Ho, Wo, k*k*C)
    w_mat = params["W"].reshape(-1, spec.filters)
    y = cols @ w_mat + params["b"]
    return y, (cols, x.shape)


def _conv2d_backward(dy, params, cache, spec, with_params):
    cols, x_shape = cache
    w_mat = params["W"].reshape(-1, spec.filters)
    dcols = dy @ w_mat.T
    dx = _col2im(dcols, x_shape, spec.kernel, spec.stride)
    if not with_params:
        return dx, None
    n, ho, wo, patch = cols.shape
    dw = cols.reshape(-1, patch).T @ dy.reshape(-1, spec.filters)
    grads = {"W": dw.reshape(params["W"].shape), "b": dy.sum(axis=(0, 1, 2))}
    return dx, grads


# ---------------------------------------------------------------------------

def forward_layer(spec: LayerSpec, params: dict[str, np.ndarray], x: np.ndarray):
    """Returns (output, cache)."""
    if spec.kind == "conv2d":
        return _conv2d_forward(x, params, spec)
    if spec.kind == "relu":
        return np.maximum(x, 0), (x > 0)
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1), x.shape
    if spec.kind == "dense":
        return x @ params["W"] + params["b"], x
    if spec.kind == "softmax":
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        y = e / e.sum(axis=1, keepdims=True)
        return y, y
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")


def backward_layer(spec: LayerSpec, params: dict[str, np.ndarray], cache, dy: np.ndarray,
                   with_params: bool):
    """Returns (dx, param_grads or None)."""
    if spec.kind == "conv2d":
        return _conv2d_backward(dy, params, cache, spec, with_params)
    if spec.kind == "relu":
        return dy * cache, None
    if spec.kind == "flatten":
        return dy.reshape(cache), None
    if spec.kind == "dense":
        x = cache
        dx = dy @ params["W"].T
        if not with_params:
            return dx, None
        return dx, {"W": x.T @ dy, "b": dy.sum(axis=0)}
    if spec.kind == "softmax":
        y = cache
        inner = (dy * y).sum(axis=1, keepdims=True)
        return y * (dy - inner), None
    raise ConfigurationError(f"unknown layer kind {spec.kind!r}")
