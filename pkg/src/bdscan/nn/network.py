"""Sequential network: construction, inference, and input gradients.

A network is an ordered list of LayerSpecs whose final layer is a softmax
over the class set. An optional cut index splits the stack into a feature
extractor (layers before the cut) and a head (layers from the cut on), so a
perturbation search can run in the internal feature space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .layers import LayerSpec, backward_layer, forward_layer, init_params, output_shape


@dataclass
class Network:
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    cut_index: int | None = None

    @property
    def num_classes(self) -> int:
        return self.shapes()[-1][0]

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (index 0 is the input shape)."""
        shapes = [tuple(self.input_shape)]
        for spec in self.layers:
            shapes.append(output_shape(spec, shapes[-1]))
        return shapes

    def copy(self) -> "Network":
        return Network(
            input_shape=tuple(self.input_shape),
            layers=list(self.layers),
            params=[{k: v.copy() for k, v in p.items()} for p in self.params],
            cut_index=self.cut_index,
        )

    def astype(self, dtype) -> "Network":
        net = self.copy()
        net.params = [{k: v.astype(dtype) for k, v in p.items()} for p in net.params]
        return net

    @property
    def dtype(self):
        for p in self.params:
            if p:
                return next(iter(p.values())).dtype
        return np.dtype(np.float32)


def build_network(input_shape: tuple[int, int, int], layers: list[LayerSpec], seed: int = 0,
                  cut_index: int | None = None, dtype=np.float32) -> Network:
    """Construct a network with seeded uniform fan-in initialization."""
    if len(input_shape) != 3:
        raise ConfigurationError(f"input shape must be (H, W, C), got {input_shape}")
    if not layers or layers[-1].kind != "softmax":
        raise ConfigurationError("final layer must be softmax")
    if cut_index is not None and not (0 <= cut_index < len(layers)):
        raise ConfigurationError(f"cut_index {cut_index} out of range for {len(layers)} layers")
    rng = np.random.default_rng(seed)
    params = []
    shape = tuple(input_shape)
    for spec in layers:
        params.append(init_params(spec, shape, rng, dtype=dtype))
        shape = output_shape(spec, shape)
    return Network(tuple(input_shape), list(layers), params, cut_index)


def reference_layers(num_classes: int) -> list[LayerSpec]:
    """The desk-scale reference architecture: two small conv blocks and a
    dense softmax head. Trains in minutes on CPU yet learns backdoors reliably."""
    return [
        LayerSpec("conv2d", filters=8, kernel=3, stride=1),
        LayerSpec("relu"),
        LayerSpec("conv2d", filters=16, kernel=3, stride=2),
        LayerSpec("relu"),
        LayerSpec("flatten"),
        LayerSpec("dense", units=num_classes),
        LayerSpec("softmax"),
    ]


def reference_network(input_shape: tuple[int, int, int], num_classes: int,
                      seed: int = 0) -> Network:
    # cut after the first conv layer: feature-space search runs on its output
    return build_network(input_shape, reference_layers(num_classes), seed=seed, cut_index=1)


def _check_batch(net: Network, batch: np.ndarray, start_layer: int) -> None:
    expect = net.shapes()[start_layer]
    if batch.ndim != len(expect) + 1 or tuple(batch.shape[1:]) != tuple(expect):
        raise ConfigurationError(
            f"batch shape {batch.shape} incompatible with layer-{start_layer} input {expect}")


def _run_forward(net: Network, batch: np.ndarray, start_layer: int, keep_caches: bool):
    x = batch
    caches = []
    for spec, params in zip(net.layers[start_layer:], net.params[start_layer:]):
        x, cache = forward_layer(spec, params, x)
        if keep_caches:
            caches.append(cache)
    return x, caches


def forward(net: Network, batch: np.ndarray, start_layer: int = 0) -> np.ndarray:
    """Class posteriors for a batch. `start_layer` > 0 feeds internal features
    directly to the head (the f2 part of a cut network)."""
    _check_batch(net, batch, start_layer)
    if not np.all(np.isfinite(batch)):
        raise ConfigurationError("batch contains non-finite values")
    out, _ = _run_forward(net, batch, start_layer, keep_caches=False)
    return out


def features(net: Network, batch: np.ndarray) -> np.ndarray:
    """Activations entering the cut layer (the f1 part of a cut network)."""
    if net.cut_index is None:
        raise ConfigurationError("network has no cut_index set")
    _check_batch(net, batch, 0)
    x = batch
    for spec, params in zip(net.layers[:net.cut_index], net.params[:net.cut_index]):
        x, _ = forward_layer(spec, params, x)
    return x


def predict(net: Network, batch: np.ndarray, start_layer: int = 0) -> np.ndarray:
    return np.argmax(forward(net, batch, start_layer=start_layer), axis=1)


def accuracy(net: Network, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(net, images) == labels))


def input_gradient(net: Network, batch: np.ndarray, target_class: int,
                   from_layer: int | None = None) -> np.ndarray:
    """Gradient of -(mean posterior of `target_class`) with respect to the batch.

    With `from_layer` set (it must equal the network's cut index), the batch is
    interpreted as the internal features entering the head and the gradient is
    taken with respect to those features.
    """
    start = 0
    if from_layer is not None:
        if net.cut_index is None:
            raise ConfigurationError("from_layer given but network has no cut_index")
        if from_layer != net.cut_index:
            raise ConfigurationError(
                f"from_layer {from_layer} must equal the network cut_index {net.cut_index}")
        start = from_layer
    _check_batch(net, batch, start)
    if not (0 <= target_class < net.num_classes):
        raise ConfigurationError(f"target class {target_class} out of range")
    posts, caches = _run_forward(net, batch, start, keep_caches=True)
    n = batch.shape[0]
    dy = np.zeros_like(posts)
    dy[:, target_class] = -1.0 / n
    for spec, params, cache in zip(reversed(net.layers[start:]),
                                   reversed(net.params[start:]),
                                   reversed(caches)):
        dy, _ = backward_layer(spec, params, cache, dy, with_params=False)
    return dy
