"""Mini-batch cross-entropy training with SGD or Adam.

Training is pure with respect to the input network (parameters are copied)
and bit-reproducible under a fixed seed: the seed drives initialization-free
choices only (shuffling, augmentation), and all arithmetic is plain numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigurationError, TrainingDivergedError
from .layers import backward_layer, forward_layer
from .network import Network

_LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"      # "sgd" | "adam"
    seed: int = 0
    augment: bool = False        # random horizontal flip

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("epochs >= 0, batch_size >= 1, learning_rate > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")


class _Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        self.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            for k in p:
                m[k] = self.b1 * m[k] + (1 - self.b1) * g[k]
                v[k] = self.b2 * v[k] + (1 - self.b2) * g[k] ** 2
                p[k] -= self.lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + self.eps)


class _Sgd:
    def __init__(self, params, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            for k in p:
                p[k] -= self.lr * g[k]


def _batch_step(net: Network, xb: np.ndarray, yb: np.ndarray):
    """Forward + cross-entropy backward; returns (loss_sum, per-layer grads)."""
    x = xb
    caches = []
    for spec, params in zip(net.layers, net.params):
        x, cache = forward_layer(spec, params, x)
        caches.append(cache)
    n = xb.shape[0]
    probs = x[np.arange(n), yb]
    loss_sum = float(-np.log(np.maximum(probs, _LOG_FLOOR)).sum())
    # d(mean CE)/d(posterior): -1/(N p_y) at the true class
    dy = np.zeros_like(x)
    dy[np.arange(n), yb] = -1.0 / (n * np.maximum(probs, _LOG_FLOOR))
    grads = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        dy, g = backward_layer(net.layers[i], net.params[i], caches[i], dy, with_params=True)
        grads[i] = g if g is not None else {}
    return loss_sum, grads


def train(net: Network, images: np.ndarray, labels: np.ndarray,
          cfg: TrainConfig) -> tuple[Network, list[float]]:
    """Train a copy of `net`; returns (trained network, mean loss per epoch)."""
    if images.shape[0] != labels.shape[0]:
        raise ConfigurationError("images and labels disagree on sample count")
    k = net.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ConfigurationError(f"labels must lie in 0..{k - 1}")
    net = net.copy()
    dtype = net.dtype
    rng = np.random.default_rng(cfg.seed)
    opt = (_Adam(net.params, cfg.learning_rate) if cfg.optimizer == "adam"
           else _Sgd(net.params, cfg.learning_rate))
    n = images.shape[0]
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = images[idx].astype(dtype, copy=True)
            if cfg.augment:
                flip = rng.random(len(idx)) < 0.5
                xb[flip] = xb[flip, :, ::-1, :]
            loss_sum, grads = _batch_step(net, xb, labels[idx])
            if not np.isfinite(loss_sum):
                raise TrainingDivergedError(epoch)
            opt.step(net.params, grads)
            total += loss_sum
        losses.append(total / n)
    return net, losses
