"""Dataset ingestion, synthetic data generation, and detection-set sampling.

Images are channels-last float arrays in [0, 1]. On disk, datasets use the
CIFAR-10 binary record layout (1 label byte + channel-planar pixel bytes);
synthetic datasets add a JSON sidecar with their geometry and seed.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError
from .nn import Network, predict

CIFAR10_SHAPE = (32, 32, 3)
_CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
_CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray          # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray          # (N,) int64
    num_classes: int

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ConfigurationError("images/labels length mismatch")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigurationError("labels out of range")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def indices_of(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)

    def class_images(self, c: int) -> np.ndarray:
        return self.images[self.labels == c]

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------------------
# binary record IO (CIFAR-10 layout)

def _decode_records(raw: bytes, h: int, w: int, c: int, num_classes: int) -> Dataset:
    rec = 1 + h * w * c
    if len(raw) == 0 or len(raw) % rec != 0:
        raise DataFormatError(f"file length {len(raw)} is not a multiple of record size {rec}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = arr[:, 0].astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        raise DataFormatError(f"label byte {labels.max()} >= class count {num_classes}")
    planes = arr[:, 1:].reshape(-1, c, h, w)            # channel-planar on disk
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return Dataset(images, labels, num_classes)


def _encode_records(ds: Dataset) -> bytes:
    h, w, c = ds.image_shape
    quant = np.rint(ds.images * 255.0).astype(np.uint8)
    planes = quant.transpose(0, 3, 1, 2).reshape(len(ds), -1)
    out = np.empty((len(ds), 1 + h * w * c), dtype=np.uint8)
    out[:, 0] = ds.labels.astype(np.uint8)
    out[:, 1:] = planes
    return out.tobytes()


def load_cifar10(directory: str | Path, split: str = "train") -> Dataset:
    """Load the standard CIFAR-10 binary batches (3073-byte records)."""
    directory = Path(directory)
    names = {"train": _CIFAR_TRAIN_FILES, "test": _CIFAR_TEST_FILES}.get(split)
    if names is None:
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    chunks = []
    for name in names:
        path = directory / name
        if not path.exists():
            raise DataFormatError(f"missing CIFAR-10 batch file {path}")
        chunks.append(path.read_bytes())
    h, w, c = CIFAR10_SHAPE
    return _decode_records(b"".join(chunks), h, w, c, num_classes=10)


def save_dataset(ds: Dataset, prefix: str | Path) -> None:
    """Write `<prefix>.bin` records plus a `<prefix>.meta.json` sidecar."""
    prefix = Path(prefix)
    h, w, c = ds.image_shape
    prefix.with_suffix(".bin").write_bytes(_encode_records(ds))
    meta = {"K": ds.num_classes, "H": h, "W": w, "C": c, "count": len(ds)}
    prefix.with_suffix(".meta.json").write_text(json.dumps(meta))


def load_dataset(prefix: str | Path) -> Dataset:
    prefix = Path(prefix)
    try:
        meta = json.loads(prefix.with_suffix(".meta.json").read_text())
        k, h, w, c = meta["K"], meta["H"], meta["W"], meta["C"]
    except (FileNotFoundError, KeyError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"bad dataset sidecar for {prefix}: {exc}") from exc
    return _decode_records(prefix.with_suffix(".bin").read_bytes(), h, w, c, k)


# ---------------------------------------------------------------------------
# synthetic data

_SHAPE_CYCLE = ("disk", "square", "cross", "triangle")


def _shape_mask(kind: str, h: int, w: int, cx: float, cy: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    dx, dy = xx - cx, yy - cy
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if kind == "cross":
        arm = max(r / 3.0, 1.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | \
               ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "triangle":
        # upward triangle: width grows linearly from apex at cy - r
        t = (yy - (cy - r)) / 2.0
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= t)
    raise ConfigurationError(f"unknown shape {kind!r}")


def _class_styles(k: int) -> list[tuple[str, float]]:
    """(shape, hue) per class. The last class reuses the first class's shape
    with a nearby hue so at least one pair has nonzero natural confusion."""
    styles = []
    for c in range(k):
        shape = _SHAPE_CYCLE[c % len(_SHAPE_CYCLE)]
        hue = c / k
        styles.append((shape, hue))
    if k >= 4:
        styles[k - 1] = (_SHAPE_CYCLE[0], (1.0 - 0.35 / k) % 1.0)
    return styles


def generate_synthetic(num_classes: int, n_per_class: int, h: int, w: int,
                       seed: int) -> Dataset:
    """Colored geometric shapes on noisy backgrounds, one style per class.

    Deterministic given the seed; pixel values land on the 1/255 grid so the
    binary record round trip is lossless.
    """
    if num_classes < 3:
        raise ConfigurationError("need at least 3 classes")
    if n_per_class < 1:
        raise ConfigurationError("n_per_class must be positive")
    if h < 8 or w < 8:
        raise ConfigurationError("images must be at least 8x8")
    rng = np.random.default_rng(seed)
    styles = _class_styles(num_classes)
    images = np.empty((num_classes * n_per_class, h, w, 3), dtype=np.uint8)
    labels = np.empty(num_classes * n_per_class, dtype=np.int64)
    base_r = 0.27 * min(h, w)
    i = 0
    for c, (shape, hue) in enumerate(styles):
        for _ in range(n_per_class):
            img = rng.integers(0, 77, size=(h, w, 3)).astype(np.float64)   # dim noise floor
            r = base_r * rng.uniform(0.8, 1.2)
            cx = w / 2 + rng.uniform(-0.14, 0.14) * w
            cy = h / 2 + rng.uniform(-0.14, 0.14) * h
            mask = _shape_mask(shape, h, w, cx, cy, r)
            jhue = (hue + rng.uniform(-0.02, 0.02)) % 1.0
            rgb = colorsys.hsv_to_rgb(jhue, rng.uniform(0.75, 0.95), rng.uniform(0.70, 1.0))
            color = 255.0 * np.asarray(rgb)
            img[mask] = color + rng.uniform(-20, 20, size=(int(mask.sum()), 3))
            images[i] = np.clip(img, 0, 255).astype(np.uint8)
            labels[i] = c
            i += 1
    return Dataset(images.astype(np.float32) / 255.0, labels, num_classes)


def sample_detection_set(ds: Dataset, n_per_class: int, seed: int) -> Dataset:
    """Stratified sample without replacement: exactly n_per_class per class."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.num_classes):
        idx = ds.indices_of(c)
        if len(idx) < n_per_class:
            raise ConfigurationError(
                f"class {c} has {len(idx)} items, fewer than requested {n_per_class}")
        picks.append(rng.choice(idx, size=n_per_class, replace=False))
    return ds.subset(np.concatenate(picks))


def relabel_by_classifier(ds: Dataset, net: Network, batch_size: int = 256) -> Dataset:
    """Replace labels by the classifier's own predictions (for unlabeled
    detection sets: the predicted class is used as the class grouping)."""
    preds = np.empty(len(ds), dtype=np.int64)
    for start in range(0, len(ds), batch_size):
        preds[start:start + batch_size] = predict(net, ds.images[start:start + batch_size])
    return Dataset(ds.images, preds, ds.num_classes)
