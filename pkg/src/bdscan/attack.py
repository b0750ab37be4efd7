"""Backdoor pattern crafting, embedding, training-set poisoning, and attack
evaluation.

Three embedding mechanisms are supported: additive perturbation, per-pixel
multiplicative factors, and local patch replacement through a blending mask.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigurationError, ModelFormatError, ModelVersionError
from .nn import Network, accuracy, predict

MECHANISMS = ("additive", "multiplicative", "patch")

_PATTERN_MAGIC = b"BSBP"
_PATTERN_VERSION = 1


@dataclass(frozen=True)
class BackdoorPattern:
    mechanism: str
    values: np.ndarray                 # additive v / multiplicative u / patch colors
    mask: np.ndarray | None = None     # patch only: (H, W) blend weights in [0, 1]

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ConfigurationError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "patch":
            if self.mask is None or self.mask.shape != self.values.shape[:2]:
                raise ConfigurationError("patch pattern needs a (H, W) mask")
            if self.mask.min() < 0 or self.mask.max() > 1:
                raise ConfigurationError("mask entries must lie in [0, 1]")
        elif self.mask is not None:
            raise ConfigurationError(f"{self.mechanism} pattern takes no mask")
        if self.mechanism == "additive" and np.abs(self.values).max(initial=0) > 1:
            raise ConfigurationError("additive perturbation entries must lie in [-1, 1]")
        if self.mechanism == "multiplicative" and self.values.min(initial=1) <= 0:
            raise ConfigurationError("multiplicative factors must be positive")

    def scaled(self, factor: float) -> "BackdoorPattern":
        if self.mechanism != "additive":
            raise ConfigurationError("only additive patterns can be rescaled")
        return BackdoorPattern("additive", self.values * factor)


@dataclass(frozen=True)
class AttackSpec:
    sources: tuple[int, ...]
    target: int
    pattern: BackdoorPattern
    n_poison: int
    seed: int = 0

    def __post_init__(self):
        if not self.sources:
            raise ConfigurationError("attack needs at least one source class")
        if self.target in self.sources:
            raise ConfigurationError("target class cannot be a source class")
        if self.n_poison < 0:
            raise ConfigurationError("n_poison must be nonnegative")


@dataclass(frozen=True)
class AttackReport:
    success_rate: float
    clean_accuracy: float
    collateral: dict[int, float]       # class -> rate, for classes outside sources+target

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "clean_accuracy": self.clean_accuracy,
            "collateral": {str(c): r for c, r in sorted(self.collateral.items())},
        }


# ---------------------------------------------------------------------------
# pattern crafting

def _jitter(rng: np.random.Generator, n: int) -> np.ndarray:
    # magnitudes stay similar across perturbed coordinates: reference x N(1, 0.05)
    return rng.normal(1.0, 0.05, size=n)


def _rescaled(values: np.ndarray, l2_target: float) -> np.ndarray:
    norm = float(np.linalg.norm(values))
    if norm == 0:
        raise ConfigurationError("cannot rescale an all-zero pattern")
    return values * (l2_target / norm)


def gen_sparse_pattern(shape: tuple[int, int, int], n_pixels: int, l2_target: float,
                       seed: int) -> BackdoorPattern:
    """Perturb one randomly-chosen channel of each of n_pixels random pixels,
    with random sign and jittered magnitude, rescaled to the requested L2 norm."""
    h, w, c = shape
    if n_pixels < 1 or n_pixels > h * w:
        raise ConfigurationError(f"n_pixels must lie in 1..{h * w}")
    if l2_target <= 0:
        raise ConfigurationError("l2_target must be positive")
    rng = np.random.default_rng(seed)
    flat = rng.choice(h * w, size=n_pixels, replace=False)
    chans = rng.integers(0, c, size=n_pixels)
    signs = rng.choice([-1.0, 1.0], size=n_pixels)
    v = np.zeros(shape, dtype=np.float64)
    v[flat // w, flat % w, chans] = signs * _jitter(rng, n_pixels)
    return BackdoorPattern("additive", _rescaled(v, l2_target).astype(np.float32))


def chessboard_cells(h: int, w: int) -> np.ndarray:
    """(H, W) bool grid where exactly one of any two adjacent pixels is set."""
    yy, xx = np.mgrid[0:h, 0:w]
    return (yy + xx) % 2 == 0


def gen_chessboard_pattern(shape: tuple[int, int, int], l2_target: float,
                           seed: int) -> BackdoorPattern:
    """Global pattern: chessboard cells perturbed positively in all channels,
    jittered magnitudes, rescaled to the requested L2 norm."""
    if l2_target <= 0:
        raise ConfigurationError("l2_target must be positive")
    h, w, c = shape
    rng = np.random.default_rng(seed)
    cells = chessboard_cells(h, w)
    v = np.zeros(shape, dtype=np.float64)
    v[cells] = _jitter(rng, int(cells.sum()) * c).reshape(-1, c)
    return BackdoorPattern("additive", _rescaled(v, l2_target).astype(np.float32))


def gen_multiplicative_chessboard(shape: tuple[int, int, int],
                                  factor: float = 1.02) -> BackdoorPattern:
    """Per-pixel factor `factor` on chessboard cells (all channels), 1 elsewhere."""
    if factor <= 0:
        raise ConfigurationError("factor must be positive")
    h, w, c = shape
    u = np.ones(shape, dtype=np.float32)
    u[chessboard_cells(h, w)] = factor
    return BackdoorPattern("multiplicative", u)


def gen_patch_pattern(shape: tuple[int, int, int], patch_size: int,
                      seed: int) -> BackdoorPattern:
    """Small square replacement patch with a fixed random color at a random
    location (binary mask)."""
    h, w, c = shape
    if not (1 <= patch_size <= min(h, w)):
        raise ConfigurationError(f"patch_size must lie in 1..{min(h, w)}")
    rng = np.random.default_rng(seed)
    top = rng.integers(0, h - patch_size + 1)
    left = rng.integers(0, w - patch_size + 1)
    mask = np.zeros((h, w), dtype=np.float32)
    mask[top:top + patch_size, left:left + patch_size] = 1.0
    values = np.zeros(shape, dtype=np.float32)
    values[top:top + patch_size, left:left + patch_size] = rng.uniform(0.2, 1.0, size=c)
    return BackdoorPattern("patch", values, mask)


# ---------------------------------------------------------------------------
# embedding / poisoning / evaluation

def embed(x: np.ndarray, pattern: BackdoorPattern) -> np.ndarray:
    """Apply a pattern to a single image or a batch; output stays in [0, 1]."""
    shape = pattern.values.shape
    if x.shape != shape and x.shape[1:] != shape:
        raise ConfigurationError(f"image shape {x.shape} does not match pattern {shape}")
    if pattern.mechanism == "additive":
        return np.clip(x + pattern.values, 0.0, 1.0).astype(x.dtype)
    if pattern.mechanism == "multiplicative":
        return np.clip(x * pattern.values, 0.0, 1.0).astype(x.dtype)
    m = pattern.mask[..., None]
    return (x * (1.0 - m) + pattern.values * m).astype(x.dtype)


@dataclass(frozen=True)
class PoisonResult:
    dataset: Dataset
    source_indices: np.ndarray      # indices into the original dataset
    appended: slice                 # location of the poisoned items in `dataset`


def poison(ds: Dataset, spec: AttackSpec) -> PoisonResult:
    """Append n_poison embedded source-class images relabeled to the target.

    The poison budget is split evenly across source classes; original items
    are untouched and the sampled source indices are recorded for audit.
    """
    for c in list(spec.sources) + [spec.target]:
        if not (0 <= c < ds.num_classes):
            raise ConfigurationError(f"class {c} out of range")
    rng = np.random.default_rng(spec.seed)
    shares = np.full(len(spec.sources), spec.n_poison // len(spec.sources))
    shares[: spec.n_poison % len(spec.sources)] += 1
    picks = []
    for c, share in zip(spec.sources, shares):
        idx = ds.indices_of(c)
        if len(idx) < share:
            raise ConfigurationError(
                f"source class {c} has {len(idx)} items, fewer than the {share} to poison")
        picks.append(rng.choice(idx, size=share, replace=False))
    src = np.concatenate(picks) if picks else np.empty(0, dtype=np.int64)
    crafted = embed(ds.images[src], spec.pattern) if len(src) else \
        np.empty((0,) + ds.image_shape, dtype=ds.images.dtype)
    images = np.concatenate([ds.images, crafted], axis=0)
    labels = np.concatenate([ds.labels, np.full(len(src), spec.target, dtype=np.int64)])
    return PoisonResult(Dataset(images, labels, ds.num_classes), src,
                        slice(len(ds), len(ds) + len(src)))


def evaluate_attack(net: Network, test: Dataset, spec: AttackSpec) -> AttackReport:
    """Attack success on embedded source images, clean accuracy, and per-class
    collateral damage on the remaining classes' embedded images."""
    src_mask = np.isin(test.labels, spec.sources)
    triggered = embed(test.images[src_mask], spec.pattern)
    success = float(np.mean(predict(net, triggered) == spec.target)) if src_mask.any() else 0.0
    clean_acc = accuracy(net, test.images, test.labels)
    collateral = {}
    for c in range(test.num_classes):
        if c == spec.target or c in spec.sources:
            continue
        imgs = test.class_images(c)
        if len(imgs) == 0:
            continue
        collateral[c] = float(np.mean(predict(net, embed(imgs, spec.pattern)) == spec.target))
    return AttackReport(success, clean_acc, collateral)


# ---------------------------------------------------------------------------
# binary pattern container: magic | u32 version | u32 header len | JSON header
# | little-endian float32 tensors (values, then mask for patch patterns)

def save_pattern(pattern: BackdoorPattern, path: str | Path) -> None:
    header = {
        "mechanism": pattern.mechanism,
        "shape": list(pattern.values.shape),
        "has_mask": pattern.mask is not None,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PATTERN_MAGIC)
        f.write(struct.pack("<I", _PATTERN_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(pattern.values, dtype="<f4").tobytes())
        if pattern.mask is not None:
            f.write(np.ascontiguousarray(pattern.mask, dtype="<f4").tobytes())


def load_pattern(path: str | Path) -> BackdoorPattern:
    data = Path(path).read_bytes()
    if data[:4] != _PATTERN_MAGIC:
        raise ModelFormatError("not a pattern file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version > _PATTERN_VERSION:
        raise ModelVersionError(f"pattern format version {version} unsupported")
    (hlen,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + hlen])
        shape = tuple(int(v) for v in header["shape"])
        mechanism = header["mechanism"]
        has_mask = bool(header["has_mask"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt pattern header: {exc}") from exc
    off = 12 + hlen
    n = int(np.prod(shape))
    if len(data) < off + 4 * n:
        raise ModelFormatError("truncated pattern file")
    values = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).copy()
    mask = None
    if has_mask:
        off += 4 * n
        m = shape[0] * shape[1]
        if len(data) < off + 4 * m:
            raise ModelFormatError("truncated pattern file (mask)")
        mask = np.frombuffer(data, dtype="<f4", count=m, offset=off).reshape(shape[:2]).copy()
    return BackdoorPattern(mechanism, values, mask)
