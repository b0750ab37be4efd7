"""Per-class-pair perturbation search.

For each ordered class pair (s, t) the optimizer starts from a zero
perturbation and follows the gradient of a surrogate objective until the
perturbation flips at least a target fraction of class-s samples to class t,
recording the (size, misclassified-fraction) trace at every iterate. Four
surrogates are available: the plain mean target posterior ("j"), the mean
restricted to samples not yet flipped ("jp"), the mean restricted to samples
the classifier gets right on clean inputs ("jc"), and the feature-space
variant applied at the network's cut layer ("internal").
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import (
    ConfigurationError,
    DegenerateClassError,
    ModelFormatError,
    ModelVersionError,
    NoRemainingSamplesError,
    PairOptimizationError,
)
from .nn import Network, features
from .nn.layers import backward_layer, forward_layer

OBJECTIVES = ("j", "jp", "jc", "internal")
NORMS = ("l1", "l2")

# image-space size cap: 10x the desk reference attack strength (see experiment.py)
DEFAULT_IMAGE_MAX_NORM = 6.0
# feature-space cap is data-dependent: 10x the median clean feature norm
FEATURE_MAX_NORM_FACTOR = 10.0

_STEP_DIVISOR = 16.0     # line-search safety factor: keeps traces fine-grained


@dataclass(frozen=True)
class OptimizerConfig:
    pi: float = 0.8                  # target group-misclassification fraction
    step_size: float | None = None   # None: geometric line search at iteration 0
    max_norm: float | None = None    # None: space-dependent default
    max_iters: int = 3000
    objective: str = "j"
    norm: str = "l2"
    cut_layer: int | None = None     # internal objective only; must match net.cut_index

    def __post_init__(self):
        if not (0.0 < self.pi <= 1.0):
            raise ConfigurationError("pi must lie in (0, 1]")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigurationError("step_size must be positive")
        if self.max_norm is not None and self.max_norm <= 0:
            raise ConfigurationError("max_norm must be positive")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be positive")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")
        if self.norm not in NORMS:
            raise ConfigurationError(f"norm must be one of {NORMS}")


@dataclass
class PerturbationTrace:
    source: int
    target: int
    sizes_l1: np.ndarray          # d(v) at each iterate, both metrics recorded
    sizes_l2: np.ndarray
    fractions: np.ndarray         # misclassification fraction at each iterate
    final_v: np.ndarray | None    # perturbation at termination
    converged: bool               # target fraction reached
    stop_reason: str              # "target" | "norm" | "iters"
    space: str                    # "image" | "feature"

    def sizes(self, norm: str = "l2") -> np.ndarray:
        return self.sizes_l1 if norm == "l1" else self.sizes_l2

    def d_final(self, norm: str = "l2") -> float:
        return float(self.sizes(norm)[-1])

    @property
    def initial_fraction(self) -> float:
        return float(self.fractions[0])

    def truncated(self, pi: float) -> "PerturbationTrace":
        """The trace Algorithm-1 would have produced with a smaller target
        fraction: cut at the first iterate whose fraction reaches `pi`."""
        hits = np.flatnonzero(self.fractions >= pi)
        if len(hits) == 0:
            return self
        end = int(hits[0]) + 1
        keep_v = self.final_v if end == len(self.fractions) else None
        return PerturbationTrace(self.source, self.target,
                                 self.sizes_l1[:end].copy(), self.sizes_l2[:end].copy(),
                                 self.fractions[:end].copy(), keep_v,
                                 True, "target", self.space)


@dataclass
class PairSweepResult:
    num_classes: int
    config: OptimizerConfig
    traces: list[PerturbationTrace]
    failures: list[dict]

    def trace(self, s: int, t: int) -> PerturbationTrace:
        for tr in self.traces:
            if tr.source == s and tr.target == t:
                return tr
        raise KeyError(f"no trace for pair ({s}, {t})")

    def truncated(self, pi: float) -> "PairSweepResult":
        if pi > self.config.pi:
            raise ConfigurationError(
                f"cannot raise the target fraction ({pi} > swept {self.config.pi})")
        return PairSweepResult(self.num_classes, replace(self.config, pi=pi),
                               [tr.truncated(pi) for tr in self.traces], list(self.failures))


# ---------------------------------------------------------------------------
# objective machinery

def _norm(v: np.ndarray, kind: str) -> float:
    return float(np.abs(v).sum()) if kind == "l1" else float(np.sqrt((v * v).sum()))


def _head_posteriors(net: Network, batch: np.ndarray, start: int, keep: bool):
    x = batch
    caches = []
    for spec, params in zip(net.layers[start:], net.params[start:]):
        x, cache = forward_layer(spec, params, x)
        if keep:
            caches.append(cache)
    return x, caches


def _input_grad_from(net: Network, dpost: np.ndarray, caches, start: int) -> np.ndarray:
    dy = dpost
    for spec, params, cache in zip(reversed(net.layers[start:]),
                                   reversed(net.params[start:]),
                                   reversed(caches)):
        dy, _ = backward_layer(spec, params, cache, dy, with_params=False)
    return dy


class _PairProblem:
    """Fused evaluation state for one (source, target) search: a single
    forward pass yields the misclassified fraction, the objective value, and
    (via one backward pass) its gradient with respect to the perturbation."""

    def __init__(self, net: Network, images: np.ndarray, source: int, target: int,
                 cfg: OptimizerConfig):
        if images.shape[0] == 0:
            raise ConfigurationError(f"no clean samples for class {source}")
        self.net = net
        self.target = target
        self.objective = cfg.objective
        if cfg.objective == "internal":
            if net.cut_index is None:
                raise ConfigurationError("internal objective needs a network cut_index")
            if cfg.cut_layer is not None and cfg.cut_layer != net.cut_index:
                raise ConfigurationError(
                    f"cut_layer {cfg.cut_layer} must equal the network cut_index {net.cut_index}")
            self.start = net.cut_index
            self.base = features(net, images).astype(np.float64)
        else:
            self.start = 0
            self.base = images.astype(np.float64)
        self.fixed_weights = None
        if cfg.objective == "jc":
            posts, _ = _head_posteriors(net, images.astype(self.net.dtype), 0, keep=False)
            correct = np.argmax(posts, axis=1) == source
            if not correct.any():
                raise DegenerateClassError(
                    f"classifier is wrong on every clean sample of class {source}")
            self.fixed_weights = correct

    def shape(self) -> tuple[int, ...]:
        return self.base.shape[1:]

    def evaluate(self, v: np.ndarray, need_grad: bool = True):
        """Returns (value, grad or None, fraction_classified_to_target)."""
        n = self.base.shape[0]
        if self.start == 0:
            raw = self.base + v
            batch = np.clip(raw, 0.0, 1.0)
        else:
            raw = batch = self.base + v
        posts, caches = _head_posteriors(self.net, batch.astype(self.net.dtype),
                                         self.start, keep=need_grad)
        posts = posts.astype(np.float64)
        preds = np.argmax(posts, axis=1)
        rho = float(np.mean(preds == self.target))
        if self.objective == "jp":
            active = preds != self.target
            if not active.any():
                raise NoRemainingSamplesError(
                    "every sample already classified to the target")
        elif self.objective == "jc":
            active = self.fixed_weights
        else:
            active = np.ones(n, dtype=bool)
        m = int(active.sum())
        value = float(-posts[active, self.target].sum() / m)
        if not need_grad:
            return value, None, rho
        dpost = np.zeros_like(posts, dtype=self.net.dtype)
        dpost[active, self.target] = -1.0 / m
        dinput = _input_grad_from(self.net, dpost, caches, self.start).astype(np.float64)
        if self.start == 0:
            dinput *= (raw >= 0.0) & (raw <= 1.0)    # clipped pixels are flat
        grad = dinput.sum(axis=0)
        return value, grad, rho


def misclass_fraction(net: Network, images: np.ndarray, v: np.ndarray, target: int,
                      mode: str = "image") -> float:
    """Fraction of `images` classified to `target` once `v` is applied (added
    and clipped in image mode; added to cut-layer features in feature mode)."""
    if mode not in ("image", "feature"):
        raise ConfigurationError(f"mode must be 'image' or 'feature', got {mode!r}")
    if mode == "image":
        batch = np.clip(images + v, 0.0, 1.0).astype(net.dtype)
        start = 0
    else:
        if net.cut_index is None:
            raise ConfigurationError("feature mode needs a network cut_index")
        batch = (features(net, images) + v).astype(net.dtype)
        start = net.cut_index
    posts, _ = _head_posteriors(net, batch, start, keep=False)
    return float(np.mean(np.argmax(posts, axis=1) == target))


def _objective(net, images, v, target, cfg_kwargs) -> tuple[float, np.ndarray]:
    problem = _PairProblem(net, images, cfg_kwargs.pop("source", -1), target,
                           OptimizerConfig(**cfg_kwargs))
    value, grad, _ = problem.evaluate(np.asarray(v, dtype=np.float64))
    return value, grad


def objective_j(net: Network, images: np.ndarray, v: np.ndarray,
                target: int) -> tuple[float, np.ndarray]:
    """Negative mean target posterior over all samples (clipped embedding)."""
    return _objective(net, images, v, target, {"objective": "j"})


def objective_jp(net: Network, images: np.ndarray, v: np.ndarray,
                 target: int) -> tuple[float, np.ndarray]:
    """As objective_j but restricted to samples not yet classified to the
    target, so already-flipped samples stop contributing gradient."""
    return _objective(net, images, v, target, {"objective": "jp"})


def objective_jc(net: Network, images: np.ndarray, source: int, v: np.ndarray,
                 target: int) -> tuple[float, np.ndarray]:
    """As objective_j but restricted to the clean samples the classifier
    assigns to `source` (the subset is fixed at v = 0)."""
    return _objective(net, images, v, target, {"objective": "jc", "source": source})


def objective_internal(net: Network, images: np.ndarray, v: np.ndarray,
                       target: int) -> tuple[float, np.ndarray]:
    """Feature-space variant: v perturbs the cut-layer activations, unclipped."""
    return _objective(net, images, v, target, {"objective": "internal"})


# ---------------------------------------------------------------------------
# the search itself

def median_feature_norm(net: Network, images: np.ndarray, norm: str = "l2") -> float:
    feats = features(net, images)
    flat = feats.reshape(len(feats), -1)
    if norm == "l1":
        return float(np.median(np.abs(flat).sum(axis=1)))
    return float(np.median(np.sqrt((flat * flat).sum(axis=1))))


def resolve_max_norm(cfg: OptimizerConfig, net: Network, images: np.ndarray) -> float:
    if cfg.max_norm is not None:
        return cfg.max_norm
    if cfg.objective == "internal":
        return FEATURE_MAX_NORM_FACTOR * median_feature_norm(net, images, cfg.norm)
    return DEFAULT_IMAGE_MAX_NORM


def _line_search_step(problem: _PairProblem, value0: float, grad0: np.ndarray,
                      max_norm: float) -> float:
    """Coarse geometric search at iteration 0: find the largest step (by the
    norm it moves v) that still decreases the objective, then back off."""
    gnorm = float(np.sqrt((grad0 * grad0).sum()))
    if gnorm == 0 or not np.isfinite(gnorm):
        raise PairOptimizationError(problem.base.shape[0] and -1 or -1, problem.target,
                                    "zero or non-finite gradient at start")
    best = None
    for k in range(-26, 8):
        step_norm = 2.0 ** k
        if step_norm > max_norm:
            break
        delta = step_norm / gnorm
        value, _, _ = problem.evaluate(-delta * grad0, need_grad=False)
        if value < value0 - 1e-15:
            best = delta
    if best is None:
        raise PairOptimizationError(-1, problem.target,
                                    "line search found no decreasing step")
    return best / _STEP_DIVISOR


def optimize_pair(net: Network, images: np.ndarray, source: int, target: int,
                  cfg: OptimizerConfig) -> PerturbationTrace:
    """Gradient descent on the configured surrogate for one ordered pair,
    starting from v = 0, until the misclassified fraction reaches cfg.pi or a
    size/iteration cap fires. Records (size, fraction) at every iterate."""
    if source == target:
        raise ConfigurationError("source and target must differ")
    problem = _PairProblem(net, images, source, target, cfg)
    space = "feature" if cfg.objective == "internal" else "image"
    max_norm = resolve_max_norm(cfg, net, images)
    v = np.zeros(problem.shape(), dtype=np.float64)
    sizes_l1 = [0.0]
    sizes_l2 = [0.0]
    step = cfg.step_size
    value, grad, rho = problem.evaluate(v)
    fractions = [rho]
    if rho >= cfg.pi:
        return PerturbationTrace(source, target, np.array(sizes_l1), np.array(sizes_l2),
                                 np.array(fractions), v, True, "target", space)
    try:
        if step is None:
            step = _line_search_step(problem, value, grad, max_norm)
    except PairOptimizationError as exc:
        raise PairOptimizationError(source, target, str(exc)) from exc
    stop_reason = "iters"
    converged = False
    for _ in range(cfg.max_iters):
        if not np.all(np.isfinite(grad)):
            raise PairOptimizationError(source, target, "non-finite gradient")
        v = v - step * grad
        value, grad, rho = problem.evaluate(v)
        sizes_l1.append(_norm(v, "l1"))
        sizes_l2.append(_norm(v, "l2"))
        fractions.append(rho)
        if rho >= cfg.pi:
            converged, stop_reason = True, "target"
            break
        if _norm(v, cfg.norm) > max_norm:
            stop_reason = "norm"
            break
    return PerturbationTrace(source, target, np.array(sizes_l1), np.array(sizes_l2),
                             np.array(fractions), v, converged, stop_reason, space)


def sweep_all_pairs(net: Network, detection_set: Dataset,
                    cfg: OptimizerConfig) -> PairSweepResult:
    """Run the pair search for every ordered class pair (s-major order).

    Per-pair failures are collected rather than aborting the sweep. Each pair
    is an independent pure computation over the shared read-only network.
    """
    k = detection_set.num_classes
    sizes = detection_set.class_sizes()
    if (sizes == 0).any():
        raise ConfigurationError(f"detection set misses classes {np.flatnonzero(sizes == 0)}")
    if cfg.max_norm is None:
        cfg = replace(cfg, max_norm=resolve_max_norm(cfg, net, detection_set.images))
    traces: list[PerturbationTrace] = []
    failures: list[dict] = []
    for s in range(k):
        images = detection_set.class_images(s)
        for t in range(k):
            if t == s:
                continue
            try:
                traces.append(optimize_pair(net, images, s, t, cfg))
            except (PairOptimizationError, DegenerateClassError) as exc:
                failures.append({"source": s, "target": t, "error": str(exc)})
    return PairSweepResult(k, cfg, traces, failures)


# ---------------------------------------------------------------------------
# persistence: JSON trace document + estimated-perturbation tensors in the
# binary pattern container (mechanism tag "estimate")

def save_perturbation(v: np.ndarray, space: str, path: str | Path) -> None:
    header = {"mechanism": "estimate", "space": space, "shape": list(v.shape)}
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(b"BSBP")
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_perturbation(path: str | Path) -> tuple[np.ndarray, str]:
    data = Path(path).read_bytes()
    if data[:4] != b"BSBP":
        raise ModelFormatError("not a pattern file (bad magic)")
    (version,) = struct.unpack("<I", data[4:8])
    if version > 1:
        raise ModelVersionError(f"pattern format version {version} unsupported")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header.get("mechanism") != "estimate":
        raise ModelFormatError("not an estimated-perturbation file")
    shape = tuple(int(x) for x in header["shape"])
    n = int(np.prod(shape))
    if len(data) < 12 + hlen + 4 * n:
        raise ModelFormatError("truncated pattern file")
    v = np.frombuffer(data, dtype="<f4", count=n, offset=12 + hlen).reshape(shape).copy()
    return v, header.get("space", "image")


def save_sweep(result: PairSweepResult, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pat_dir = out_dir / "perturbations"
    pat_dir.mkdir(exist_ok=True)
    records = []
    for tr in result.traces:
        name = f"pair_s{tr.source}_t{tr.target}.pat"
        if tr.final_v is not None:
            save_perturbation(tr.final_v, tr.space, pat_dir / name)
        records.append({
            "source": tr.source, "target": tr.target,
            "d_final_l1": tr.d_final("l1"), "d_final_l2": tr.d_final("l2"),
            "converged": tr.converged, "stop_reason": tr.stop_reason,
            "space": tr.space,
            "sizes_l1": tr.sizes_l1.tolist(), "sizes_l2": tr.sizes_l2.tolist(),
            "fractions": tr.fractions.tolist(),
            "perturbation_file": f"perturbations/{name}" if tr.final_v is not None else None,
        })
    doc = {
        "num_classes": result.num_classes,
        "config": {
            "pi": result.config.pi, "step_size": result.config.step_size,
            "max_norm": result.config.max_norm, "max_iters": result.config.max_iters,
            "objective": result.config.objective, "norm": result.config.norm,
            "cut_layer": result.config.cut_layer,
        },
        "pairs": records,
        "failures": result.failures,
    }
    (out_dir / "sweep.json").write_text(json.dumps(doc, indent=1))


def load_sweep(out_dir: str | Path) -> PairSweepResult:
    out_dir = Path(out_dir)
    doc = json.loads((out_dir / "sweep.json").read_text())
    cfg = OptimizerConfig(**doc["config"])
    traces = []
    for rec in doc["pairs"]:
        final_v = None
        if rec.get("perturbation_file"):
            final_v, _ = load_perturbation(out_dir / rec["perturbation_file"])
            final_v = final_v.astype(np.float64)
        traces.append(PerturbationTrace(
            rec["source"], rec["target"],
            np.asarray(rec["sizes_l1"], dtype=np.float64),
            np.asarray(rec["sizes_l2"], dtype=np.float64),
            np.asarray(rec["fractions"], dtype=np.float64),
            final_v, rec["converged"], rec["stop_reason"], rec["space"]))
    return PairSweepResult(doc["num_classes"], cfg, traces, doc.get("failures", []))
