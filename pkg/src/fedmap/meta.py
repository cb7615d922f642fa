"""Offline preparation: empty-map pretraining and Reptile meta-training."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedmap.encoding import FourierEncoder, cell_centers, encode
from fedmap.evaluation import psnr_arrays
from fedmap.mapping import GridMap, load_map
from fedmap.network import (
    AdamState,
    ModelParams,
    NetworkConfig,
    _adam_inplace,
    _backward,
    _forward,
    _update_running,
    fit,
    init_params,
    map_targets,
)
from fedmap.seeding import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    outer_step: float = 0.1
    inner_iters: int = 16
    inner_lr: float = 1e-4
    meta_iterations: int = 1000
    tasks_per_meta_step: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.outer_step <= 1:
            raise ValueError("outer_step must lie in (0, 1]")
        if self.inner_iters < 1 or self.tasks_per_meta_step < 1:
            raise ValueError("inner_iters and tasks_per_meta_step must be >= 1")
        if self.meta_iterations < 0:
            raise ValueError("meta_iterations must be >= 0")
        if not self.inner_lr > 0:
            raise ValueError("inner_lr must be > 0")


@dataclass(frozen=True)
class UnknownMapSpec:
    width: int = 64
    height: int = 64
    unknown_value: float = 0.5

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("width and height must be >= 1")
        if not 0 <= self.unknown_value <= 1:
            raise ValueError("unknown_value must lie in [0, 1]")

    def as_map(self) -> GridMap:
        return GridMap(np.full((self.height, self.width), self.unknown_value))


class TaskCorpus:
    """Maps grouped by category label; each category is one meta-learning task family."""

    def __init__(self, items: list[tuple[GridMap, str]]):
        if not items:
            raise ValueError("corpus is empty")
        self.items = list(items)
        self.by_category: dict[str, list[GridMap]] = {}
        for grid, label in self.items:
            self.by_category.setdefault(str(label), []).append(grid)
        self.categories = sorted(self.by_category)

    def __len__(self):
        return len(self.items)

    def sample(self, rng: np.random.Generator) -> GridMap:
        """Uniform over categories, then uniform within the category."""
        cat = self.categories[int(rng.integers(len(self.categories)))]
        maps = self.by_category[cat]
        return maps[int(rng.integers(len(maps)))]

    @classmethod
    def from_manifest(cls, path) -> TaskCorpus:
        """Read a JSON manifest ``{"maps": [{"path": ..., "category": ...}, ...]}``.

        Relative paths resolve against the manifest's directory.
        """
        path = Path(path)
        doc = json.loads(path.read_text())
        items = []
        for entry in doc.get("maps", []):
            p = Path(entry["path"])
            if not p.is_absolute():
                p = path.parent / p
            items.append((load_map(p), entry["category"]))
        return cls(items)


class _FeatureCache:
    """Encodings of full-map cell centers, keyed by map size."""

    def __init__(self, encoder: FourierEncoder, dtype):
        self.encoder = encoder
        self.dtype = dtype
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def __call__(self, width: int, height: int) -> np.ndarray:
        key = (width, height)
        if key not in self._cache:
            self._cache[key] = encode(cell_centers(width, height), self.encoder, dtype=self.dtype)
        return self._cache[key]


def pretrain_empty(
    net_config: NetworkConfig,
    encoder: FourierEncoder,
    spec: UnknownMapSpec = UnknownMapSpec(),
    iters: int = 500,
    lr: float = 1e-4,
    seed: int = 0,
    params: ModelParams | None = None,
) -> ModelParams:
    """Fit a randomly initialized network to a constant "unknown" map.

    Raises ``FloatingPointError`` if the loss ends above ten times its start.
    """
    if params is None:
        params = init_params(net_config, substream(seed, "init"))
    if iters <= 0:
        return params
    history: list[float] = []
    out = fit(spec.as_map(), None, params, encoder, lr=lr, iters=iters, history=history)
    if history[-1] > 10 * history[0]:
        raise FloatingPointError(
            f"empty-map pretraining diverged: loss {history[0]:.4g} -> {history[-1]:.4g}"
        )
    return out


def reptile_step(
    theta: ModelParams,
    task: GridMap,
    k: int,
    inner_lr: float,
    outer_step: float,
    encoder: FourierEncoder,
    features: np.ndarray | None = None,
) -> ModelParams:
    """``theta + outer_step * (phi - theta)`` where ``phi`` is ``theta`` after
    ``k`` ADAM steps on ``task``. BatchNorm running stats are interpolated too."""
    if k < 1:
        raise ValueError("k must be >= 1")
    phi = fit(task, None, theta, encoder, lr=inner_lr, iters=k, features=features)
    return theta.map(lambda t, p: t + outer_step * (p - t), phi)


def meta_train(
    theta0: ModelParams,
    corpus: TaskCorpus,
    cfg: MetaConfig,
    encoder: FourierEncoder,
    callback=None,
) -> ModelParams:
    """Batched Reptile: each round moves ``theta`` by ``outer_step`` towards the
    mean of the task-adapted parameters. ``callback(round, theta)`` is invoked
    after every round when given."""
    theta = theta0.copy()
    if cfg.meta_iterations == 0:
        return theta
    rng = substream(cfg.seed, "tasks")
    feats = _FeatureCache(encoder, theta.dtype)
    for it in range(cfg.meta_iterations):
        tasks = [corpus.sample(rng) for _ in range(cfg.tasks_per_meta_step)]
        acc = None
        for task in tasks:
            phi = fit(task, None, theta, encoder, lr=cfg.inner_lr, iters=cfg.inner_iters,
                      features=feats(task.width, task.height))
            delta = phi.map(lambda p, t: p - t, theta)
            acc = delta if acc is None else acc.map(np.add, delta)
        scale = cfg.outer_step / len(tasks)
        theta = theta.map(lambda t, d: t + scale * d, acc)
        if callback is not None:
            callback(it, theta)
    return theta


# ---------------------------------------------------------------------------
# adaptation measurements used by the initialization ablation


def adaptation_curve(
    params: ModelParams,
    grid: GridMap,
    encoder: FourierEncoder,
    iters: int,
    lr: float = 1e-4,
    features: np.ndarray | None = None,
    target_psnr: float | None = None,
) -> list[float]:
    """PSNR of the whole-map prediction after each of ``iters`` ADAM steps.

    Entry ``i`` is the PSNR after ``i + 1`` steps. The prediction is the
    network's output on the full-map batch (batch statistics), clamped to
    [0, 1] and reduced to one channel, so no extra render pass is needed.
    When ``target_psnr`` is given the curve stops at the first entry reaching it.
    """
    p = params.copy()
    if features is None:
        features = encode(cell_centers(grid.width, grid.height), encoder, dtype=p.dtype)
    targets = map_targets(grid, p.config.out_channels).astype(p.dtype)
    gray = grid.gray().ravel()
    state = AdamState.fresh(p)
    curve: list[float] = []

    def score(out):
        pred = np.clip(out, 0, 1).mean(axis=1)
        return psnr_arrays(pred, gray)

    for i in range(iters + 1):
        out, cache, stats = _forward(p, features, train=True)
        if i > 0:
            curve.append(score(out))
            if target_psnr is not None and curve[-1] >= target_psnr:
                break
        if i == iters:
            break
        resid = out - targets
        grads = _backward(p, cache, ((2.0 / resid.size) * resid).astype(p.dtype, copy=False))
        _update_running(p, stats, len(targets))
        _adam_inplace(p.trainables, grads, state, lr)
    return curve


def iterations_to_psnr(
    params: ModelParams,
    grid: GridMap,
    encoder: FourierEncoder,
    target: float,
    lr: float = 1e-4,
    max_iters: int = 1000,
    features: np.ndarray | None = None,
) -> int | None:
    """Smallest number of ADAM steps after which PSNR >= ``target``; None if never
    reached within ``max_iters``."""
    curve = adaptation_curve(params, grid, encoder, max_iters, lr, features, target_psnr=target)
    for i, v in enumerate(curve):
        if v >= target:
            return i + 1
    return None
