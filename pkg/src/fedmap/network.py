"""Implicit map network: a 1x1-conv MLP with BatchNorm, trained by hand-rolled
backprop and ADAM.

A kernel-size-1 convolution over a coordinate grid is a dense layer applied to
each cell independently, so everything here works on ``(N, features)`` rows.
Internal arithmetic follows the dtype of the parameter arrays (float32 by
default, float64 for gradient checks).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from fedmap.encoding import FourierEncoder, cell_centers, encode
from fedmap.mapping import GridMap

log = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NumericalError(FloatingPointError):
    """Raised when activations or gradients stop being finite."""

    def __init__(self, message: str, layer: str | None = None):
        super().__init__(message if layer is None else f"{message} (layer {layer})")
        self.layer = layer


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 256
    hidden_channels: int = 256
    hidden_layers: int = 3
    out_channels: int = 3
    use_batchnorm: bool = True

    def __post_init__(self):
        for name in ("in_channels", "hidden_channels", "out_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_layers < 0:
            raise ValueError("hidden_layers must be >= 0")

    def layer_names(self) -> list[str]:
        return [f"hidden{i}" for i in range(self.hidden_layers)] + ["out"]

    def trainable_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        fan_in = self.in_channels
        for i in range(self.hidden_layers):
            h = self.hidden_channels
            shapes[f"hidden{i}.weight"] = (h, fan_in)
            shapes[f"hidden{i}.bias"] = (h,)
            if self.use_batchnorm:
                shapes[f"hidden{i}.bn_gamma"] = (h,)
                shapes[f"hidden{i}.bn_beta"] = (h,)
            fan_in = h
        shapes["out.weight"] = (self.out_channels, fan_in)
        shapes["out.bias"] = (self.out_channels,)
        return shapes

    def buffer_shapes(self) -> dict[str, tuple[int, ...]]:
        if not self.use_batchnorm:
            return {}
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(self.hidden_layers):
            shapes[f"hidden{i}.running_mean"] = (self.hidden_channels,)
            shapes[f"hidden{i}.running_var"] = (self.hidden_channels,)
        return shapes


def count_params(config: NetworkConfig = NetworkConfig()) -> int:
    """Exact number of trainable values (BatchNorm running stats excluded)."""
    return sum(int(np.prod(s)) for s in config.trainable_shapes().values())


@dataclass
class ModelParams:
    """Ordered trainable tensors plus BatchNorm running statistics."""

    config: NetworkConfig
    trainables: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.trainable_shapes()
        if list(self.trainables) != list(expected):
            raise ValueError(
                f"trainable names {list(self.trainables)} do not match config {list(expected)}"
            )
        for name, shape in expected.items():
            if self.trainables[name].shape != shape:
                raise ValueError(f"{name}: shape {self.trainables[name].shape} != {shape}")
        expected_buf = self.config.buffer_shapes()
        if list(self.buffers) != list(expected_buf):
            raise ValueError(
                f"buffer names {list(self.buffers)} do not match config {list(expected_buf)}"
            )
        for name, shape in expected_buf.items():
            if self.buffers[name].shape != shape:
                raise ValueError(f"{name}: shape {self.buffers[name].shape} != {shape}")

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.trainables.values())).dtype

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainables followed by buffers, in canonical order."""
        return {**self.trainables, **self.buffers}

    def copy(self) -> ModelParams:
        return ModelParams(
            self.config,
            {k: v.copy() for k, v in self.trainables.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def astype(self, dtype) -> ModelParams:
        return ModelParams(
            self.config,
            {k: v.astype(dtype) for k, v in self.trainables.items()},
            {k: v.astype(dtype) for k, v in self.buffers.items()},
        )

    def num_trainable(self) -> int:
        return sum(v.size for v in self.trainables.values())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays().values())

    def same_layout(self, other: ModelParams) -> bool:
        return self.config == other.config and all(
            a.shape == b.shape for a, b in zip(self.arrays().values(), other.arrays().values())
        )

    def map(self, fn, *others: ModelParams) -> ModelParams:
        """Apply ``fn`` elementwise over matching arrays of ``self`` and ``others``."""
        for o in others:
            if not self.same_layout(o):
                raise ValueError("parameter layouts differ")
        tr = {k: fn(v, *(o.trainables[k] for o in others)) for k, v in self.trainables.items()}
        bf = {k: fn(v, *(o.buffers[k] for o in others)) for k, v in self.buffers.items()}
        return ModelParams(self.config, tr, bf)


def init_params(
    config: NetworkConfig = NetworkConfig(),
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> ModelParams:
    """Random init in the style of a default 1x1 Conv2d: ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``
    for weights and biases, BatchNorm gamma=1, beta=0, running stats (0, 1)."""
    rng = np.random.default_rng(0) if rng is None else rng
    trainables: dict[str, np.ndarray] = {}
    for name, shape in config.trainable_shapes().items():
        if name.endswith("bn_gamma"):
            trainables[name] = np.ones(shape, dtype=dtype)
        elif name.endswith("bn_beta"):
            trainables[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = config.trainable_shapes()[name.rsplit(".", 1)[0] + ".weight"][1]
            bound = 1.0 / np.sqrt(fan_in)
            trainables[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    buffers = {}
    for name, shape in config.buffer_shapes().items():
        fill = 0.0 if name.endswith("running_mean") else 1.0
        buffers[name] = np.full(shape, fill, dtype=dtype)
    return ModelParams(config, trainables, buffers)


# ---------------------------------------------------------------------------
# forward / backward


def _check_finite(arr: np.ndarray, what: str, layer: str):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"nonfinite {what}", layer)


def _forward(params: ModelParams, x: np.ndarray, train: bool):
    """Run the network; returns ``(output, cache, batch_stats)``.

    ``batch_stats`` maps layer name to ``(mean, biased_var)`` in train mode.
    """
    cfg = params.config
    p = params.trainables
    if x.ndim != 2 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"features must have shape (N, {cfg.in_channels}), got {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    x = x.astype(params.dtype, copy=False)
    cache = []
    stats = {}
    h = x
    for i in range(cfg.hidden_layers):
        name = f"hidden{i}"
        z = h @ p[f"{name}.weight"].T
        z += p[f"{name}.bias"]
        entry = {"in": h}
        if cfg.use_batchnorm:
            if train:
                mu = z.mean(axis=0)
                z -= mu
                var = np.einsum("ij,ij->j", z, z) / n
                stats[name] = (mu, var)
            else:
                z -= params.buffers[f"{name}.running_mean"]
                var = params.buffers[f"{name}.running_var"]
            inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(z.dtype)
            z *= inv_std  # now zhat
            y = z * p[f"{name}.bn_gamma"]
            y += p[f"{name}.bn_beta"]
            entry.update(zhat=z, inv_std=inv_std)
        else:
            y = z
        entry["active"] = y > 0
        np.maximum(y, 0, out=y)
        h = y
        cache.append(entry)
    out = h @ p["out.weight"].T
    out += p["out.bias"]
    if not np.all(np.isfinite(out)):
        # locate the first layer that went nonfinite
        for i, entry in enumerate(cache[1:] + [{"in": out}]):
            if not np.all(np.isfinite(entry["in"])):
                layer = f"hidden{i}" if i < cfg.hidden_layers else "out"
                raise NumericalError("nonfinite activation", layer)
    cache.append({"in": h})
    return out, cache, stats


def _update_running(params: ModelParams, stats: dict, n: int):
    for name, (mu, var) in stats.items():
        unbiased = var * (n / (n - 1)) if n > 1 else var
        rm = params.buffers[f"{name}.running_mean"]
        rv = params.buffers[f"{name}.running_var"]
        rm *= 1.0 - BN_MOMENTUM
        rm += BN_MOMENTUM * mu.astype(rm.dtype)
        rv *= 1.0 - BN_MOMENTUM
        rv += BN_MOMENTUM * unbiased.astype(rv.dtype)


def forward(params: ModelParams, features, mode: str = "eval", update_stats: bool = True) -> np.ndarray:
    """Evaluate the network on ``(N, in_channels)`` features.

    ``mode="train"`` normalizes with batch statistics and, unless
    ``update_stats`` is False, folds them into the running statistics of
    ``params`` in place (momentum 0.1). ``mode="eval"`` uses running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(features)
    out, _, stats = _forward(params, x, train=mode == "train")
    if mode == "train" and update_stats:
        _update_running(params, stats, x.shape[0])
    return out


def mse_loss(pred, target) -> float:
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("empty input")
    diff = pred - target
    return float(np.mean(diff * diff))


def _backward(params: ModelParams, cache: list, dout: np.ndarray) -> dict[str, np.ndarray]:
    cfg = params.config
    p = params.trainables
    grads: dict[str, np.ndarray] = {}
    top = cache[-1]
    grads["out.weight"] = dout.T @ top["in"]
    grads["out.bias"] = dout.sum(axis=0)
    dh = dout @ p["out.weight"]
    for i in reversed(range(cfg.hidden_layers)):
        name = f"hidden{i}"
        entry = cache[i]
        dy = dh
        dy *= entry["active"]
        if cfg.use_batchnorm:
            zhat = entry["zhat"]
            n = dy.shape[0]
            grads[f"{name}.bn_gamma"] = np.einsum("ij,ij->j", dy, zhat)
            grads[f"{name}.bn_beta"] = dy.sum(axis=0)
            dy *= p[f"{name}.bn_gamma"]  # now d zhat
            s1 = dy.sum(axis=0)
            s2 = np.einsum("ij,ij->j", dy, zhat)
            dz = dy
            dz *= n
            dz -= s1
            dz -= zhat * s2
            dz *= entry["inv_std"] / n
        else:
            dz = dy
        grads[f"{name}.weight"] = dz.T @ entry["in"]
        grads[f"{name}.bias"] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ p[f"{name}.weight"]
    for key, g in grads.items():
        _check_finite(g, "gradient", key.split(".")[0])
    return {k: grads[k] for k in cfg.trainable_shapes()}


def loss_and_grads(params: ModelParams, features: np.ndarray, targets: np.ndarray):
    """Train-mode MSE and its exact gradient. Returns ``(loss, grads, batch_stats)``."""
    targets = np.asarray(targets, dtype=params.dtype)
    out, cache, stats = _forward(params, features, train=True)
    if out.shape != targets.shape:
        raise ValueError(f"targets shape {targets.shape} != output shape {out.shape}")
    resid = out - targets
    loss = float(np.mean(resid * resid))
    dout = (2.0 / resid.size) * resid
    return loss, _backward(params, cache, dout.astype(params.dtype, copy=False)), stats


@dataclass
class TrainBatch:
    coords: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.targets = np.asarray(self.targets)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2 or len(self.coords) == 0:
            raise ValueError(f"coords must be a nonempty (N, 2) array, got {self.coords.shape}")
        if self.targets.ndim != 2 or len(self.targets) != len(self.coords):
            raise ValueError("targets must be (N, C) with N matching coords")
        if np.any(self.coords < 0) or np.any(self.coords > 1):
            raise ValueError("coords must lie in [0, 1]^2")
        if np.any(self.targets < 0) or np.any(self.targets > 1):
            raise ValueError("targets must lie in [0, 1]")


def backward(params: ModelParams, batch: TrainBatch, encoder: FourierEncoder) -> dict[str, np.ndarray]:
    """Gradients of ``mse_loss(forward(encode(coords)), targets)`` w.r.t. every trainable.

    Uses batch statistics (train mode) and leaves running statistics untouched.
    """
    feats = encode(batch.coords, encoder, dtype=params.dtype)
    _, grads, _ = loss_and_grads(params, feats, batch.targets)
    return grads


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params: ModelParams, **kw) -> AdamState:
        return cls(
            {k: np.zeros_like(a) for k, a in params.trainables.items()},
            {k: np.zeros_like(a) for k, a in params.trainables.items()},
            **kw,
        )

    def copy(self) -> AdamState:
        return AdamState(
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
            self.step, self.beta1, self.beta2, self.epsilon,
        )


def _adam_inplace(trainables: dict, grads: dict, state: AdamState, lr: float):
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for k, p in trainables.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)


def adam_step(params: ModelParams, grads: dict, state: AdamState, lr: float):
    """One bias-corrected ADAM update of the trainables. Returns new ``(params, state)``;
    the inputs are not modified and running statistics are carried over unchanged."""
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    for k, a in params.trainables.items():
        if k not in grads or np.shape(grads[k]) != a.shape:
            raise ValueError(f"gradient for {k} missing or misshapen")
        if not np.all(np.isfinite(grads[k])):
            raise NumericalError("nonfinite gradient", k.split(".")[0])
    new_params = params.copy()
    new_state = state.copy()
    _adam_inplace(new_params.trainables, grads, new_state, lr)
    return new_params, new_state


# ---------------------------------------------------------------------------
# training and rendering


def map_targets(grid: GridMap, out_channels: int) -> np.ndarray:
    """``(H*W, out_channels)`` targets from a map, replicating a gray channel if needed."""
    vals = grid.values.reshape(-1, grid.channels)
    if grid.channels == out_channels:
        return vals
    if grid.channels == 1:
        return np.repeat(vals, out_channels, axis=1)
    if out_channels == 1:
        return grid.gray().reshape(-1, 1)
    raise ValueError(f"cannot map {grid.channels} channels onto {out_channels} outputs")


def fit(
    map_region: GridMap,
    mask,
    params: ModelParams,
    encoder: FourierEncoder,
    lr: float = 1e-4,
    iters: int = 100,
    batch_size: int | None = None,
    seed: int = 0,
    history: list | None = None,
    features: np.ndarray | None = None,
) -> ModelParams:
    """Minimize MSE over the observed cells of ``map_region`` with ADAM.

    ``mask`` is a boolean ``(H, W)`` array (None means every cell). Coordinates
    are cell centers normalized over the full map extent. Full batch unless
    ``batch_size`` is given. A fresh ADAM state is used each call. Per-iteration
    losses are appended to ``history`` when provided. ``features`` may carry the
    precomputed encoding of all cells to skip re-encoding.
    """
    h, w = map_region.height, map_region.width
    mask = np.ones((h, w), bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} != map shape {(h, w)}")
    if not mask.any():
        raise ValueError("mask selects no cells")
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    params = params.copy()
    if iters <= 0:
        return params
    idx = np.flatnonzero(mask.ravel())
    if features is None:
        feats = encode(cell_centers(w, h)[idx], encoder, dtype=params.dtype)
    else:
        feats = np.asarray(features, dtype=params.dtype)[idx]
    targets = map_targets(map_region, params.config.out_channels)[idx].astype(params.dtype)
    state = AdamState.fresh(params)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(iters):
        if batch_size is not None and batch_size < len(idx):
            sel = rng.choice(len(idx), size=batch_size, replace=False)
            fx, ty = feats[sel], targets[sel]
        else:
            fx, ty = feats, targets
        loss, grads, stats = loss_and_grads(params, fx, ty)
        _update_running(params, stats, len(fx))
        _adam_inplace(params.trainables, grads, state, lr)
        losses.append(loss)
    if len(losses) > 1:
        drops = np.mean(np.diff(losses) <= 0)
        log.debug("fit: %d iters, loss %.4g -> %.4g, non-increasing in %.0f%% of steps",
                  iters, losses[0], losses[-1], 100 * drops)
    if history is not None:
        history.extend(losses)
    return params


def fit_epochs(
    map_region: GridMap,
    mask,
    params: ModelParams,
    encoder: FourierEncoder,
    lr: float = 1e-4,
    epochs: int = 100,
    batch_size: int | None = None,
    seed: int = 0,
    history: list | None = None,
    features: np.ndarray | None = None,
    background=None,
    background_per_epoch: int | None = None,
) -> ModelParams:
    """Like :func:`fit`, but counts passes over the observed cells.

    Each epoch visits every observed cell once in shuffled minibatches of
    ``batch_size`` (the last one may be smaller); ``batch_size=None`` makes an
    epoch a single full-batch step. One ADAM state spans all epochs.

    ``background`` marks extra cells, disjoint from ``mask``, that join every
    epoch; with ``background_per_epoch`` only that many of them, drawn afresh
    each epoch, are mixed in. ``history`` receives one mean loss per epoch.
    """
    h, w = map_region.height, map_region.width
    mask = np.ones((h, w), bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} != map shape {(h, w)}")
    if not mask.any():
        raise ValueError("mask selects no cells")
    if not lr > 0:
        raise ValueError(f"lr must be > 0, got {lr}")
    if batch_size is not None and batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if background_per_epoch is not None and background_per_epoch < 0:
        raise ValueError("background_per_epoch must be >= 0")
    idx = np.flatnonzero(mask.ravel())
    bg = np.zeros(0, np.int64)
    if background is not None:
        background = np.asarray(background, bool)
        if background.shape != (h, w):
            raise ValueError(f"background shape {background.shape} != map shape {(h, w)}")
        if np.any(background & mask):
            raise ValueError("background overlaps the observed cells")
        bg = np.flatnonzero(background.ravel())
    if batch_size is None and len(bg) == 0:
        return fit(map_region, mask, params, encoder, lr=lr, iters=epochs,
                   history=history, features=features)
    params = params.copy()
    pool = np.concatenate([idx, bg])
    if features is None:
        feats = encode(cell_centers(w, h)[pool], encoder, dtype=params.dtype)
    else:
        feats = np.asarray(features, dtype=params.dtype)[pool]
    targets = map_targets(map_region, params.config.out_channels)[pool].astype(params.dtype)
    state = AdamState.fresh(params)
    rng = np.random.default_rng(seed)
    n_obs, n_bg = len(idx), len(bg)
    k_bg = n_bg if background_per_epoch is None else min(n_bg, background_per_epoch)
    for _ in range(max(0, epochs)):
        rows = np.arange(n_obs)
        if k_bg:
            pick = np.arange(n_bg) if k_bg == n_bg else rng.choice(n_bg, size=k_bg, replace=False)
            rows = np.concatenate([rows, n_obs + pick])
        rows = rows[rng.permutation(len(rows))]
        step = len(rows) if batch_size is None else batch_size
        total = 0.0
        for start in range(0, len(rows), step):
            sel = rows[start:start + step]
            loss, grads, stats = loss_and_grads(params, feats[sel], targets[sel])
            _update_running(params, stats, len(sel))
            _adam_inplace(params.trainables, grads, state, lr)
            total += loss * len(sel)
        if history is not None:
            history.append(total / len(rows))
    return params


def render(
    params: ModelParams,
    encoder: FourierEncoder,
    width: int,
    height: int,
    chunk: int = 65536,
    features: np.ndarray | None = None,
) -> GridMap:
    """Evaluate the network (eval mode) at every cell center and clamp to [0, 1]."""
    n = width * height
    coords = None if features is not None else cell_centers(width, height)
    out = np.empty((n, params.config.out_channels), dtype=params.dtype)
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        if features is not None:
            fx = features[start:stop]
        else:
            fx = encode(coords[start:stop], encoder, dtype=params.dtype)
        out[start:stop] = _forward(params, fx, train=False)[0]
    vals = np.clip(out, 0.0, 1.0).reshape(height, width, -1)
    return GridMap(vals)
