"""In-process federation: local rounds, FedAvg / FedAdam / FedYogi, round loop
and bandwidth accounting.

Client and broadcast payloads go through the real parameter container, so the
reported byte counts are the sizes of actual serialized blobs and the server
aggregates the transport-precision values it would receive.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from fedmap.encoding import FourierEncoder
from fedmap.mapping import GridMap, Region
from fedmap.network import AdamState, ModelParams, fit_epochs
from fedmap.params_io import deserialize_params, serialize_params

log = logging.getLogger(__name__)

AGGREGATORS = ("fedavg", "fedadam", "fedyogi")
SUPERVISION = ("masked", "unknown")


@dataclass
class ClientState:
    id: int
    region: Region
    local_map: GridMap
    params: ModelParams | None = None
    adam: AdamState | None = None

    @property
    def mask(self) -> np.ndarray:
        return self.region.mask(self.local_map.width, self.local_map.height)

    @property
    def n_k(self) -> int:
        return self.region.n_cells


@dataclass
class ClientUpdate:
    client_id: int
    params: ModelParams
    n_k: int
    uplink_bytes: int = 0


@dataclass
class ServerState:
    global_params: ModelParams
    aggregator: str = "fedavg"
    eta: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    m: dict | None = None
    v: dict | None = None

    @classmethod
    def create(cls, global_params: ModelParams, aggregator: str = "fedavg", **hyper) -> ServerState:
        if aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {aggregator!r}")
        state = cls(global_params.copy(), aggregator, **hyper)
        if aggregator != "fedavg":
            state.m = {k: np.zeros_like(a) for k, a in global_params.trainables.items()}
            state.v = {k: np.zeros_like(a) for k, a in global_params.trainables.items()}
        return state


@dataclass
class RoundReport:
    round: int
    uplink_bytes: dict[int, int]
    downlink_bytes: int
    metrics: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# aggregation


def fedavg(updates: list[ClientUpdate]) -> ModelParams:
    """Sample-weighted average ``sum_k (n_k / n) theta_k`` over trainables and
    BatchNorm running stats, summed in client-id order.

    Written as ``ref + sum_k w_k (theta_k - ref)`` with ``ref`` the first
    client, so identical inputs come back bit-for-bit.
    """
    if not updates:
        raise ValueError("need at least one update")
    ups = sorted(updates, key=lambda u: u.client_id)
    ref = ups[0].params
    for u in ups[1:]:
        if not ref.same_layout(u.params):
            raise ValueError(f"client {u.client_id} parameter layout differs")
    if any(u.n_k < 1 for u in ups):
        raise ValueError("every update needs n_k >= 1")
    n = sum(u.n_k for u in ups)
    weights = [u.n_k / n for u in ups]

    def combine(r, *arrays):
        acc = np.zeros(r.shape, np.float64)
        for w, a in zip(weights, arrays):
            acc += w * (a.astype(np.float64) - r)
        return (r + acc).astype(r.dtype)

    return ref.map(combine, *(u.params for u in ups))


def _adaptive(server: ServerState, updates: list[ClientUpdate], yogi: bool) -> ModelParams:
    if server.m is None or server.v is None:
        raise ValueError("server moments are not initialized")
    avg = fedavg(updates)
    g = server.global_params
    b1, b2 = server.beta1, server.beta2
    new_tr = {}
    for k, theta in g.trainables.items():
        delta = avg.trainables[k] - theta
        m = server.m[k]
        v = server.v[k]
        m[...] = b1 * m + (1 - b1) * delta
        d2 = delta * delta
        if yogi:
            v[...] = v - (1 - b2) * d2 * np.sign(v - d2)
        else:
            v[...] = b2 * v + (1 - b2) * d2
        new_tr[k] = theta + server.eta * m / (np.sqrt(v) + server.tau)
    # running statistics are not gradients; they take the plain weighted average
    out = ModelParams(g.config, new_tr, {k: a.copy() for k, a in avg.buffers.items()})
    server.global_params = out
    return out


def fedadam(server: ServerState, updates: list[ClientUpdate]) -> ModelParams:
    """Adam-style server step on the averaged client delta (no bias correction)."""
    return _adaptive(server, updates, yogi=False)


def fedyogi(server: ServerState, updates: list[ClientUpdate]) -> ModelParams:
    """Yogi variant: ``v <- v - (1 - beta2) d^2 sign(v - d^2)``."""
    return _adaptive(server, updates, yogi=True)


def aggregate(server: ServerState, updates: list[ClientUpdate]) -> ModelParams:
    if server.aggregator == "fedavg":
        server.global_params = fedavg(updates)
        return server.global_params
    if server.aggregator == "fedadam":
        return fedadam(server, updates)
    if server.aggregator == "fedyogi":
        return fedyogi(server, updates)
    raise ValueError(f"unknown aggregator {server.aggregator!r}")


# ---------------------------------------------------------------------------
# rounds


def local_round(
    client: ClientState,
    global_params: ModelParams,
    encoder: FourierEncoder,
    epochs: int = 100,
    lr: float = 1e-4,
    features: np.ndarray | None = None,
    batch_size: int | None = None,
    supervision: str = "masked",
    unknown_value: float = 0.5,
    seed=0,
) -> ClientUpdate:
    """Adopt the global model and train it on the client's map for ``epochs``
    passes with a fresh ADAM state; return ``(theta_i, n_k)``.

    ``supervision="masked"`` fits the explored cells only. ``"unknown"`` also
    fits every unexplored cell of the global frame to ``unknown_value``, the
    value the empty-map initialization predicts, so the client leaves the
    rest of the map where it found it. ``n_k`` is the explored-cell count in
    both modes. With ``batch_size=None`` an epoch is one full-batch step.
    """
    if supervision not in SUPERVISION:
        raise ValueError(f"supervision must be one of {SUPERVISION}, got {supervision!r}")
    mask = client.mask
    if not mask.any():
        raise ValueError(f"client {client.id} has an empty region")
    client.adam = None
    target = client.local_map
    background = None
    if supervision == "unknown" and not mask.all():
        vals = np.where(mask[..., None], target.values, unknown_value)
        target = target.with_values(vals)
        background = ~mask
    client.params = fit_epochs(target, mask, global_params, encoder, lr=lr, epochs=epochs,
                               batch_size=batch_size, seed=seed, features=features,
                               background=background)
    return ClientUpdate(client.id, client.params, client.n_k)


def transmit(params: ModelParams, precision: str = "fp16") -> tuple[ModelParams, int]:
    """Round-trip ``params`` through the container; returns what the receiver sees
    and the number of bytes on the wire."""
    blob = serialize_params(params, precision)
    return deserialize_params(blob, dtype=params.dtype), len(blob)


@dataclass
class World:
    """Everything a simulated federation needs."""

    encoder: FourierEncoder
    clients: list[ClientState]
    server: ServerState
    features: np.ndarray | None = None


@dataclass(frozen=True)
class RoundConfig:
    local_epochs: int = 100
    lr: float = 1e-4
    precision: str = "fp16"
    jobs: int = 1
    batch_size: int | None = None
    supervision: str = "masked"
    unknown_value: float = 0.5
    seed: int = 0


def collect_updates(
    world: World, cfg: RoundConfig, broadcast: ModelParams, round_index: int = 0
) -> list[ClientUpdate]:
    """Run every client's local round and the uplink; ordered by client id.

    Each client shuffles with its own stream keyed on (seed, round, client), so
    results do not depend on ``cfg.jobs``.
    """

    def work(client):
        seq = np.random.SeedSequence([cfg.seed, round_index, client.id])
        upd = local_round(client, broadcast, world.encoder, cfg.local_epochs, cfg.lr,
                          world.features, cfg.batch_size, cfg.supervision, cfg.unknown_value, seq)
        received, nbytes = transmit(upd.params, cfg.precision)
        return ClientUpdate(upd.client_id, received, upd.n_k, nbytes)

    clients = sorted(world.clients, key=lambda c: c.id)
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            updates = list(pool.map(work, clients))
    else:
        updates = [work(c) for c in clients]
    return sorted(updates, key=lambda u: u.client_id)


def run_rounds(world: World, rounds: int, cfg: RoundConfig = RoundConfig(), evaluate=None):
    """Alternate local training and aggregation for ``rounds`` rounds.

    ``evaluate(global_params) -> dict`` is called after every aggregation, on
    the model as the agents receive it. Returns ``(global_params, reports)``.
    """
    reports: list[RoundReport] = []
    broadcast, down = transmit(world.server.global_params, cfg.precision)
    for r in range(rounds):
        updates = collect_updates(world, cfg, broadcast, r)
        aggregate(world.server, updates)
        broadcast, down = transmit(world.server.global_params, cfg.precision)
        metrics = evaluate(broadcast) if evaluate is not None else {}
        reports.append(RoundReport(r, {u.client_id: u.uplink_bytes for u in updates}, down, metrics))
        log.info("round %d: uplink %d B/client, metrics %s", r, updates[0].uplink_bytes, metrics)
    return world.server.global_params, reports


def fmt(value) -> str:
    """CSV cell text; infinities become ``inf``, floats get 6 decimals."""
    if isinstance(value, (float, np.floating)):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        if math.isnan(value):
            return "nan"
        return f"{value:.6f}"
    return str(value)


ROUND_COLUMNS = ("round", "client_id", "uplink_bytes", "downlink_bytes", "psnr", "ssim", "f1")


def write_round_csv(reports: list[RoundReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROUND_COLUMNS)
        for rep in reports:
            for cid in sorted(rep.uplink_bytes):
                w.writerow([
                    rep.round, cid, rep.uplink_bytes[cid], rep.downlink_bytes,
                    fmt(rep.metrics.get("psnr", math.nan)),
                    fmt(rep.metrics.get("ssim", math.nan)),
                    fmt(rep.metrics.get("f1", math.nan)),
                ])


# ---------------------------------------------------------------------------
# bandwidth

RAW_FORMATS = (
    ("grayscale", 2000, 2000, 1),
    ("omg", 400, 400, 6),
    ("omg", 600, 600, 6),
    ("ccm", 400, 400, 18),
    ("ccm", 600, 600, 18),
)

# reference reductions reported alongside the computed ones
REFERENCE_REDUCTION = {
    ("grayscale", 2000): 89.53,
    ("omg", 400): 58.4,
    ("omg", 600): 81.5,
    ("ccm", 400): 86.1,
    ("ccm", 600): 93.8,
}


@dataclass
class BandwidthRow:
    format: str
    width: int
    height: int
    bytes_per_cell: int
    raw_bytes: int
    model_bytes: int
    reduction_pct: float
    reference_pct: float
    note: str = ""


def bandwidth_report(model_bytes: int) -> list[BandwidthRow]:
    """Raw-map sizes versus a model payload of ``model_bytes``; reduction = 1 - model/raw."""
    if model_bytes <= 0:
        raise ValueError("model_bytes must be positive")
    rows = []
    for name, w, h, bpc in RAW_FORMATS:
        raw = w * h * bpc
        note = ""
        if name == "grayscale":
            note = ("reference 89.53% equals 1 - 399/3810, i.e. 399 kB against "
                    "3.81 MiB read as 3810 kB; exact bytes give the value shown")
        rows.append(BandwidthRow(name, w, h, bpc, raw, model_bytes,
                                 100.0 * (1.0 - model_bytes / raw),
                                 REFERENCE_REDUCTION[(name, w)], note))
    return rows


def write_bandwidth_csv(rows: list[BandwidthRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["format", "width", "height", "bytes_per_cell", "raw_bytes",
                    "model_bytes", "reduction_pct", "reference_pct", "note"])
        for r in rows:
            w.writerow([r.format, r.width, r.height, r.bytes_per_cell, r.raw_bytes,
                        r.model_bytes, f"{r.reduction_pct:.2f}", f"{r.reference_pct:.2f}", r.note])
