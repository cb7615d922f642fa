"""End-to-end experiment drivers shared by the CLI, scripts and acceptance suite."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from skimage.filters import threshold_otsu

from fedmap.config import ExperimentConfig
from fedmap.encoding import EncoderConfig, FourierEncoder, cell_centers, encode
from fedmap.evaluation import (
    PlanMetrics,
    Route,
    RouteOutcome,
    evaluate_routes,
    metrics_from_outcomes,
    psnr,
    sample_routes,
    ssim,
)
from fedmap.federation import (
    AGGREGATORS,
    ClientState,
    RoundConfig,
    RoundReport,
    ServerState,
    World,
    aggregate,
    collect_updates,
    run_rounds,
    transmit,
)
from fedmap.mapping import (
    SYNTHETIC_KINDS,
    GridMap,
    RefineConfig,
    binarize,
    generate_quadrant_map,
    generate_synthetic,
    load_map,
    occupancy_to_map,
    partition,
    refine,
)
from fedmap.meta import TaskCorpus, UnknownMapSpec, pretrain_empty
from fedmap.network import ModelParams, NetworkConfig, render
from fedmap.params_io import load_params

log = logging.getLogger(__name__)


def make_encoder(cfg: ExperimentConfig) -> FourierEncoder:
    return FourierEncoder(EncoderConfig(2, cfg.encoder.mapping_size, cfg.encoder.scale, cfg.seed))


def make_network_config(cfg: ExperimentConfig) -> NetworkConfig:
    return NetworkConfig(
        in_channels=2 * cfg.encoder.mapping_size,
        hidden_channels=cfg.network.hidden,
        hidden_layers=cfg.network.layers,
        out_channels=cfg.network.out_channels,
        use_batchnorm=cfg.network.batchnorm,
    )


def refine_config(cfg: ExperimentConfig) -> RefineConfig:
    return RefineConfig(cfg.refinement.min_component, cfg.refinement.connectivity)


def empty_init(cfg: ExperimentConfig, encoder: FourierEncoder) -> ModelParams:
    """Random weights fitted to an all-unknown map."""
    n = cfg.training.pretrain_size
    spec = UnknownMapSpec(n, n, cfg.federation.unknown_value)
    return pretrain_empty(make_network_config(cfg), encoder, spec,
                          iters=cfg.training.pretrain_iters, lr=cfg.training.lr, seed=cfg.seed)


def initial_params(cfg: ExperimentConfig, encoder: FourierEncoder) -> ModelParams:
    """``paths.init`` when given (e.g. a meta-trained container), else the empty-map init."""
    if cfg.paths.init:
        params = load_params(cfg.paths.init)
        if params.config != make_network_config(cfg):
            raise ValueError(f"{cfg.paths.init} holds {params.config}, config asks for "
                             f"{make_network_config(cfg)}")
        return params
    return empty_init(cfg, encoder)


# synthetic seed blocks; gen-data uses seed * 100_000 + i
CORPUS_SEED_BASE = 1_000_000_000
HELD_OUT_SEED_BASE = 2_000_000_000


def meta_corpus(cfg: ExperimentConfig) -> TaskCorpus:
    """``maps_per_kind`` synthetic maps of every kind at ``meta.map_size``."""
    m = cfg.meta
    return TaskCorpus([(generate_synthetic(k, m.map_size, CORPUS_SEED_BASE + cfg.seed * 10_000 + i), k)
                       for k in SYNTHETIC_KINDS for i in range(m.maps_per_kind)])


def held_out_maps(cfg: ExperimentConfig, n: int) -> list[GridMap]:
    """Maps drawn from a seed block disjoint from :func:`meta_corpus`, kinds in rotation."""
    kinds = SYNTHETIC_KINDS
    return [generate_synthetic(kinds[i % len(kinds)], cfg.meta.map_size,
                               HELD_OUT_SEED_BASE + cfg.seed * 10_000 + i) for i in range(n)]


def ground_truth(cfg: ExperimentConfig) -> GridMap:
    if cfg.paths.maps:
        return load_map(cfg.paths.maps)
    return generate_quadrant_map(cfg.data.map_size, cfg.seed, cfg.data.kinds,
                                 min_feature_cells=cfg.refinement.min_component)


def learned_threshold(gray: np.ndarray, setting) -> float:
    """Fixed number, or ``"otsu"`` for the between-class-variance optimum of the map."""
    if setting == "otsu":
        if np.ptp(gray) == 0:
            return float(gray.flat[0])
        return float(threshold_otsu(np.asarray(gray, np.float64)))
    return float(setting)


@dataclass
class Assessment:
    raw: GridMap
    refined: GridMap
    threshold: float
    psnr: float
    ssim: float
    plan: PlanMetrics
    outcomes: list[RouteOutcome]
    raw_psnr: float = math.nan
    raw_ssim: float = math.nan
    raw_plan: PlanMetrics | None = None

    def summary(self) -> dict:
        """Headline metrics, computed on the refined map."""
        return {"psnr": self.psnr, "ssim": self.ssim, "precision": self.plan.precision,
                "recall": self.plan.recall, "f1": self.plan.f1}

    def raw_summary(self) -> dict:
        """The same metrics on the thresholded map before refinement."""
        p = self.raw_plan
        return {"psnr": self.raw_psnr, "ssim": self.raw_ssim, "precision": p.precision,
                "recall": p.recall, "f1": p.f1}


def assess(cfg: ExperimentConfig, learned: GridMap, gt: GridMap, routes: list[Route]) -> Assessment:
    """Threshold and refine the learned map, then score both versions against ``gt``.

    PSNR and SSIM compare the {0, 1} embedding of each binarized map with the
    ground truth; the refined scores are the headline.
    """
    gray = learned.gray()
    th = learned_threshold(gray, cfg.eval.threshold)
    raw = GridMap(gray, traversable_threshold=th, polarity=gt.polarity)
    refined = refine(raw, refine_config(cfg))
    gt1 = GridMap(gt.gray(), gt.traversable_threshold, gt.polarity)
    gt_occ = binarize(gt1)
    outcomes = evaluate_routes(gt_occ, binarize(refined), routes)
    raw_bin = occupancy_to_map(binarize(raw), raw)
    raw_plan = metrics_from_outcomes(evaluate_routes(gt_occ, binarize(raw_bin), routes, gt_costs=False))
    return Assessment(raw, refined, th, psnr(refined, gt1), ssim(refined, gt1),
                      metrics_from_outcomes(outcomes), outcomes,
                      psnr(raw_bin, gt1), ssim(raw_bin, gt1), raw_plan)


@dataclass
class Setup:
    cfg: ExperimentConfig
    encoder: FourierEncoder
    features: np.ndarray
    gt: GridMap
    routes: list[Route]
    theta0: ModelParams
    timings: dict = field(default_factory=dict)

    def world(self, aggregator: str | None = None) -> World:
        fed = self.cfg.federation
        clients = [ClientState(r.agent_id, r, self.gt)
                   for r in partition(self.gt, fed.n_agents, fed.layout)]
        server = ServerState.create(self.theta0, aggregator or fed.aggregator, eta=fed.eta,
                                    beta1=fed.beta1, beta2=fed.beta2, tau=fed.tau)
        return World(self.encoder, clients, server, self.features)

    def round_config(self, jobs: int = 1) -> RoundConfig:
        t = self.cfg.training
        return RoundConfig(local_epochs=t.local_epochs, lr=t.lr, precision=t.precision, jobs=jobs,
                           batch_size=t.batch_size, supervision=self.cfg.federation.supervision,
                           unknown_value=self.cfg.federation.unknown_value, seed=self.cfg.seed)

    def render(self, params: ModelParams) -> GridMap:
        return render(params, self.encoder, self.gt.width, self.gt.height, features=self.features)

    def assess(self, params: ModelParams) -> Assessment:
        return assess(self.cfg, self.render(params), self.gt, self.routes)


def prepare(cfg: ExperimentConfig, theta0: ModelParams | None = None) -> Setup:
    t0 = time.perf_counter()
    encoder = make_encoder(cfg)
    gt = ground_truth(cfg)
    features = encode(cell_centers(gt.width, gt.height), encoder)
    routes = sample_routes(binarize(GridMap(gt.gray())), cfg.eval.n_routes, cfg.seed,
                           cfg.eval.min_separation)
    t1 = time.perf_counter()
    if theta0 is None:
        theta0 = initial_params(cfg, encoder)
    t2 = time.perf_counter()
    return Setup(cfg, encoder, features, gt, routes, theta0,
                 {"setup_s": t1 - t0, "init_s": t2 - t1})


@dataclass
class FedResult:
    setup: Setup
    global_params: ModelParams
    reports: list[RoundReport]
    assessment: Assessment
    timings: dict


def run_federated(cfg: ExperimentConfig, jobs: int = 1, setup: Setup | None = None) -> FedResult:
    """Full pipeline: init, ``rounds`` federated rounds, refine, score."""
    setup = setup or prepare(cfg)
    world = setup.world(cfg.federation.aggregator)
    t0 = time.perf_counter()

    def evaluate(params):
        a = setup.assess(params)
        return {"psnr": a.psnr, "ssim": a.ssim, "f1": a.plan.f1}

    g, reports = run_rounds(world, cfg.training.rounds, setup.round_config(jobs), evaluate)
    t1 = time.perf_counter()
    received, _ = transmit(g, cfg.training.precision)
    final = setup.assess(received)
    timings = dict(setup.timings, rounds_s=t1 - t0, eval_s=time.perf_counter() - t1)
    return FedResult(setup, g, reports, final, timings)


def compare_aggregators(
    cfg: ExperimentConfig, aggregators=AGGREGATORS, jobs: int = 1, setup: Setup | None = None
) -> dict[str, Assessment]:
    """Score each server optimizer on the same fixture.

    In a single round every client trains from the same initial model, so
    the uploaded updates do not depend on the aggregator; they are computed
    once and handed to each server. More rounds run each aggregator in full.
    """
    setup = setup or prepare(cfg)
    out = {}
    if cfg.training.rounds == 1:
        world = setup.world("fedavg")
        broadcast, _ = transmit(setup.theta0, cfg.training.precision)
        updates = collect_updates(world, setup.round_config(jobs), broadcast, 0)
        for agg in aggregators:
            g = aggregate(setup.world(agg).server, updates)
            received, _ = transmit(g, cfg.training.precision)
            out[agg] = setup.assess(received)
        return out
    for agg in aggregators:
        fed = cfg.federation.__class__(**{**cfg.federation.__dict__, "aggregator": agg})
        out[agg] = run_federated(cfg.replace(federation=fed), jobs, setup).assessment
    return out


@dataclass
class SpeedupResult:
    """Iterations-to-target per held-out map; ``None`` where the target was never reached."""

    target_psnr: float
    iterations: dict[str, list[int | None]]
    psnr_after_2: dict[str, float]
    timings: dict

    def median(self, name: str, cap: int) -> float:
        vals = [cap + 1 if n is None else n for n in self.iterations[name]]
        return float(np.median(vals))


def meta_speedup(
    cfg: ExperimentConfig,
    n_held_out: int = 20,
    target_psnr: float = 13.3,
    max_iters: int = 300,
    corpus: TaskCorpus | None = None,
) -> SpeedupResult:
    """Meta-train from the empty-map init and compare adaptation on held-out maps.

    Three initializations are measured: random weights, the empty-map init,
    and the meta-trained init, each adapted with ``training.lr``. Maps that never reach ``target_psnr`` within
    ``max_iters`` count as ``max_iters + 1`` in :meth:`SpeedupResult.median`.
    """
    from fedmap.meta import MetaConfig, adaptation_curve, meta_train
    from fedmap.network import init_params
    from fedmap.seeding import substream

    m = cfg.meta
    t0 = time.perf_counter()
    enc = make_encoder(cfg)
    net = make_network_config(cfg)
    rand = init_params(net, substream(cfg.seed, "init"))
    empty = empty_init(cfg, enc)
    t1 = time.perf_counter()
    mcfg = MetaConfig(m.outer_step, m.inner_iters, m.inner_lr, m.meta_iterations,
                      m.tasks_per_meta_step, cfg.seed)
    meta = meta_train(empty, corpus or meta_corpus(cfg), mcfg, enc)
    t2 = time.perf_counter()
    held = held_out_maps(cfg, n_held_out)
    feats = encode(cell_centers(m.map_size, m.map_size), enc)
    iters: dict[str, list] = {}
    after2: dict[str, float] = {}
    for name, p in (("random", rand), ("empty", empty), ("meta", meta)):
        iters[name] = []
        first2 = []
        for g in held:
            curve = adaptation_curve(p, g, enc, max_iters, cfg.training.lr, feats, target_psnr=target_psnr)
            hit = next((i + 1 for i, v in enumerate(curve) if v >= target_psnr), None)
            iters[name].append(hit)
            first2.append(curve[1] if len(curve) > 1 else
                          adaptation_curve(p, g, enc, 2, cfg.training.lr, feats)[-1])
        after2[name] = float(np.mean(first2))
    timings = {"init_s": t1 - t0, "meta_train_s": t2 - t1, "adapt_s": time.perf_counter() - t2}
    return SpeedupResult(target_psnr, iters, after2, timings)
