import numpy as np
import pytest

from fedmap.config import ExperimentConfig, apply_overrides
from fedmap.experiment import (
    compare_aggregators,
    held_out_maps,
    learned_threshold,
    meta_corpus,
    prepare,
    run_federated,
)
from fedmap.federation import AGGREGATORS
from fedmap.mapping import RefineConfig, refine

SMALL = ["data.map_size=128", "training.local_epochs=2", "training.pretrain_iters=3",
         "training.pretrain_size=16", "eval.n_routes=10"]


@pytest.fixture(scope="module")
def small():
    cfg = apply_overrides(ExperimentConfig(), SMALL)
    return cfg, prepare(cfg)


def test_single_round_comparison_matches_full_runs(small):
    cfg, setup = small
    shared = compare_aggregators(cfg, AGGREGATORS, setup=setup)
    for agg in AGGREGATORS:
        c = apply_overrides(cfg, [f"federation.aggregator={agg}"])
        full = run_federated(c, setup=setup).assessment
        assert full.summary() == shared[agg].summary(), agg
        assert np.array_equal(full.raw.gray(), shared[agg].raw.gray())


def test_rounds_zero_keeps_init(small):
    cfg, setup = small
    res = run_federated(apply_overrides(cfg, ["training.rounds=0"]), setup=setup)
    assert res.reports == []
    for k, a in setup.theta0.arrays().items():
        assert np.array_equal(res.global_params.arrays()[k], a)


def test_ground_truth_is_refine_fixed_point(small):
    cfg, setup = small
    assert np.array_equal(refine(setup.gt, RefineConfig(200)).gray(), setup.gt.gray())
    assert len(setup.routes) == 10


def test_learned_threshold():
    g = np.r_[np.zeros(50), np.ones(50)]
    assert 0 < learned_threshold(g, "otsu") < 1
    assert learned_threshold(np.full(4, 0.3), "otsu") == 0.3
    assert learned_threshold(g, 0.42) == 0.42


def test_corpus_and_held_out_disjoint():
    cfg = apply_overrides(ExperimentConfig(), ["meta.maps_per_kind=2", "meta.map_size=32"])
    corpus = meta_corpus(cfg)
    held = held_out_maps(cfg, 3)
    assert len(corpus) == 6 and len(corpus.categories) == 3
    train = {m.gray().tobytes() for m, _ in corpus.items}
    assert not any(h.gray().tobytes() in train for h in held)
