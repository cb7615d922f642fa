import json

import pytest

from fedmap.config import ConfigError, ExperimentConfig, apply_overrides, from_dict, load_config


def test_defaults():
    c = ExperimentConfig()
    assert c.training.lr == 1e-4
    assert c.training.local_epochs == 100
    assert c.training.rounds == 1
    assert c.federation.n_agents == 4
    assert c.encoder.mapping_size == 128 and c.encoder.scale == 10.0
    assert c.refinement.min_component == 200
    assert c.eval.n_routes == 75
    assert c.meta.outer_step == 0.1 and c.meta.inner_iters == 16


def test_roundtrip_dict():
    c = ExperimentConfig()
    assert from_dict(c.to_dict()) == c


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="training.lrr"):
        from_dict({"training": {"lrr": 1.0}})
    with pytest.raises(ConfigError, match="bogus"):
        from_dict({"bogus": 1})


@pytest.mark.parametrize("data", [
    {"training": {"lr": 0}},
    {"training": {"lr": "fast"}},
    {"training": {"local_epochs": 1.5}},
    {"federation": {"aggregator": "sgd"}},
    {"federation": {"n_agents": 0}},
    {"network": {"batchnorm": 1}},
    {"refinement": {"connectivity": 6}},
    {"eval": {"threshold": "mean"}},
    {"meta": {"outer_step": 0}},
    {"data": {"map_size": 63}},
])
def test_invalid_values_rejected(data):
    with pytest.raises(ConfigError):
        from_dict(data)


def test_threshold_accepts_number_or_otsu():
    assert from_dict({"eval": {"threshold": 0.4}}).eval.threshold == 0.4
    assert from_dict({"eval": {"threshold": "otsu"}}).eval.threshold == "otsu"


def test_load_json_yaml_and_empty(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"seed": 3, "training": {"lr": 0.01}}))
    (tmp_path / "b.yaml").write_text("seed: 4\nfederation:\n  aggregator: fedyogi\n")
    (tmp_path / "c.yml").write_text("")
    assert load_config(tmp_path / "a.json").training.lr == 0.01
    assert load_config(tmp_path / "b.yaml").federation.aggregator == "fedyogi"
    assert load_config(tmp_path / "c.yml") == ExperimentConfig()
    (tmp_path / "d.toml").write_text("")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "d.toml")


def test_overrides():
    c = apply_overrides(ExperimentConfig(), ["training.lr=1e-3", "seed=5", "data.kinds=[blocks, crater]",
                                             "training.batch_size=null"])
    assert c.training.lr == 1e-3 and c.seed == 5
    assert c.data.kinds == ("blocks", "crater")
    assert c.training.batch_size is None
    for bad in (["training.lr"], ["nope.lr=1"], ["training.nope=1"], ["training.lr=-1"]):
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), bad)


def test_frozen():
    with pytest.raises(Exception):
        ExperimentConfig().seed = 1
