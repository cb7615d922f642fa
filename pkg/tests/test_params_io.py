import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmap.network import NetworkConfig, count_params, init_params
from fedmap.params_io import (
    FP16_MAX,
    MAGIC,
    ContainerError,
    container_layout,
    deserialize_params,
    load_params,
    read_extra,
    save_params,
    serialize_params,
)


@pytest.fixture(scope="module")
def default_params():
    return init_params(NetworkConfig(), np.random.default_rng(0))


def test_default_payload_sizes(default_params):
    blob = serialize_params(default_params, "fp16")
    lay = container_layout(blob)
    assert lay["trainable_values"] == count_params() == 199_683
    assert lay["trainable_bytes"] == 399_366
    assert lay["buffer_bytes"] == 3 * 2 * 256 * 2
    assert lay["header_bytes"] <= 1024
    assert lay["total_bytes"] == lay["header_bytes"] + lay["trainable_bytes"] + lay["buffer_bytes"]
    assert blob[:8] == MAGIC


def test_header_fields(default_params):
    blob = serialize_params(default_params, "fp16", extra={"round": 3})
    version, cfg_len = struct.unpack_from("<II", blob, 8)
    assert version == 1
    cfg = read_extra(blob)
    assert cfg["round"] == 3 and cfg["precision"] == "fp16"
    assert cfg["network"]["hidden_channels"] == 256


def test_fp32_roundtrip_bit_exact(default_params):
    back = deserialize_params(serialize_params(default_params, "fp32"))
    for k, a in default_params.arrays().items():
        assert np.array_equal(back.arrays()[k], a)
        assert back.arrays()[k].dtype == np.float32


@settings(max_examples=50, deadline=None)
@given(st.floats(min_value=-1000, max_value=1000).filter(lambda x: abs(x) >= 6.2e-5))
def test_fp16_relative_error_bound(value):
    cfg = NetworkConfig(in_channels=2, hidden_channels=1, hidden_layers=1, out_channels=1)
    p = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    p.trainables["out.bias"][0] = value
    back = deserialize_params(serialize_params(p, "fp16"), dtype=np.float64)
    assert abs(back.trainables["out.bias"][0] - value) <= 2.0 ** -11 * abs(value)


def test_fp16_point_one():
    cfg = NetworkConfig(in_channels=2, hidden_channels=1, hidden_layers=1, out_channels=1)
    p = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    p.trainables["out.bias"][0] = 0.1
    back = deserialize_params(serialize_params(p, "fp16"), dtype=np.float64)
    err = abs(back.trainables["out.bias"][0] - 0.1)
    assert 0 < err <= 2.0 ** -11 * 0.1


def test_fp16_saturation_warns_with_count():
    cfg = NetworkConfig(in_channels=2, hidden_channels=2, hidden_layers=1, out_channels=1)
    p = init_params(cfg, np.random.default_rng(0), dtype=np.float64)
    p.trainables["hidden0.weight"][0, :] = 1e6
    p.trainables["out.bias"][0] = -1e9
    with pytest.warns(RuntimeWarning, match="3 values saturated"):
        blob = serialize_params(p, "fp16")
    back = deserialize_params(blob, dtype=np.float64)
    assert np.all(back.trainables["hidden0.weight"][0] == FP16_MAX)
    assert back.trainables["out.bias"][0] == -FP16_MAX


def test_no_warning_in_range(default_params):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        serialize_params(default_params, "fp16")


def test_nonfinite_rejected(default_params):
    p = default_params.copy()
    p.trainables["out.bias"][0] = np.nan
    with pytest.raises(ValueError):
        serialize_params(p)


def test_bad_magic_and_truncation(default_params):
    blob = serialize_params(default_params)
    with pytest.raises(ContainerError, match="magic"):
        deserialize_params(b"XXXXXXXX" + blob[8:])
    with pytest.raises(ContainerError):
        deserialize_params(blob[:-10])
    with pytest.raises(ContainerError):
        deserialize_params(blob[:20])
    with pytest.raises(ContainerError, match="trailing"):
        deserialize_params(blob + b"\0\0")


def test_save_load(tmp_path, default_params):
    n = save_params(default_params, tmp_path / "m.fmap", "fp32")
    assert n == (tmp_path / "m.fmap").stat().st_size
    back = load_params(tmp_path / "m.fmap")
    assert back.same_layout(default_params)
    assert np.array_equal(back.trainables["out.weight"], default_params.trainables["out.weight"])


def test_value_count_matches_param_count(default_params):
    lay = container_layout(serialize_params(default_params, "fp32"))
    assert lay["trainable_values"] == default_params.num_trainable()
