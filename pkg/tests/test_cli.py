import csv
import json

import numpy as np
import pytest

from fedmap.cli import main, sha256
from fedmap.config import ExperimentConfig, apply_overrides
from fedmap.evaluation import sample_routes
from fedmap.experiment import assess, empty_init, make_encoder
from fedmap.mapping import GridMap, binarize, generate_quadrant_map, load_map, save_map
from fedmap.network import count_params
from fedmap.params_io import load_params

SMALL = ["--set", "data.map_size=64", "--set", "training.local_epochs=2", "--set", "training.pretrain_iters=3",
         "--set", "eval.n_routes=8", "--set", "training.pretrain_size=16"]


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_bandwidth(tmp_path, capsys):
    assert main(["bandwidth", "--out", str(tmp_path)]) == 0
    got = {(r["format"], r["width"]): float(r["reduction_pct"]) for r in rows(tmp_path / "bandwidth.csv")}
    assert abs(got[("ccm", "600")] - 93.8) <= 0.05
    assert abs(got[("omg", "600")] - 81.5) <= 0.05
    assert round(got[("grayscale", "2000")], 2) == 90.02
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "complete"
    assert manifest["outputs"]["bandwidth.csv"] == sha256(tmp_path / "bandwidth.csv")


def test_output_root_from_env(tmp_path, monkeypatch):
    monkeypatch.setenv("FEDMAP_OUT", str(tmp_path / "envroot"))
    assert main(["bandwidth"]) == 0
    assert (tmp_path / "envroot" / "bandwidth.csv").exists()


def test_gen_data_count_zero(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "0"]) == 0
    assert json.loads((tmp_path / "corpus.json").read_text()) == {"maps": []}


def test_gen_data_deterministic_and_loadable(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["gen-data", "--out", str(d), "--kind", "crevasse", "--count", "20", "--size", "128"]) == 0
    entries = json.loads((a / "corpus.json").read_text())["maps"]
    assert len(entries) == 20
    for e in entries:
        assert sha256(a / e["path"]) == sha256(b / e["path"])
        g = load_map(a / e["path"])
        assert g.shape == (128, 128)


def test_gen_data_quadrant(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--quadrant", "--size", "64"]) == 0
    assert load_map(tmp_path / "quadrant_64_s0.pgm").shape == (64, 64)


def test_meta_train_zero_iterations(tmp_path, capsys):
    args = ["meta-train", "--out", str(tmp_path), "--set", "meta.meta_iterations=0",
            "--set", "training.pretrain_iters=3", "--set", "training.pretrain_size=16", "--held-out", "2"]
    assert main(args) == 0
    out = load_params(tmp_path / "meta_init.fmap")
    assert count_params(out.config) == 199_683
    cfg = apply_overrides(ExperimentConfig(), ["training.pretrain_iters=3", "training.pretrain_size=16"])
    ref = empty_init(cfg, make_encoder(cfg))
    for k, a in ref.arrays().items():
        assert np.array_equal(out.arrays()[k], a)
    summary = {r["init"]: r for r in rows(tmp_path / "meta_summary.csv")}
    assert set(summary) == {"meta", "empty", "random"}
    assert "held-out 2-iteration psnr" in capsys.readouterr().out


def test_meta_train_from_corpus(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--count", "1", "--size", "32"]) == 0
    args = ["meta-train", "--out", str(tmp_path / "m"), "--corpus", str(tmp_path / "corpus.json"),
            "--set", "meta.meta_iterations=1", "--set", "meta.inner_iters=1", "--set", "meta.map_size=32",
            "--set", "training.pretrain_iters=1", "--held-out", "1"]
    assert main(args) == 0
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert manifest["corpus_size"] == 3


def test_meta_train_empty_corpus(tmp_path):
    (tmp_path / "c.json").write_text('{"maps": []}')
    assert main(["meta-train", "--out", str(tmp_path), "--corpus", str(tmp_path / "c.json")]) == 1


def test_fed_run_outputs_and_jobs_determinism(tmp_path):
    outs = []
    for jobs in ("1", "2"):
        d = tmp_path / f"j{jobs}"
        assert main(["fed-run", "--out", str(d), "--jobs", jobs, *SMALL]) == 0
        outs.append(d)
    for name in ("summary.csv", "rounds.csv", "metrics.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    r = rows(outs[0] / "rounds.csv")
    assert [int(x["client_id"]) for x in r] == [0, 1, 2, 3]
    assert all(int(x["uplink_bytes"]) == 403_048 for x in r)
    assert list(rows(outs[0] / "summary.csv")[0]) == ["psnr", "ssim", "precision", "recall", "f1"]
    assert list(rows(outs[0] / "metrics.csv")[0]) == ["route_id", "found", "gt_valid", "cost_learned", "cost_gt"]
    manifest = json.loads((outs[0] / "manifest.json").read_text())
    assert manifest["status"] == "complete" and manifest["seed"] == 0
    assert set(manifest["outputs"]) >= {"summary.csv", "global.fmap", "learned_refined.pgm"}


@pytest.fixture(scope="module")
def gt_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("gt")
    gt = generate_quadrant_map(128, 0)
    save_map(gt, d / "gt.pgm")
    save_map(GridMap(1.0 - gt.gray()), d / "inv.pgm")
    return d


def test_eval_identical(gt_file, tmp_path):
    g = str(gt_file / "gt.pgm")
    assert main(["eval", "--out", str(tmp_path), "--gt", g, "--learned", g, "--set", "eval.n_routes=20"]) == 0
    s = rows(tmp_path / "summary.csv")[0]
    assert s["psnr"] == "inf" and float(s["ssim"]) == 1.0 and float(s["f1"]) == 1.0


def test_eval_inverted(gt_file, tmp_path):
    assert main(["eval", "--out", str(tmp_path), "--gt", str(gt_file / "gt.pgm"),
                 "--learned", str(gt_file / "inv.pgm"), "--set", "eval.n_routes=20"]) == 0
    assert float(rows(tmp_path / "summary.csv")[0]["f1"]) == 0.0


def test_eval_matches_library(gt_file, tmp_path):
    gt = load_map(gt_file / "gt.pgm")
    noisy = GridMap(np.clip(gt.gray() + np.random.default_rng(0).normal(0, 0.2, gt.shape), 0, 1))
    save_map(noisy, tmp_path / "noisy.pgm")
    assert main(["eval", "--out", str(tmp_path), "--gt", str(gt_file / "gt.pgm"),
                 "--learned", str(tmp_path / "noisy.pgm"), "--set", "eval.n_routes=20"]) == 0
    cfg = apply_overrides(ExperimentConfig(), ["eval.n_routes=20"])
    routes = sample_routes(binarize(gt), 20, 0, cfg.eval.min_separation)
    a = assess(cfg, load_map(tmp_path / "noisy.pgm"), gt, routes)
    s = rows(tmp_path / "summary.csv")[0]
    assert s["psnr"] == f"{a.psnr:.6f}" and s["ssim"] == f"{a.ssim:.6f}" and s["f1"] == f"{a.plan.f1:.6f}"


def test_eval_dim_mismatch(gt_file, tmp_path):
    save_map(GridMap(np.zeros((64, 64))), tmp_path / "small.pgm")
    assert main(["eval", "--out", str(tmp_path), "--gt", str(gt_file / "gt.pgm"),
                 "--learned", str(tmp_path / "small.pgm")]) == 1


@pytest.mark.parametrize("argv", [
    ["fed-run", "--set", "bogus=1"],
    ["fed-run", "--set", "training.lr=-1"],
    ["fed-run", "--jobs", "0"],
    ["eval", "--gt", "/nonexistent.pgm", "--learned", "/nonexistent.pgm"],
    ["nosuchcommand"],
    [],
])
def test_validation_errors_exit_1(argv, tmp_path, capsys):
    argv = argv[:1] + (["--out", str(tmp_path)] if argv and argv[0] in ("fed-run", "eval") else []) + argv[1:]
    assert main(argv) == 1
