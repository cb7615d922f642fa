"""Command-line entry point: ``fedmap {gen-data,meta-train,fed-run,eval,bandwidth}``.

Exit codes: 0 success, 1 invalid arguments, configuration or inputs, 2 runtime failure.
Outputs go under ``--out``, else ``$FEDMAP_OUT``, else ``paths.outputs``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

import fedmap
from fedmap.config import ConfigError, ExperimentConfig, apply_overrides, load_config
from fedmap.evaluation import RouteSamplingError, sample_routes
from fedmap.federation import (
    AGGREGATORS,
    bandwidth_report,
    fmt,
    write_bandwidth_csv,
    write_round_csv,
)
from fedmap.mapping import (
    SYNTHETIC_KINDS,
    GridMap,
    MapFormatError,
    binarize,
    generate_quadrant_map,
    generate_synthetic,
    load_map,
    save_map,
)
from fedmap.encoding import cell_centers, encode
from fedmap.meta import MetaConfig, TaskCorpus, adaptation_curve, meta_train
from fedmap.seeding import substream
from fedmap.network import NumericalError, count_params, init_params
from fedmap.params_io import ContainerError, container_layout, save_params, serialize_params

log = logging.getLogger("fedmap")

OUT_ENV = "FEDMAP_OUT"
SUMMARY_COLUMNS = ("psnr", "ssim", "precision", "recall", "f1")
METRIC_COLUMNS = ("route_id", "found", "gt_valid", "cost_learned", "cost_gt")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    return {"fedmap": fedmap.__version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    root = args.out or os.environ.get(OUT_ENV) or (cfg.paths.outputs if cfg else "runs")
    path = Path(root)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out: Path, command: str, cfg: ExperimentConfig | None, files: list[Path],
                   timings: dict, extra: dict | None = None, status: str = "complete") -> Path:
    """Written with ``status="running"`` before a command starts, then finalized."""
    doc = {
        "command": command,
        "status": status,
        "argv": sys.argv[1:],
        "config": cfg.to_dict() if cfg else None,
        "seed": cfg.seed if cfg else None,
        "versions": versions(),
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "outputs": {p.name: sha256(p) for p in files},
    }
    if extra:
        doc.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def write_summary_csv(summary: dict, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        w.writerow([fmt(float(summary[k])) for k in SUMMARY_COLUMNS])


def write_metrics_csv(outcomes, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for o in outcomes:
            w.writerow([o.route_id, int(o.found), int(o.gt_valid), fmt(float(o.cost_learned)),
                        fmt(float(o.cost_gt))])


def get_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    sets = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        sets.append(f"seed={args.seed}")
    return apply_overrides(cfg, sets) if sets else cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    t0 = time.perf_counter()
    cfg = get_config(args)
    out = out_dir(args, cfg)
    write_manifest(out, "gen-data", cfg, [], {}, status="running")
    files = []
    entries = []
    if args.quadrant:
        m = generate_quadrant_map(args.size or cfg.data.map_size, cfg.seed, cfg.data.kinds,
                                  cfg.refinement.min_component)
        files.append(save_map(m, out / f"quadrant_{m.width}_s{cfg.seed}.pgm"))
        entries.append({"path": files[-1].name, "category": "quadrant"})
    else:
        kinds = args.kind or list(SYNTHETIC_KINDS)
        size = args.size or cfg.meta.map_size
        for kind in kinds:
            for i in range(args.count):
                seed = cfg.seed * 100_000 + i
                files.append(save_map(generate_synthetic(kind, size, seed), out / f"{kind}_{size}_{seed}.pgm"))
                entries.append({"path": files[-1].name, "category": kind})
    corpus = out / "corpus.json"
    corpus.write_text(json.dumps({"maps": entries}, indent=2) + "\n")
    files.append(corpus)
    write_manifest(out, "gen-data", cfg, files, {"total": time.perf_counter() - t0})
    print(f"wrote {len(entries)} map(s) to {out}")
    return 0


def held_out_psnr(cfg: ExperimentConfig, enc, inits: dict, n_maps: int, iters: int = 2) -> dict:
    """Mean PSNR after ``iters`` adaptation steps on maps disjoint from the training corpus."""
    from fedmap.experiment import held_out_maps

    size = cfg.meta.map_size
    maps = held_out_maps(cfg, n_maps)
    feats = encode(cell_centers(size, size), enc)
    out = {}
    for name, params in inits.items():
        vals = [adaptation_curve(params, g, enc, iters, cfg.training.lr, feats)[-1] for g in maps]
        out[name] = float(np.mean(vals)) if vals else float("nan")
    return out


def cmd_meta_train(args) -> int:
    from fedmap.experiment import empty_init, make_encoder, meta_corpus

    t0 = time.perf_counter()
    cfg = get_config(args)
    out = out_dir(args, cfg)
    write_manifest(out, "meta-train", cfg, [], {}, status="running")
    enc = make_encoder(cfg)
    m = cfg.meta
    if args.corpus:
        try:
            corpus = TaskCorpus.from_manifest(args.corpus)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{args.corpus}: {exc}") from None
    else:
        corpus = meta_corpus(cfg)
    theta0 = empty_init(cfg, enc)
    t1 = time.perf_counter()
    mcfg = MetaConfig(m.outer_step, m.inner_iters, m.inner_lr, m.meta_iterations,
                      m.tasks_per_meta_step, cfg.seed)
    theta = meta_train(theta0, corpus, mcfg, enc)
    t2 = time.perf_counter()
    path = out / "meta_init.fmap"
    save_params(theta, path, "fp32", extra={"seed": cfg.seed, "kind": "meta-init"})
    summary = out / "meta_summary.csv"
    rows = held_out_psnr(cfg, enc, {"meta": theta, "empty": theta0,
                                    "random": init_params(theta.config, substream(cfg.seed, "init"))},
                         args.held_out)
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("init", "maps", "psnr_after_2_iters"))
        for name, value in rows.items():
            w.writerow((name, args.held_out, fmt(value)))
    write_manifest(out, "meta-train", cfg, [path, summary],
                   {"pretrain": t1 - t0, "meta_train": t2 - t1, "total": time.perf_counter() - t0},
                   {"corpus_size": len(corpus)})
    print("held-out 2-iteration psnr " + " ".join(f"{k} {v:.3f}" for k, v in rows.items()))
    print(f"meta-init written to {path}")
    return 0


def cmd_fed_run(args) -> int:
    from fedmap.experiment import run_federated

    t0 = time.perf_counter()
    cfg = get_config(args)
    if args.aggregator:
        cfg = apply_overrides(cfg, [f"federation.aggregator={args.aggregator}"])
    out = out_dir(args, cfg)
    write_manifest(out, "fed-run", cfg, [], {}, status="running")
    res = run_federated(cfg, jobs=args.jobs)
    files = [
        out / "rounds.csv", out / "metrics.csv", out / "summary.csv",
        out / "global.fmap", out / "gt.pgm", out / "learned_raw.pgm", out / "learned_refined.pgm",
    ]
    write_round_csv(res.reports, files[0])
    write_metrics_csv(res.assessment.outcomes, files[1])
    write_summary_csv(res.assessment.summary(), files[2])
    save_params(res.global_params, files[3], cfg.training.precision, extra={"seed": cfg.seed})
    save_map(res.setup.gt, files[4])
    save_map(GridMap(res.assessment.raw.gray()), files[5])
    save_map(res.assessment.refined, files[6])
    timings = dict(res.timings, total=time.perf_counter() - t0)
    write_manifest(out, "fed-run", cfg, files, timings,
                   {"threshold": res.assessment.threshold, "jobs": args.jobs,
                    "summary": res.assessment.summary(), "raw_summary": res.assessment.raw_summary()})
    for label, s in (("refined", res.assessment.summary()), ("raw", res.assessment.raw_summary())):
        print(f"{label:8s} psnr {s['psnr']:.3f} ssim {s['ssim']:.4f} precision {s['precision']:.3f} "
              f"recall {s['recall']:.3f} f1 {s['f1']:.3f}")
    return 0


def cmd_eval(args) -> int:
    from fedmap.experiment import assess

    t0 = time.perf_counter()
    cfg = get_config(args)
    out = out_dir(args, cfg)
    write_manifest(out, "eval", cfg, [], {}, status="running")
    gt = load_map(args.gt)
    learned = load_map(args.learned)
    if gt.shape != learned.shape:
        raise UsageError(f"map sizes differ: {gt.shape} vs {learned.shape}")
    routes = sample_routes(binarize(gt), cfg.eval.n_routes, cfg.seed, cfg.eval.min_separation)
    a = assess(cfg, learned, gt, routes)
    files = [out / "metrics.csv", out / "summary.csv"]
    write_metrics_csv(a.outcomes, files[0])
    write_summary_csv(a.summary(), files[1])
    write_manifest(out, "eval", cfg, files, {"total": time.perf_counter() - t0},
                   {"inputs": {"gt": sha256(Path(args.gt)), "learned": sha256(Path(args.learned))},
                    "threshold": a.threshold, "summary": a.summary(), "raw_summary": a.raw_summary()})
    print(f"f1 {a.plan.f1:.3f} psnr {a.psnr:.3f} ssim {a.ssim:.4f}")
    return 0


def cmd_bandwidth(args) -> int:
    t0 = time.perf_counter()
    out = out_dir(args)
    if args.params:
        blob = Path(args.params).read_bytes()
        lay = container_layout(blob)
    else:
        lay = container_layout(serialize_params(init_params(), "fp16"))
    model_bytes = lay["trainable_bytes"] if args.payload == "trainable" else lay["total_bytes"]
    rows = bandwidth_report(model_bytes)
    path = out / "bandwidth.csv"
    write_bandwidth_csv(rows, path)
    write_manifest(out, "bandwidth", None, [path], {"total": time.perf_counter() - t0},
                   {"layout": lay, "count_params": count_params()})
    for r in rows:
        print(f"{r.format:9s} {r.width}x{r.height} raw {r.raw_bytes:>9d} B  model {r.model_bytes} B  "
              f"reduction {r.reduction_pct:6.2f}%  (reference {r.reference_pct:.2f}%)")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmap", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or paths.outputs)")
        if config:
            sp.add_argument("--config", help="JSON or YAML experiment config")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a config field, e.g. training.lr=1e-3")
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-data", help="write synthetic maps and a corpus manifest")
    common(sp)
    sp.add_argument("--kind", action="append", choices=SYNTHETIC_KINDS)
    sp.add_argument("--count", type=int, default=10)
    sp.add_argument("--size", type=int)
    sp.add_argument("--quadrant", action="store_true", help="one heterogeneous 4-quadrant map")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("meta-train", help="empty-map pretraining followed by Reptile")
    common(sp)
    sp.add_argument("--corpus", help="corpus manifest from gen-data (default: generated in memory)")
    sp.add_argument("--held-out", type=int, default=5, help="held-out maps for the summary")
    sp.set_defaults(func=cmd_meta_train)

    sp = sub.add_parser("fed-run", help="simulate federated mapping and score the global map")
    common(sp)
    sp.add_argument("--aggregator", choices=AGGREGATORS)
    sp.add_argument("--jobs", type=int, default=1, help="clients trained concurrently")
    sp.set_defaults(func=cmd_fed_run)

    sp = sub.add_parser("eval", help="score a learned map against ground truth")
    common(sp)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--learned", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bandwidth", help="raw-map vs model transfer sizes")
    common(sp, config=False)
    sp.add_argument("--params", help="parameter container (default: freshly initialized model)")
    sp.add_argument("--payload", choices=("trainable", "container"), default="trainable")
    sp.set_defaults(func=cmd_bandwidth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError, MapFormatError, ContainerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, RouteSamplingError, RuntimeError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
