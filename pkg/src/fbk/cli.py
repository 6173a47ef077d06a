"""Command-line entry point: ``fbk <command> [--config PATH] [--set key=value ...]``.

Exit codes: 0 pass, 1 verification failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import itertools
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, gradcheck
from .config import RngStreams, TrainConfig, load_config
from .data import DatasetIOError, SyntheticQuadraticSpec, balanced_subset, gen_synthetic, load_cifar
from .errors import ConfigError, FbkError, TrainingAborted
from .fb_dense import DropFactorMask, FbLayerParams, fb_forward, inference_mask, init_params
from .nn.presets import preset_from_config
from .nn.train import Split, evaluate, load_checkpoint, train
from .oracles import (
    BilinearPoolingModel,
    bilinear_paths,
    fb_equals_bilinear_construction,
    naive_fb,
)

log = logging.getLogger("fbk")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
ABLATIONS = ("k-sweep", "p-sweep", "kernel-size", "dropout-vs-dropfactor")


# -- shared plumbing -----------------------------------------------------------

def build_split(config: TrainConfig) -> Split:
    dtype = np.dtype(config.dtype)
    if config.dataset in ("synthetic", "synthetic-image"):
        spec = SyntheticQuadraticSpec(
            n=config.synth_n, rank=config.synth_rank, classes=config.synth_classes,
            n_train=config.synth_train, n_test=config.synth_test, noise=config.synth_noise,
            seed=config.seed, linear_scale=config.synth_linear_scale,
            image_shape=tuple(config.synth_image_shape) if config.dataset == "synthetic-image" else None,
        )
        d = gen_synthetic(spec, dtype)
        return Split(d.train_x, d.train_y, d.test_x, d.test_y, spec.classes,
                     images=config.dataset == "synthetic-image", content_hash=d.content_hash())
    if config.dataset in ("cifar10", "cifar100"):
        train_set, test_set = load_cifar(config.data_dir, config.dataset, dtype)
        if config.cifar_subset:
            train_set = balanced_subset(train_set, config.cifar_subset, RngStreams(config.seed).get("data", -1))
        return Split(train_set.images, train_set.labels, test_set.images, test_set.labels,
                     train_set.class_count, normalize=train_set.normalize, images=True,
                     content_hash=train_set.content_hash + ":" + test_set.content_hash)
    raise ConfigError(f"unknown dataset {config.dataset!r}")


def build_network(config: TrainConfig, split: Split):
    net = preset_from_config(config, split.classes, split.in_shape)
    net.init(RngStreams(config.seed).get("init"), np.dtype(config.dtype))
    net.set_debug(config.debug)
    return net


def write_report(out: Path, command: str, config: TrainConfig, body: dict, inputs_hash: str = "") -> Path:
    out.mkdir(parents=True, exist_ok=True)
    report = {"command": command, "config": config.to_dict(), "config_digest": config.digest(),
              "inputs_hash": inputs_hash, **body}
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return path


# -- commands ------------------------------------------------------------------

def cmd_gradcheck(config: TrainConfig, out: Path) -> int:
    results = gradcheck.run_grid(config.gc_ks, config.gc_kernels, seed=config.seed)
    worst = max(results, key=lambda r: r["max_rel_err"])
    worst_check = max(worst["checks"], key=lambda c: c["max_rel_err"])
    passed = worst["max_rel_err"] <= config.gc_threshold
    for r in results:
        print(f"{r['layer']:8s} k={r['k']:<3d} mode={r['mode']:5s} kernel={r.get('kernel', '-')!s:2s} "
              f"max rel err {r['max_rel_err']:.2e}")
    print(f"{'PASS' if passed else 'FAIL'}: worst {worst['layer']} k={worst['k']} {worst['mode']} "
          f"tensor {worst_check['tensor']} index {worst_check['worst_index']} rel err {worst['max_rel_err']:.2e}")
    write_report(out, "gradcheck", config, {
        "passed": passed, "threshold": config.gc_threshold, "results": results,
        "worst": {"layer": worst["layer"], "k": worst["k"], "mode": worst["mode"],
                  "kernel": worst.get("kernel"), **worst_check},
    })
    return EXIT_OK if passed else EXIT_FAIL


def oracle_checks(seed: int = 0, instances: int = 100) -> dict:
    """Kernel-vs-oracle comparisons; every entry carries its max abs diff and tolerance."""
    rng = np.random.default_rng(seed)
    naive_diff = 0.0
    for _ in range(instances):
        n, k, c = int(rng.integers(1, 33)), int(rng.integers(0, 9)), int(rng.integers(1, 4))
        params = init_params(c, n, k, rng, factor_std=rng.uniform(0.1, 1.0))
        x = rng.standard_normal((2, n))
        y, _ = fb_forward(x, params, inference_mask(k, 1.0))
        naive_diff = max(naive_diff, float(np.max(np.abs(y - naive_fb(x, params, 1.0)))))

    c, k, n, s = 3, 4, 6, 5
    F, w, b = rng.standard_normal((c, k, n)), rng.standard_normal((c, n)), rng.standard_normal(c)
    feats = rng.standard_normal((s, n))
    construction = fb_equals_bilinear_construction(F, w, b, feats)

    model = BilinearPoolingModel(rng.standard_normal((c, n * n)), rng.standard_normal(c))
    via_vec, via_loc = bilinear_paths(feats, model)

    k = 8
    params = init_params(2, 5, k, rng, factor_std=0.7)
    x = rng.standard_normal((3, 5))
    p = 0.5
    total = np.zeros((3, 2))
    for bits in itertools.product((0.0, 1.0), repeat=k):
        weight = np.prod([p if m else 1 - p for m in bits])
        gains = np.array(bits)
        total += weight * _train_output(x, params, p, gains)
    infer, _ = fb_forward(x, params, inference_mask(k, p))
    return {
        "naive_vs_factorized": {"instances": instances, "max_abs_diff": naive_diff, "tol": 1e-10},
        "bilinear_construction": {**construction, "tol": 1e-10},
        "bilinear_dual_path": {"max_abs_diff": float(np.max(np.abs(via_vec - via_loc))), "tol": 1e-10},
        "dropfactor_expectation": {"k": k, "p": p, "max_abs_diff": float(np.max(np.abs(total - infer))),
                                   "tol": 1e-10},
    }


def _train_output(x, params: FbLayerParams, p: float, bits: np.ndarray) -> np.ndarray:
    return fb_forward(x, params, DropFactorMask(p=p, m=bits))[0]


def cmd_oracle_compare(config: TrainConfig, out: Path) -> int:
    checks = oracle_checks(config.seed)
    ok = True
    for name, ch in checks.items():
        diffs = [ch["max_abs_diff"]] + ([ch["max_abs_diff_unnormalized"]] if "max_abs_diff_unnormalized" in ch else [])
        passed = max(diffs) <= ch["tol"]
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name:24s} max |diff| {max(diffs):.2e} (tol {ch['tol']:.0e})")
    write_report(out, "oracle-compare", config, {"passed": ok, "checks": checks})
    return EXIT_OK if ok else EXIT_FAIL


def cmd_bench(config: TrainConfig, out: Path) -> int:
    table = bench.table1_instantiate(512, 1000, 10000, 20)
    print(bench.table1_text(table))
    macs = bench.mac_grid([64, 128, 256, 512, 1024], [0, 1, 5, 20])
    macs_ok = all(r["counted"] == r["closed_form"] for r in macs)
    sweep = bench.runtime_sweep(config.bench_ns, config.bench_ks, c=config.bench_c, batch=config.bench_batch,
                                reps=config.bench_reps, fixed_k=config.bench_fixed_k,
                                fixed_n=config.bench_fixed_n, threads=config.threads, seed=config.seed)
    slopes = sweep["slopes"]
    bands = {"factorized_vs_n": (0.8, 1.3), "naive_vs_n": (1.7, 2.3)}
    in_band = {k: lo <= slopes[k] <= hi for k, (lo, hi) in bands.items()}
    print()
    print(bench.format_table(
        ["method", "n", "k", "median_s", "reliable"],
        [(p["method"], p["n"], p["k"], p["median_s"], p["reliable"]) for p in sweep["points"]]))
    print()
    for name, v in slopes.items():
        band = bands.get(name)
        note = f" band {band} {'ok' if in_band[name] else 'OUT'}" if band else ""
        print(f"slope {name:18s} {v:.3f}{note}")
    print(f"MAC counters match closed form: {macs_ok}")
    write_report(out, "bench", config, {"table1": table, "mac_grid": macs, "macs_match": macs_ok,
                                        "sweep": sweep, "slope_bands": bands, "in_band": in_band})
    return EXIT_OK if macs_ok and all(in_band.values()) else EXIT_FAIL


def cmd_train(config: TrainConfig, out: Path) -> int:
    split = build_split(config)
    net = build_network(config, split)
    start, opt_state = 0, None
    if config.resume:
        start, opt_state, _ = load_checkpoint(config.resume, net)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    with open(metrics_path, "a" if config.resume else "w") as fp:
        def emit(record):
            fp.write(json.dumps(record, sort_keys=True) + "\n")
            fp.flush()
            log.info("epoch %d lr %.4g loss %.4f train_err %.4f test_err %.4f", record["epoch"], record["lr"],
                     record["train_loss"], record["train_err"], record["test_err"])
        result = train(net, split, config, start_epoch=start, opt_state=opt_state, on_epoch=emit,
                       checkpoint_dir=out / "checkpoints")
    final = {k: v for k, v in result.epochs[-1].items() if k != "wallclock"} if result.epochs else {}
    write_report(out, "train", config, {"preset": net.name, "param_count": net.param_count(),
                                        "start_epoch": start, "final": final}, split.content_hash)
    print(json.dumps(final, sort_keys=True))
    return EXIT_OK


def cmd_eval(config: TrainConfig, out: Path) -> int:
    split = build_split(config)
    net = build_network(config, split)
    if config.checkpoint:
        load_checkpoint(config.checkpoint, net)
    err = evaluate(net, split, "test")
    write_report(out, "eval", config, {"preset": net.name, "checkpoint": config.checkpoint, "test_err": err},
                 split.content_hash)
    print(f"top-1 test error {err:.4f}")
    return EXIT_OK


def _ablation_rows(preset: str, config: TrainConfig, vector: bool):
    """(row label dict, config) pairs for an ablation preset."""
    fb = "fb-dense" if vector else "fbn"
    if preset == "k-sweep":
        return [({"k": k, "p": config.p}, config.replace(preset=fb, k=k)) for k in config.ablate_ks]
    if preset == "p-sweep":
        return [({"p": p, "k": config.k}, config.replace(preset=fb, p=p)) for p in config.ablate_ps]
    if preset == "kernel-size":
        rows = [({"kernel": "-", "method": "baseline"}, config.replace(preset="baseline"))]
        for kern in config.ablate_kernels:
            rows.append(({"kernel": f"{kern}x{kern}", "method": "fbn"},
                         config.replace(preset="fbn", kernel=kern)))
        return rows
    base = "linear" if vector else "baseline"
    drop = "fb-dense-dropout" if vector else "fbn-dropout"
    rate = config.dropout or 0.5
    return [
        ({"method": "baseline"}, config.replace(preset=base)),
        ({"method": "FBN"}, config.replace(preset=fb, p=1.0)),
        ({"method": "FBN + Dropout"}, config.replace(preset=drop, p=1.0, dropout=rate)),
        ({"method": "FBN + DropFactor"}, config.replace(preset=fb)),
        ({"method": "FBN + Dropout + DropFactor"}, config.replace(preset=drop, dropout=rate)),
    ]


ABLATION_COLUMNS = {
    "k-sweep": ["k", "p", "train_err", "test_err"],
    "p-sweep": ["p", "k", "train_err", "test_err"],
    "kernel-size": ["method", "kernel", "train_err", "test_err"],
    "dropout-vs-dropfactor": ["method", "train_err", "test_err"],
}


def cmd_ablate(preset: str, config: TrainConfig, out: Path) -> int:
    if preset == "kernel-size" and config.dataset == "synthetic":
        config = config.replace(dataset="synthetic-image")
    split = build_split(config)
    vector = len(split.in_shape) == 1
    deadline = time.perf_counter() + config.max_wallclock if config.max_wallclock else None
    rows, truncated = [], False
    for label, cfg in _ablation_rows(preset, config, vector):
        if deadline is not None and time.perf_counter() > deadline:
            truncated = True
            rows.append({**label, "train_err": None, "test_err": None, "truncated": True})
            continue
        net = build_network(cfg, split)
        result = train(net, split, cfg, deadline=deadline)
        last = result.epochs[-1] if result.epochs else {"train_err": None, "test_err": None}
        row = {**label, "train_err": last["train_err"], "test_err": last["test_err"],
               "epochs_run": len(result.epochs), "truncated": result.truncated}
        truncated |= result.truncated
        rows.append(row)
    columns = ABLATION_COLUMNS[preset]
    print(bench.format_table(columns + ["truncated"], [[r.get(c) for c in columns] + [r["truncated"]] for r in rows]))
    if truncated:
        print("TRUNCATED: wallclock cap reached")
    write_report(out, "ablate", config, {"preset": preset, "columns": columns, "rows": rows,
                                         "truncated": truncated}, split.content_hash)
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML key/value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--seed", type=int, help="root seed for all random streams")
    p.add_argument("--out", type=Path, help="output directory (default runs/<command>)")
    p.add_argument("--threads", type=int, help="BLAS thread count (default 1)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("gradcheck", "finite-difference check of FB gradients"),
                        ("oracle-compare", "compare FB kernels with brute-force oracles"),
                        ("train", "train a preset, writing metrics and checkpoints"),
                        ("eval", "top-1 test error of a (checkpointed) preset"),
                        ("bench", "complexity formulas and runtime scaling")):
        _common(sub.add_parser(name, help=help_))
    ab = sub.add_parser("ablate", help="run an ablation grid")
    ab.add_argument("preset", choices=ABLATIONS)
    _common(ab)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        config = load_config(args.config, overrides, args.seed)
        out = args.out or Path("runs") / args.command
        with threadpool_limits(config.threads):
            if args.command == "ablate":
                return cmd_ablate(args.preset, config, out)
            handler = {
                "gradcheck": cmd_gradcheck,
                "oracle-compare": cmd_oracle_compare,
                "train": cmd_train,
                "eval": cmd_eval,
                "bench": cmd_bench,
            }[args.command]
            return handler(config, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TrainingAborted as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except FbkError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
