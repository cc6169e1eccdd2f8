"""``csmud`` command line: generate, train, eval, bench, check.

Exit codes: 0 success, 1 failed check or diverged training, 2 config error,
3 missing artifact (model or dataset), 130 interrupted.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .bench import (
    NETWORKS,
    MissingArtifact,
    emit_report,
    evaluate,
    run_convergence,
    run_detection_sweep,
    run_timing,
)
from .neural.modelio import ModelFormatError, load_into, load_model, save_model
from .neural.network import build_network
from .neural.training import TrainingDiverged, TrainingTrace, train
from .sysmodel import DatasetFormatError, SplitPolicy, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("csmud")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_MISSING, EXIT_INTERRUPTED = 0, 1, 2, 3, 130
DATASET_FILES = {"train": "train.csds", "val": "val.csds", "test": "test.csds"}
MSE_COLUMNS = ("method", "sweep_axis", "sweep_value", "trials", "channel_mse",
               "empty_support_trials", "mean_time_s")


def model_path(out: Path, arch: str) -> Path:
    return out / f"{arch}.model"


def trace_path(out: Path, arch: str) -> Path:
    return out / f"{arch}_trace.csv"


def _dataset(out: Path, split: str):
    p = out / DATASET_FILES[split]
    if not p.exists():
        raise MissingArtifact(f"dataset {p} not found (run `csmud generate` first)")
    return load_dataset(p)


def _models(out: Path, methods) -> dict:
    models = {}
    if not any(m in NETWORKS for m in methods):
        return models
    for p in sorted(out.glob("*.model")):
        net = load_model(p)
        models[(net.arch, net.M - net.L + 1)] = net
        models.setdefault(net.arch, net)
    return models


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("CSMUD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise cfgmod.ConfigError(f"invalid thread count {raw!r}") from None
    if n < 1:
        raise cfgmod.ConfigError("thread count must be >= 1")
    return n


def cmd_generate(cfg, out: Path, threads: int) -> int:
    sc = cfgmod.system_config(cfg)
    d = cfg["data"]
    policies = {
        "train": (SplitPolicy("train", n=sc.n), d["train"]),
        "val": (SplitPolicy("val", n=sc.n), d["val"]),
        "test": (SplitPolicy("test", n_max=min(d["test_n_max"], sc.K)), d["test"]),
    }
    out.mkdir(parents=True, exist_ok=True)
    for split, (policy, count) in policies.items():
        ds = generate_dataset(sc, policy, int(count), workers=threads)
        save_dataset(ds, out / DATASET_FILES[split])
        log.info("wrote %s: %d samples, noise_var %.6g", DATASET_FILES[split], len(ds), ds.noise_var)
    return EXIT_OK


def _network(cfg):
    sc = cfgmod.system_config(cfg)
    m = cfg["model"]
    return build_network(m["arch"], sc.K, sc.L, sc.M, relu_layers=m["relu_layers"],
                         relu_width=m["relu_width"], residual_blocks=m["residual_blocks"],
                         head=m["head"], seed=cfg["train"]["seed"], dtype=np.dtype(m["dtype"]))


def cmd_train(cfg, out: Path) -> int:
    train_set = _dataset(out, "train")
    val_set = _dataset(out, "val")
    arch = cfg["model"]["arch"]
    net = _network(cfg)
    trace = TrainingTrace()
    mpath, tpath = model_path(out, arch), trace_path(out, arch)
    if cfg["train"]["resume"]:
        if not mpath.exists():
            raise MissingArtifact(f"cannot resume: {mpath} not found")
        load_into(net, mpath)
        if tpath.exists():
            trace = TrainingTrace.read_csv(tpath)
        log.info("resuming %s from batch %d", arch, net.batches_seen)

    def persist():
        save_model(net, mpath)
        trace.write_csv(tpath)

    try:
        train(net, train_set, val_set, cfgmod.train_config(cfg), trace=trace)
    except KeyboardInterrupt:
        persist()
        log.warning("interrupted; saved checkpoint at batch %d", net.batches_seen)
        return EXIT_INTERRUPTED
    except TrainingDiverged as e:
        e.trace.write_csv(tpath)
        log.error("%s", e)
        return EXIT_FAIL
    persist()
    log.info("saved %s (%d checkpoints)", mpath, len(trace))
    return EXIT_OK


def cmd_eval(cfg, out: Path) -> int:
    exp = cfgmod.experiment_config(cfg, out)
    test = _dataset(out, "test")
    models = _models(out, exp.methods)
    rows = evaluate(test, exp.methods, models, mse_normalized=exp.mse_normalized,
                    sweep_axis="n_max", sweep_value=cfg["data"]["test_n_max"], seed=exp.seed)
    inputs = [out / DATASET_FILES["test"]] + [model_path(out, m) for m in exp.methods
                                              if m in NETWORKS]
    emit_report(rows, out / "eval.csv", exp, inputs)
    _print_rows(rows)
    return EXIT_OK


def cmd_bench(cfg, out: Path) -> int:
    exp = cfgmod.experiment_config(cfg, out)
    kinds = set(cfg["bench"]["kinds"])
    out.mkdir(parents=True, exist_ok=True)
    models = _models(out, exp.methods)
    inputs = [model_path(out, m) for m in exp.methods if m in NETWORKS]
    if kinds & {"detection", "mse"}:
        rows = run_detection_sweep(exp, models)
        if "detection" in kinds:
            emit_report(rows, out / "detection.csv", exp, inputs)
        if "mse" in kinds:
            emit_report(rows, out / "mse.csv", exp, inputs, columns=MSE_COLUMNS)
        _print_rows(rows)
    if "timing" in kinds:
        rows = run_timing(exp, models)
        emit_report(rows, out / "timing.csv", exp, inputs)
        for r in rows:
            print(f"{r.method:6s} Ns={r.Ns:<3d} n={r.n:<2d} {r.mean_time_s:.3e} s")
    if "convergence" in kinds:
        m = cfg["model"]
        traces = run_convergence(exp.system, _dataset(out, "train"), _dataset(out, "val"),
                                 cfgmod.train_config(cfg), seed=cfg["train"]["seed"],
                                 relu_layers=m["relu_layers"], relu_width=m["relu_width"],
                                 residual_blocks=m["residual_blocks"], head=m["head"])
        for arch, tr in traces.items():
            tr.write_csv(out / f"convergence_{arch}.csv")
            print(f"{arch}: final smoothed loss {tr.smoothed_final_loss():.4f}")
    return EXIT_OK


def cmd_check(out: Path | None) -> int:
    from .selfcheck import run_all

    paths = sorted(out.glob("*.model")) if out is not None and out.is_dir() else []
    failed = 0
    for name, ok, detail in run_all(paths):
        print(f"[{'PASS' if ok else 'FAIL'}] {name} {detail}".rstrip())
        failed += not ok
    return EXIT_FAIL if failed else EXIT_OK


def _print_rows(rows):
    for r in rows:
        print(f"{r.method:6s} {r.sweep_axis}={r.sweep_value:<3d} success={r.exact_set_success_rate:.3f}"
              f" (+/-{r.confidence_halfwidth:.3f}) hit={r.user_hit_ratio:.3f}"
              f" mse={r.channel_mse:.4g} t={r.mean_time_s:.2e}s")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (sections as in --dump-config)")
    common.add_argument("--preset", default="desk", choices=sorted(cfgmod.PRESETS))
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, repeatable (e.g. system.n=4)")
    common.add_argument("--out", default="runs", help="output directory")
    common.add_argument("--seed", type=int, help="sets system.seed and train.seed")
    common.add_argument("--threads", help="worker/BLAS threads (default $CSMUD_THREADS or 1)")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--dump-config", action="store_true",
                        help="print the resolved config and exit")
    p = argparse.ArgumentParser(prog="csmud", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write train/val/test datasets")
    sub.add_parser("train", parents=[common], help="train model.arch on the generated data")
    sub.add_parser("eval", parents=[common], help="evaluate methods on the test split")
    sub.add_parser("bench", parents=[common], help="sweeps, timing table, convergence")
    sub.add_parser("check", parents=[common], help="run embedded self-tests")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = cfgmod.load(args.config, args.preset)
        overrides = list(args.override)
        if args.seed is not None:
            overrides += [f"system.seed={args.seed}", f"train.seed={args.seed}"]
        cfg = cfgmod.apply_overrides(cfg, overrides)
        threads = _threads(args)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        sys.stdout.write(cfgmod.dumps(cfg))
        return EXIT_OK

    from threadpoolctl import threadpool_limits

    out = Path(args.out)
    try:
        with threadpool_limits(limits=threads):
            if args.command == "generate":
                return cmd_generate(cfg, out, threads)
            if args.command == "train":
                return cmd_train(cfg, out)
            if args.command == "eval":
                return cmd_eval(cfg, out)
            if args.command == "bench":
                return cmd_bench(cfg, out)
            return cmd_check(out)
    except (MissingArtifact, FileNotFoundError) as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (DatasetFormatError, ModelFormatError) as e:
        print(f"bad artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
