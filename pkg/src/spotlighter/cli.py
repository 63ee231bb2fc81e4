"""Command-line front end.

Commands: gen, train, eval, ablate, gradcheck, bench. Exit codes: 0 success,
1 usage/config error, 2 data error, 3 numeric failure. SPOTLIGHTER_SEED
provides the default seed; an explicit config file value or --seed flag
overrides it. Config files are flat key=value text; flags override the file.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
import time
from dataclasses import fields

import numpy as np

from .config import RunConfig, parse_config_file
from .errors import (
    BadMagic,
    ConfigError,
    DimMismatch,
    EmptySelection,
    EmptySplit,
    HeaderMismatch,
    InvalidK,
    InvalidSpec,
    KOutOfRange,
    LabelOutOfRange,
    NonFiniteLoss,
    NonPositiveTemperature,
    NotADistribution,
    TruncatedFile,
    VersionMismatch,
    WorkloadTooSmall,
    ZeroVector,
)
from .features import generate_base_novel, read_features, write_features
from .pipeline import (
    bench_throughput,
    evaluate,
    gradcheck_total_loss,
    harmonic_mean,
    load_state,
    make_eval_class_set,
    predict_batch,
    save_state,
    split_accuracy,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_USAGE_ERRORS = (ConfigError, InvalidSpec, InvalidK, KOutOfRange, WorkloadTooSmall)
_DATA_ERRORS = (BadMagic, TruncatedFile, HeaderMismatch, VersionMismatch,
                DimMismatch, LabelOutOfRange, EmptySplit, EmptySelection, OSError)
_NUMERIC_ERRORS = (NonFiniteLoss, NotADistribution, ZeroVector, NonPositiveTemperature)

_GRADCHECK_DEFAULTS = dict(d=4, n_tok=8, n_classes=3, signal_tokens=2, k_act=4,
                           n_proto=2, heads=2, shots=1, test_per_class=1, epochs=0)


def _bool_flag(value: str) -> bool:
    low = value.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {value!r}")


_FLAG_TYPES = {bool: _bool_flag, int: int, float: float, str: str}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="flat key=value config file; flags override it")
    group = parser.add_argument_group("config overrides (defaults in brackets)")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        group.add_argument(flag, dest=f.name, default=None,
                           type=_FLAG_TYPES[type(f.default)],
                           help=f"[{f.default}]", metavar=f.name.upper())


def _build_config(args, extra_defaults: dict | None = None) -> RunConfig:
    data = RunConfig().to_dict()
    if extra_defaults:
        data.update(extra_defaults)
    env_seed = os.environ.get("SPOTLIGHTER_SEED")
    if env_seed is not None:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"SPOTLIGHTER_SEED: {exc}") from exc
    if args.config:
        data.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            data[f.name] = value
    return RunConfig.from_dict(data)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _build_config(args)
    base_train, base_test, novel_test = generate_base_novel(
        cfg.synth_spec(), cfg.shots, cfg.test_per_class
    )
    outdir = args.out_dir
    os.makedirs(outdir, exist_ok=True)
    paths = {}
    for name, fs in (("base-train", base_train), ("base-test", base_test),
                     ("novel-test", novel_test)):
        path = os.path.join(outdir, f"{name}.spot")
        write_features(fs, path)
        paths[name] = path
    print(
        f"generated seed={cfg.seed} classes={cfg.n_classes}+{cfg.n_classes} "
        f"tokens={cfg.n_tok}x{cfg.d} shots={cfg.shots} "
        f"test_per_class={cfg.test_per_class} -> {paths['base-train']} "
        f"{paths['base-test']} {paths['novel-test']}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _build_config(args)
    train_set = read_features(args.train)
    state = train(cfg, train_set)
    save_state(state, args.out)
    final_acc, _ = split_accuracy(state, train_set, use_trained_bank=True)
    report = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "history": state.history,
        "final_train_acc": round(final_acc, 2),
        "trainable_param_count": state.trainable_params,
        "checkpoint": args.out,
    }
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_state(args.checkpoint)
    if args.tier is not None:
        state.config = state.config.with_overrides(tier_mode=args.tier)
    base = read_features(args.base)
    novel = read_features(args.novel)
    metrics = evaluate(state, base, novel, tier_mode=state.config.tier_mode)
    rounded = {
        "base_acc": round(metrics.base_acc, 2),
        "novel_acc": round(metrics.novel_acc, 2),
        "harmonic_mean": round(metrics.harmonic, 2),
        "tier_mode": state.config.tier_mode,
        "per_class_base": [round(x, 2) for x in metrics.per_class_base],
        "per_class_novel": [round(x, 2) for x in metrics.per_class_novel],
    }
    print(f"{'split':<10}{'accuracy':>10}")
    print(f"{'base':<10}{rounded['base_acc']:>10.2f}")
    print(f"{'novel':<10}{rounded['novel_acc']:>10.2f}")
    print(f"{'harmonic':<10}{rounded['harmonic_mean']:>10.2f}")
    print(json.dumps(rounded, sort_keys=True))
    return EXIT_OK


_ABLATION_GRID = {
    "semantic_on": (True, False),
    "init_mode": ("text", "random"),
    "recalc_on": (True, False),
    "selection_variant": ("top-k", "bottom-k", "remove-top-k"),
    "tier_mode": ("both", "lev1", "lev2"),
}

_ABLATION_COLUMNS = (
    "semantic_on", "init_mode", "recalc_on", "selection_variant", "tier_mode",
    "base_acc", "novel_acc", "harmonic_mean", "items_per_sec", "status",
)


def cmd_ablate(args) -> int:
    base_cfg = _build_config(args)
    base_train, base_test, novel_test = generate_base_novel(
        base_cfg.synth_spec(), base_cfg.shots, base_cfg.test_per_class
    )
    names = list(_ABLATION_GRID)
    cells = list(itertools.product(*(_ABLATION_GRID[n] for n in names)))
    rows = []
    for i, values in enumerate(cells):
        overrides = dict(zip(names, values))
        row = {k: str(v) for k, v in overrides.items()}
        try:
            cfg = base_cfg.with_overrides(**overrides)
            state = train(cfg, base_train)
            metrics = evaluate(state, base_test, novel_test, tier_mode=cfg.tier_mode)
            ctx = make_eval_class_set(state, base_test.text_embeddings, True)
            times = []
            for _ in range(3):
                t0 = time.perf_counter()
                predict_batch(base_test.tokens, state, ctx, tier_mode=cfg.tier_mode)
                times.append(time.perf_counter() - t0)
            row.update(
                base_acc=f"{metrics.base_acc:.2f}",
                novel_acc=f"{metrics.novel_acc:.2f}",
                harmonic_mean=f"{metrics.harmonic:.2f}",
                items_per_sec=f"{base_test.n_items / float(np.median(times)):.1f}",
                status="ok",
            )
        except Exception as exc:  # record the failure, keep sweeping
            row.update(base_acc="", novel_acc="", harmonic_mean="",
                       items_per_sec="", status=f"error:{type(exc).__name__}")
        rows.append(row)
        print(f"[{i + 1}/{len(cells)}] {row['status']} "
              + " ".join(f"{k}={row[k]}" for k in names), file=sys.stderr)

    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_ABLATION_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    ok = sum(r["status"] == "ok" for r in rows)
    print(f"ablation sweep: {ok}/{len(rows)} cells ok -> {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _build_config(args, extra_defaults=_GRADCHECK_DEFAULTS)
    report = gradcheck_total_loss(cfg, n_seeds=args.seeds, eps=args.eps,
                                  corrupt=args.corrupt_gradient)
    for name, err in report["per_group"].items():
        print(f"{name:<14} worst {err:.3e}")
    print(f"max relative error over {report['seeds']} seeds: "
          f"{report['max_rel_error']:.3e} (threshold {report['threshold']:g})")
    print(json.dumps({k: report[k] for k in ("seeds", "eps", "max_rel_error",
                                             "threshold", "passed")},
                     sort_keys=True))
    return EXIT_OK if report["passed"] else EXIT_NUMERIC


_BENCH_COLUMNS = ("k", "is_full", "items_per_sec", "wallclock_s", "accuracy", "flops")


def cmd_bench(args) -> int:
    state = load_state(args.checkpoint)
    k_list = [int(tok) for tok in args.k_list.split(",") if tok.strip()]
    report = bench_throughput(state, n_items=args.items, k_list=k_list,
                              reps=args.reps, warmup=args.warmup)
    print(json.dumps(report.to_dict(), sort_keys=True))
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_BENCH_COLUMNS)
            for row in report.rows:
                writer.writerow([row.k, row.k == state.config.n_tok,
                                 f"{row.items_per_sec:.1f}", f"{row.wallclock_s:.6f}",
                                 f"{row.accuracy:.2f}", row.flops])
            full = report.full_row
            if full.k not in [r.k for r in report.rows]:
                writer.writerow([full.k, True, f"{full.items_per_sec:.1f}",
                                 f"{full.wallclock_s:.6f}", f"{full.accuracy:.2f}",
                                 full.flops])
    return EXIT_OK


# --------------------------------------------------------------------------
# parser / dispatch
# --------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spotlighter",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate base/novel synthetic feature files")
    _add_config_flags(p)
    p.add_argument("--out-dir", default=".", help="directory for the .spot files")
    p.set_defaults(run=cmd_gen)

    p = sub.add_parser("train", help="train the fusion modules on a feature file")
    _add_config_flags(p)
    p.add_argument("--train", required=True, help="base-train feature file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(run=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on base and novel splits")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--base", required=True, help="base-test feature file")
    p.add_argument("--novel", required=True, help="novel-test feature file")
    p.add_argument("--tier", choices=("both", "lev1", "lev2"), default=None,
                   help="override inference tier mode")
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("ablate", help="run the fixed 72-cell ablation grid")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="CSV output path")
    p.set_defaults(run=cmd_ablate)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all trainable gradients")
    _add_config_flags(p)
    p.add_argument("--seeds", type=int, default=100, help="[100]")
    p.add_argument("--eps", type=float, default=1e-5, help="[1e-5]")
    p.add_argument("--corrupt-gradient", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(run=cmd_gradcheck)

    p = sub.add_parser("bench", help="throughput/accuracy sweep over k")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--items", type=int, default=1000, help="[1000]")
    p.add_argument("--reps", type=int, default=5, help="[5]")
    p.add_argument("--warmup", type=int, default=1, help="[1]")
    p.add_argument("--k-list", default="4,8,16,32", help="[4,8,16,32]")
    p.add_argument("--csv", default=None, help="also write rows to this CSV")
    p.set_defaults(run=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; keep 0 for --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.run(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
