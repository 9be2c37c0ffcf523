"""Command line entry point: ``run``, ``sweep`` and ``gp-check``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data, gp, harness

EXTENDED_DATASETS = ("cifar10",)


def parse_seeds(text: str) -> list[int]:
    """``0..9`` (inclusive range) or a comma/space separated list."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.replace(",", " ").split()]


def _experiment_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--method", choices=[m for m in harness.METHODS if m != "gp_check"])
    p.add_argument("--dataset", choices=harness.DATASETS)
    p.add_argument("--split", help="T/C, e.g. 10/1")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--decay", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--budget", choices=harness.BUDGETS)
    p.add_argument("--steps", type=int)
    p.add_argument("--balancing", choices=harness.BALANCING)
    p.add_argument("--imbalanced", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--student-width", type=int)
    p.add_argument("--teacher-width", type=int)
    p.add_argument("--output-dim", type=int)
    p.add_argument("--pool-target", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--init", choices=["kaiming_uniform", "xavier", "uniform"])
    p.add_argument("--init-range", type=float)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--buffer-capacity", type=int)
    p.add_argument("--cma-generations", type=int)
    p.add_argument("--data-dir", help=f"dataset root (default ${data.DATA_DIR_ENV} or ~/data)")
    p.add_argument("--extended", action="store_true", help="allow hours-scale runs (CIFAR-10)")
    p.add_argument("--out", help="report path (.json or .csv)")
    p.add_argument("--format", choices=["json", "csv"])


FIELD_NAMES = {f.name for f in dataclasses.fields(harness.ExperimentConfig)}


def config_from_args(args) -> harness.ExperimentConfig:
    overrides = {k: v for k, v in vars(args).items() if k in FIELD_NAMES and v is not None}
    if args.config:
        cfg = harness.load_config(args.config, **overrides)
    else:
        cfg = harness.ExperimentConfig(**overrides)
    if cfg.dataset in EXTENDED_DATASETS and not args.extended:
        raise harness.ConfigError(f"{cfg.dataset} runs take hours on CPU; pass --extended")
    return cfg.validate()


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_run(args) -> int:
    cfg = config_from_args(args)
    report = harness.run_experiment(cfg)
    print(f"{cfg.method} {cfg.dataset} ({cfg.split}) seed {cfg.seed}: "
          f"accuracy {100 * report.accuracy:.2f}%  [{report.wall_time:.1f}s]")
    if args.out:
        harness.emit_report(report, args.out, args.format)
    return 0


def cmd_sweep(args) -> int:
    cfg = config_from_args(args)
    seeds = parse_seeds(args.seeds)

    def progress(r):
        print(f"  seed {r.seed}: {100 * r.accuracy:.2f}%  [{r.wall_time:.1f}s]", flush=True)

    sweep = harness.run_seed_sweep(cfg, seeds, progress=progress)
    a = sweep.accuracy
    flag = "  (single seed: SE undefined, reported as 0)" if a.single_seed else ""
    print(f"{cfg.method} {cfg.dataset} ({cfg.split}): {100 * a.mean:.2f} +- {100 * a.stderr:.2f} "
          f"over {a.n} seeds{flag}")
    if args.out:
        harness.emit_sweep(sweep, args.out, args.format)
    if args.runs_out:
        harness.emit_report(sweep.reports, args.runs_out)
    return 0


def cmd_gp_check(args) -> int:
    kernel = gp.RBFKernel(args.lengthscale, args.amplitude)
    cfg = gp.ImitatorConfig(width=args.width, max_steps=args.max_steps, seed=args.seed)
    if args.proposition == 1:
        rng = np.random.default_rng(args.seed)
        X = np.sort(rng.uniform(-3.0, 3.0, args.n_train))
        xs = np.linspace(-4.0, 4.0, args.n_test)
        report = gp.check_proposition1(kernel, X, xs, args.B, cfg, seed=args.seed)
        ok = report.pass_fraction >= 0.95
        print(f"proposition 1: s_B >= posterior variance - 3 SE at "
              f"{100 * report.pass_fraction:.1f}% of {args.n_test} points (B={args.B})")
    else:
        report = gp.check_proposition2(kernel, Ns=tuple(args.Ns), repeats=args.repeats, cfg=cfg,
                                       seed=args.seed)
        ok = report.non_increasing
        for n, m, s in zip(report.Ns, report.mean_s1, report.stderr):
            print(f"  N={n:>5}: mean s_1 = {m:.3e} +- {s:.1e}")
        print(f"proposition 2: non-increasing trend {'holds' if ok else 'violated'}")
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pec-cil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train and evaluate one configuration")
    _experiment_args(run)
    run.add_argument("--seed", type=int)
    run.set_defaults(func=cmd_run)

    sweep = sub.add_parser("sweep", help="run one configuration over several seeds")
    _experiment_args(sweep)
    sweep.add_argument("--seeds", default="0..9", help="e.g. 0..9 or 0,3,7")
    sweep.add_argument("--runs-out", help="also write every per-seed report here")
    sweep.set_defaults(func=cmd_sweep)

    chk = sub.add_parser("gp-check", help="numerical checks of the GP propositions")
    chk.add_argument("--proposition", type=int, choices=[1, 2], required=True)
    chk.add_argument("--seed", type=int, default=0)
    chk.add_argument("--B", type=int, default=64)
    chk.add_argument("--n-train", type=int, default=20)
    chk.add_argument("--n-test", type=int, default=100)
    chk.add_argument("--Ns", type=int, nargs="+", default=[10, 100, 1000])
    chk.add_argument("--repeats", type=int, default=6)
    chk.add_argument("--lengthscale", type=float, default=1.0)
    chk.add_argument("--amplitude", type=float, default=1.0)
    chk.add_argument("--width", type=int, default=256)
    chk.add_argument("--max-steps", type=int, default=10_000)
    chk.add_argument("--out")
    chk.set_defaults(func=cmd_gp_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "data_dir", None) is None and os.environ.get(data.DATA_DIR_ENV):
        args.data_dir = os.environ[data.DATA_DIR_ENV]
    try:
        return args.func(args)
    except (harness.ConfigError, data.DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
