"""Command line entry point: ``infoexplore <verb> ...``.

Verbs: ``train``, ``study-estimators``, ``aggregate``, ``histogram``, ``replay``.
Exit code 0 on success; otherwise a JSON object ``{"error", "message"}`` goes
to stderr and the exit code is 2 for bad input, 1 for anything else.
"""
from __future__ import annotations

import argparse
import json
import sys

from . import harness
from .envs import upper_half_coverage, write_histogram_csv


def _print(obj):
    print(json.dumps(obj, indent=2, default=str))


def cmd_train(args):
    overrides = {}
    for text in args.set or []:
        overrides = harness._deep_update(overrides, harness.parse_override(text))
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.episodes is not None:
        overrides["episodes"] = args.episodes
    if args.name is not None:
        overrides["name"] = args.name
    if args.config is not None:
        cfg = harness.load_config(args.config, overrides)
    else:
        cfg = harness.resolve_config({"preset": args.preset}, overrides)

    def progress(seed, row):
        if not args.quiet:
            print(f"seed {seed} episode {row.episode} step {row.step} train {row.train_reward:.3f} "
                  f"eval {row.eval_reward:.3f}", file=sys.stderr, flush=True)

    exp_dir = harness.run_experiment(cfg, args.output_root, progress)
    _print({"experiment": str(exp_dir), "config_hash": cfg.config_hash(), "seeds": list(cfg.seeds)})


def cmd_study(args):
    res = harness.run_estimator_study(args.out, seed=args.seed, n_models=args.n_models,
                                      sample_counts=args.sample_counts, kinds=args.kinds)
    _print({"files": {k: str(p) for k, p in res["paths"].items()}, "seconds": round(res["seconds"], 2),
            "rows": [{"kind": r.kind, "sample_count": r.sample_count, "mean": r.mean, "std": r.std}
                     for r in res["rows"]]})


def cmd_aggregate(args):
    dirs = [d for p in args.runs for d in harness.seed_dirs(p)]
    out = harness.aggregate(dirs, args.out)
    _print({"runs": [str(d) for d in dirs], "rows": len(out["step"]), "out": args.out})


def cmd_histogram(args):
    results = {}
    for d in harness.seed_dirs(args.run):
        grid = harness.run_histogram(d, args.bins)
        if args.out:
            path = f"{args.out}/{d.name}.csv" if len(harness.seed_dirs(args.run)) > 1 else args.out
            write_histogram_csv(grid, path)
        results[d.name] = {"visits": int(grid.sum()), "nonzero_cells": int((grid > 0).sum()),
                           "upper_half_cells": upper_half_coverage(grid)}
    _print(results)


def cmd_replay(args):
    res = harness.replay_episode(args.run, args.episode)
    _print(res)
    return 0 if res["exact"] else 1


class _JSONArgumentParser(argparse.ArgumentParser):
    """Usage errors are reported in the same JSON form as runtime errors."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": f"{self.prog}: {message}"}), file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _JSONArgumentParser(prog="infoexplore", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_JSONArgumentParser)

    t = sub.add_parser("train", help="run an experiment (all seeds) and aggregate it")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("config", nargs="?", help="YAML experiment config (may name a 'preset')")
    src.add_argument("--preset", choices=sorted(harness.EXPERIMENT_PRESETS))
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. planner.horizon=8")
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--episodes", type=int)
    t.add_argument("--name")
    t.add_argument("--output-root", help=f"defaults to ${harness.OUTPUT_ROOT_ENV} or ./runs")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("study-estimators", help="cosine similarity of NMC vs exact information")
    s.add_argument("--out", default="study")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n-models", type=int, default=1000)
    s.add_argument("--sample-counts", type=int, nargs="+", default=[16, 32, 64, 128, 256])
    s.add_argument("--kinds", nargs="+", default=["MI", "LI"], choices=["MI", "LI"])
    s.set_defaults(func=cmd_study)

    a = sub.add_parser("aggregate", help="mean/std across seed runs")
    a.add_argument("runs", nargs="+", help="seed or experiment directories")
    a.add_argument("--out", default="aggregate.csv")
    a.set_defaults(func=cmd_aggregate)

    h = sub.add_parser("histogram", help="visitation histogram of logged training episodes")
    h.add_argument("run", help="seed or experiment directory")
    h.add_argument("--bins", type=int, nargs=2, metavar=("NX", "NY"))
    h.add_argument("--out", help="CSV path (a directory when several seeds are given)")
    h.set_defaults(func=cmd_histogram)

    r = sub.add_parser("replay", help="re-simulate a logged training episode and compare")
    r.add_argument("run", help="seed directory")
    r.add_argument("--episode", type=int, default=0)
    r.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except (harness.ConfigError, ValueError, KeyError, IndexError, FileNotFoundError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # surface anything else in machine-readable form
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
