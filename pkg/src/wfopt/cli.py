"""Command-line interface: ``wfopt {run,density,compare,nmad,space}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ExperimentConfig,
    density_study,
    nmad_report,
    policy_compare,
    run_experiment,
    space_summary,
    write_report,
    write_text,
)
from .learners import GRID_LABEL
from .twostage import Policy


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.experiment)
    return cfg.with_overrides(seed=args.seed, budget_mode=args.budget_mode, budget_total=args.budget_total)


def cmd_run(args) -> int:
    cfg = _load(args)
    rep = run_experiment(cfg)
    out = Path(args.out)
    write_report(rep, out / "trace.jsonl", out / "summary.json")
    best = rep.summary()["best"]
    print(f"{cfg.policy.label()}: best score {best['score']:.4f} after {len(rep.trials)} trials ({GRID_LABEL} algorithm grid)")
    print(json.dumps({"pipeline": best["pipeline"], "algorithm": best["algorithm"]}, sort_keys=True))
    return 0


def cmd_density(args) -> int:
    cfg = _load(args)
    res = density_study(cfg, exhaustive=args.exhaustive, budget=args.budget)
    out = Path(args.out)
    write_text(out / "density.csv", res.to_csv())
    write_text(out / "density.summary.json", json.dumps(res.summary(), indent=2, sort_keys=True) + "\n")
    print(json.dumps(res.summary(), indent=2, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    policies = [Policy.parse(p, cfg.policy.epsilon) for p in args.policies] if args.policies else [cfg.policy]
    seeds = args.seeds if args.seeds else [cfg.seed]
    res = policy_compare(cfg, policies, seeds, args.out)
    sys.stdout.write(res.visited_csv())
    return 0


def cmd_nmad(args) -> int:
    rep = nmad_report(args.fixture)
    print(rep.render())
    if args.out:
        write_text(Path(args.out) / "nmad.json", json.dumps(rep.to_json(), indent=2) + "\n")
    return 0


def cmd_space(args) -> int:
    print(json.dumps(space_summary(_load(args)), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="out", help="output directory (default: ./out)")
    common.add_argument("--budget-mode", choices=("wall", "evals"), default=None)
    common.add_argument("--budget", dest="budget_total", type=float, default=None,
                        help="total budget T (seconds or evaluations)")
    common.add_argument("--seed", type=int, default=None, help="global seed (overrides the experiment file)")

    parser = argparse.ArgumentParser(prog="wfopt", description="Pipeline and hyperparameter optimization under a budget.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run the experiment's policy once")
    p.add_argument("experiment")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("density", parents=[common], help="score pipelines with the default algorithm")
    p.add_argument("experiment")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--exhaustive", action="store_true")
    group.add_argument("--evals", dest="budget", type=int, default=100, help="optimizer evaluations after the baseline")
    p.set_defaults(func=cmd_density)

    p = sub.add_parser("compare", parents=[common], help="run several policies over several seeds")
    p.add_argument("experiment")
    p.add_argument("--policies", nargs="+", help="e.g. 'split(0)' 'iterative(15)' 'adaptive(15)' joint")
    p.add_argument("--seeds", nargs="+", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("nmad", help="rank optimal configurations by NMAD")
    p.add_argument("fixture", help="fixture JSON path, or 'echr' / 'newsgroup'")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_nmad)

    p = sub.add_parser("space", parents=[common], help="print search-space cardinalities")
    p.add_argument("experiment")
    p.set_defaults(func=cmd_space)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"wfopt: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
