"""Command line interface: run studies, list models, replay runs."""

from __future__ import annotations

import argparse
import json
import sys


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="chebmap",
        description="Continuous-time trajectory estimation benchmarks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a configured Monte Carlo study")
    p_run.add_argument("--config", required=True, help="flat JSON config file")
    p_run.add_argument("--seed", type=int, default=None, help="override the master seed")
    p_run.add_argument("--runs", type=int, default=None, help="override the run count")
    p_run.add_argument("--out", default="chebmap_out", help="output directory")
    p_run.add_argument("--progress", action="store_true", help="print per-run progress")

    sub.add_parser("list-models", help="list registered system models")

    p_rep = sub.add_parser("replay", help="re-simulate one recorded run")
    p_rep.add_argument("--report", required=True, help="path to report.json")
    p_rep.add_argument("--run", type=int, required=True, help="run index to replay")

    args = parser.parse_args(argv)

    if args.command == "list-models":
        from .models import MODEL_BUILDERS

        for name in sorted(MODEL_BUILDERS):
            print(name)
        return 0

    if args.command == "run":
        from .accel import backend_name
        from .config import load_config, parse_config
        from .harness import run_monte_carlo

        try:
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg["seed"] = args.seed
            if args.runs is not None:
                cfg["runs"] = args.runs
            plan = parse_config(cfg)
        except (OSError, json.JSONDecodeError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"backend: {backend_name()}")
        print(f"model: {plan.model_name}, runs: {plan.runs}, seed: {plan.seed}")
        report, timings = run_monte_carlo(plan, out_dir=args.out,
                                          progress=args.progress)
        width = max(len(n) for n, _ in plan.estimators)
        for name, _ in plan.estimators:
            sec = report["estimators"][name]
            vals = sec.get("armse")
            txt = ("  ".join(f"{v:.4g}" for v in vals) if vals else "all runs failed")
            fails = len(sec["failed_runs"])
            suffix = f"  [{fails} failed]" if fails else ""
            print(f"{name:<{width}}  armse: {txt}{suffix}  ({timings[name]:.2f}s)")
        print(f"outputs written to {args.out}/")
        return 0

    if args.command == "replay":
        from .harness import replay

        try:
            out = replay(args.report, args.run)
        except (OSError, json.JSONDecodeError, ValueError, RuntimeError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(json.dumps(out, indent=1, sort_keys=True))
        return 0

    return 2


if __name__ == "__main__":
    raise SystemExit(main())
