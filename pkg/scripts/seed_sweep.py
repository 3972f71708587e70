"""Run one bundled (or user) configuration over a range of seeds and print
per-seed verdicts and pass rates.

    python3 scripts/seed_sweep.py lasso_stochastic --seeds 0:20 --iters 30000
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import sfbs
from sfbs.config import build_experiment
from sfbs.runner import run_experiment

FIXTURES = Path(sfbs.__file__).resolve().parent / "fixtures"


def parse_seeds(text):
    if ":" in text:
        a, b = text.split(":")
        return list(range(int(a), int(b)))
    return [int(s) for s in text.split(",")]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", help="config path or bundled fixture name")
    ap.add_argument("--seeds", default=None, help="'a:b' range or comma list")
    ap.add_argument("--iters", type=int, default=None)
    ap.add_argument("--workers", type=int, default=None)
    args = ap.parse_args(argv)

    path = Path(args.config)
    if not path.exists():
        path = FIXTURES / f"{args.config}.toml"
    exp = build_experiment(path)
    if args.seeds:
        exp = dataclasses.replace(exp, seeds=parse_seeds(args.seeds))
    if args.iters:
        exp = dataclasses.replace(exp, stop=dataclasses.replace(exp.stop, max_iters=args.iters))
    status, summary = run_experiment(exp, workers=args.workers)
    for r in summary["runs"]:
        if r["diverged"]:
            print(f"seed {r['seed']:4d}: diverged at n={r['n']}")
            continue
        fj = r.get("fejer", {}).get("passed")
        sm = r.get("summability", {}).get("passed")
        dist = r.get("final_distance", float("nan"))
        print(f"seed {r['seed']:4d}: n={r['final_n']} residual={r['final_residual']:.3e} "
              f"distance={dist:.3e} fejer={fj} summable={sm}")
    for k, v in summary.get("pass_rates", {}).items():
        print(f"{k}: {v}")
    print(f"artifacts in {exp.output_dir}")
    return status


if __name__ == "__main__":
    sys.exit(main())
