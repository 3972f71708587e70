"""Command-line entry point: ``sfbs run|certify|reproduce-52|export-schema``."""

from __future__ import annotations

import argparse
import json
import sys

from .config import SCHEMA, build_experiment
from .errors import ConfigurationError, ParameterError, StructuralError
from .runner import EXIT_CERTIFICATE, EXIT_CONFIG, EXIT_OK, certify, run_experiment

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sfbs", description="Stochastic forward-backward experiments.")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run every seed of a configured experiment")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=None, help="override run.workers")
    c = sub.add_parser("certify", help="check schedule and oracle hypotheses only")
    c.add_argument("config")
    rp = sub.add_parser("reproduce-52", help="empirical-gradient decay-order reproduction")
    rp.add_argument("config")
    rp.add_argument("--seed", type=int, default=None)
    rp.add_argument("--iters", type=int, default=None)
    rp.add_argument("--trials", type=int, default=None)
    sub.add_parser("export-schema", help="print the configuration JSON schema")
    return p


def _print_certificate(cert) -> None:
    for cl in cert.clauses:
        mark = "ok  " if cl.passed else "FAIL"
        print(f"  [{mark}] ({cl.clause}) {cl.name}: {cl.detail}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verb == "export-schema":
        json.dump(SCHEMA, sys.stdout, indent=1, sort_keys=True)
        sys.stdout.write("\n")
        return EXIT_OK
    try:
        exp = build_experiment(args.config)
    except (ConfigurationError, ParameterError, StructuralError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.verb == "certify":
            cert = certify(exp)
            print(f"{exp.name}: certificate {'passed' if cert.passed else 'FAILED'}")
            _print_certificate(cert)
            return EXIT_OK if cert.passed else EXIT_CERTIFICATE
        if args.verb == "run":
            status, summary = run_experiment(exp, workers=args.workers)
            cert = summary["certificate"]
            if not cert["passed"]:
                bad = [c for c in cert["clauses"] if not c["passed"]]
                for c in bad:
                    print(f"certificate failure: admissibility clause ({c['clause']}): {c['detail']}",
                          file=sys.stderr)
            for r in summary["runs"]:
                if r["diverged"]:
                    print(f"seed {r['seed']}: diverged at n={r['n']}: {r['error']}", file=sys.stderr)
                else:
                    print(f"seed {r['seed']}: n={r['final_n']} residual={r['final_residual']:.3e}")
            print(f"exit status {status}; summary in {exp.output_dir / 'summary.json'}")
            return status
        from .reproduce import reproduce_empirical, write_reproduction
        res = reproduce_empirical(exp, seed=args.seed, N=args.iters, trials=args.trials)
        csv_path, js = write_reproduction(res, exp.output_dir, exp.digest)
        for k, v in res.slopes.items():
            print(f"slope {k}: {v:.3f}")
        print(f"tail fraction sum sqrt(lambda) bias: {res.tail_fraction:.4f}")
        for k, v in res.verdicts.items():
            print(f"{k}: {'pass' if v else 'FAIL'}")
        print(f"series in {csv_path}")
        return EXIT_OK if res.passed else 1
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
