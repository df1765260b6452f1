"""Command-line entry point: ``flagflow run``."""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

from .errors import ConfigInvalid, RuntimeFailure
from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# command-line flag -> config field
_FLAG_FIELDS = {
    "experiment": "experiment",
    "m": "m",
    "k": "k",
    "T": "T",
    "dt": "dt",
    "paths": "n_paths",
    "seed": "master_seed",
    "out": "output_dir",
    "thin": "thin",
    "u": "u",
    "engine": "engine",
    "samples": "samples",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flagflow", description="Flag-manifold Brownian motion experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", help="JSON file with ExperimentConfig fields")
    r.add_argument("--experiment", choices=EXPERIMENTS)
    r.add_argument("--m", type=int)
    r.add_argument("--k", type=int)
    r.add_argument("--T", type=float)
    r.add_argument("--dt", type=float)
    r.add_argument("--paths", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--thin", type=int)
    r.add_argument("--u", type=float, nargs="+", help="martingale frequency vector")
    r.add_argument("--engine", choices=("auto", "unitary", "spectral"))
    r.add_argument("--samples", type=int, help="one-step samples per chart point")
    r.add_argument("--workers", type=int, default=1, help="process-pool size")
    r.add_argument("--json-only", action="store_true", help="skip paths.csv")
    return p


def config_from_args(args) -> ExperimentConfig:
    """Merge a config file with command-line overrides."""
    d = {}
    if args.config:
        try:
            with open(args.config) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigInvalid(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigInvalid("config file must hold a JSON object")
    for flag, name in _FLAG_FIELDS.items():
        v = getattr(args, flag)
        if v is not None:
            d[name] = v
    return ExperimentConfig.from_dict(d)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        if args.workers < 1:
            raise ConfigInvalid("workers must be at least 1")
    except ConfigInvalid as exc:
        print(f"flagflow: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = run_experiment(cfg, workers=args.workers, json_only=args.json_only)
    except RuntimeFailure as exc:
        print(f"flagflow: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    s = res.summary
    for c in s["checks"]:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: {c['value']} (target {c['target']}, tol {c['tolerance']})")
    print(f"flagged {s['n_flagged']}/{s['n_paths']}; verdict {'pass' if s['verdict'] else 'fail'}")
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
