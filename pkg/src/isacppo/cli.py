"""Command-line entry point: ``isacppo --preset paper-sim --algo ppo_pd --out-dir runs/a``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ALGOS, PRESETS, load_config
from .experiment import run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isacppo", description="IRS-aided THz ISAC beamforming workbench")
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, action="append", help="seed (repeatable); overrides the config")
    p.add_argument("--out-dir", default="runs/latest")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--algo", choices=ALGOS)
    p.add_argument("--episodes", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args) -> dict:
    o: dict = {"experiment": {}, "runtime": {}}
    if args.seed:
        o["experiment"]["seeds"] = ",".join(map(str, args.seed))
    if args.algo:
        o["experiment"]["algo"] = args.algo
    if args.episodes is not None:
        o["experiment"]["episodes"] = str(args.episodes)
    if args.workers is not None:
        o["runtime"]["workers"] = str(args.workers)
    if args.deterministic is not None:
        o["runtime"]["deterministic"] = str(args.deterministic)
    return {k: v for k, v in o.items() if v}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, preset=args.preset, overrides=_overrides(args))
        out = run_experiment(cfg, args.out_dir)
    except Exception as exc:
        print(json.dumps({"status": "error", "type": type(exc).__name__, "message": str(exc)}))
        return 2
    print(json.dumps({"status": "ok", "out_dir": str(out), "config_hash": cfg.hash()}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
