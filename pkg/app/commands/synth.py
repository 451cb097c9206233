from __future__ import annotations

import argparse
from pathlib import Path

from app.commands.common import add_jobs, config_file
from app.schemas import SynthConfig
from app.services.params import load_json_config
from app.services.synth import write_synth


def register(subparsers) -> None:
    p = subparsers.add_parser("synth", help="generate a synthetic run set with planted ground truth")
    p.add_argument("--config", type=config_file, required=True, help="SynthConfig JSON")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    add_jobs(p)
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    cfg = load_json_config(SynthConfig, args.config)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    write_synth(cfg, args.out, jobs=args.jobs)
    return 0
