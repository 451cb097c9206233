from __future__ import annotations

import argparse

from app.commands.common import add_dataset_args, add_format, add_jobs, config_file, emit, training_and_holdout
from app.services.evaluate import holdout_eval
from app.services.mlp import load_model
from app.services.report import render_holdout


def register(subparsers) -> None:
    p = subparsers.add_parser("holdout", help="per-wafer errors on the manifest's holdout wafers")
    p.add_argument("--model", type=config_file, required=True)
    add_dataset_args(p)
    add_format(p)
    add_jobs(p)
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    train_ds, test_ds = training_and_holdout(args.manifest, args.target, args.jobs)
    # a checkpoint without fitted_on falls back to the manifest's training wafers
    trained_on = model.standardization.fitted_on or tuple(train_ds.wafers())
    rows = holdout_eval(model, test_ds, training_wafers=trained_on)
    emit(render_holdout(rows, args.format), args.out)
    return 0
