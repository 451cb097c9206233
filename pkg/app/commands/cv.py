from __future__ import annotations

import argparse
from pathlib import Path

from app.commands.common import (
    add_dataset_args,
    add_format,
    add_jobs,
    add_training_args,
    cv_options,
    emit,
    training_and_holdout,
    with_seed,
)
from app.services.evaluate import loocv
from app.services.params import load_hyperparams
from app.services.report import render_report, write_curves


def register(subparsers) -> None:
    p = subparsers.add_parser("cv", help="wafer-grouped leave-one-out cross-validation")
    add_dataset_args(p)
    add_training_args(p)
    add_format(p)
    p.add_argument("--curves-dir", type=Path, default=None, help="write fold_<k>.csv learning curves here")
    add_jobs(p)
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    hp = with_seed(load_hyperparams(args.hyperparams), args.seed)
    train_ds, _ = training_and_holdout(args.manifest, args.target, args.jobs)
    summary = loocv(train_ds, hp, cv_options(args), jobs=args.jobs)
    if args.curves_dir is not None:
        write_curves(args.curves_dir, summary)
    emit(render_report(summary, args.format), args.out)
    return 0
