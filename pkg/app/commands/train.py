from __future__ import annotations

import argparse
import logging
from pathlib import Path

from app.commands.common import add_dataset_args, add_jobs, add_training_args, cv_options, training_and_holdout, with_seed
from app.services.evaluate import best_fold_model, loocv, refit_all
from app.services.mlp import save_model
from app.services.params import load_hyperparams

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("train", help="train a model on the manifest's training wafers")
    add_dataset_args(p)
    add_training_args(p)
    p.add_argument("--refit", choices=["all", "best-fold"], default="all")
    p.add_argument("--out", type=Path, required=True, help="model checkpoint path")
    add_jobs(p)
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    hp = with_seed(load_hyperparams(args.hyperparams), args.seed)
    train_ds, _ = training_and_holdout(args.manifest, args.target, args.jobs)
    options = cv_options(args)
    if args.refit == "all":
        model, curve = refit_all(train_ds, hp, options)
        logger.info("Refit on all training wafers", extra={"epoch": curve.restored_epoch, "count": len(train_ds)})
    else:
        summary = loocv(train_ds, hp, options, jobs=args.jobs, keep_models=True)
        model = best_fold_model(summary)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.out)
    logger.info("Saved model", extra={"path": str(args.out)})
    return 0
