from __future__ import annotations

import argparse
import logging
from pathlib import Path

from app.commands.common import add_dataset_args, add_format, add_jobs, config_file, cv_options, emit, on_off, training_and_holdout
from app.config import settings
from app.errors import ConfigError
from app.services.evaluate import grid_search
from app.services.params import dump_hyperparams, load_grid
from app.services.report import render_ranking
from app.services.store import ResultCache

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    p = subparsers.add_parser("search", help="grid search ranked by mean validation NMSE")
    add_dataset_args(p)
    p.add_argument("--grid", type=config_file, required=True)
    p.add_argument("--budget", type=int, default=None, help="evaluate a seeded random subset of this size")
    p.add_argument("--seed", type=int, default=settings.DEFAULT_SEED, help="seed for the budget subset")
    p.add_argument("--standardize", type=on_off, default=True, metavar="{on,off}")
    p.add_argument("--expand", type=config_file, default=None, metavar="CONFIG")
    p.add_argument("--cache", default=settings.RESULTS_DATABASE_URL, help="SQLAlchemy URL of the result cache")
    p.add_argument("--best-out", type=Path, default=None, help="write the winning hyperparameters here")
    add_format(p)
    add_jobs(p)
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    if args.budget is not None and args.budget < 1:
        raise ConfigError(f"--budget must be >= 1, got {args.budget}")
    grid = load_grid(args.grid)
    train_ds, _ = training_and_holdout(args.manifest, args.target, args.jobs)
    cache = ResultCache(args.cache, train_ds.content_hash()) if args.cache else None
    if cache is not None:
        previous = cache.last_search()
        if previous:
            logger.info(
                "Previous search on this dataset",
                extra={"hyperparams": previous["best"], "evaluated": previous["evaluated"], "count": cache.count()},
            )
    results = grid_search(
        train_ds,
        grid,
        budget=args.budget,
        seed=args.seed,
        options=cv_options(args),
        jobs=args.jobs,
        cache=cache,
    )
    best = results[0].hyperparams
    if cache is not None:
        cache.record_search(best.canonical(), len(results))
    if args.best_out is not None:
        args.best_out.parent.mkdir(parents=True, exist_ok=True)
        args.best_out.write_text(dump_hyperparams(best), encoding="utf-8")
    emit(render_ranking(results, args.format), args.out)
    return 0
