"""Helpers shared by the sub-commands: argument types, manifest loading, output."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from app.config import settings
from app.schemas import CvOptions, ExpansionConfig, FeaturizeConfig, Hyperparams, RunManifest
from app.services.dataset import Dataset, build_examples, split_holdout
from app.services.featurize import featurize_runs
from app.services.ingest import WaferRun, assemble_run, parse_metrology, parse_segmentation, parse_trace
from app.services.params import load_json_config, load_manifest

logger = logging.getLogger(__name__)


def config_file(value: str) -> Path:
    """argparse type for config files: a missing file is a usage error (exit 2)."""
    path = Path(value)
    if not path.is_file():
        raise argparse.ArgumentTypeError(f"config file not found: {value}")
    return path


def on_off(value: str) -> bool:
    v = value.strip().lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def add_jobs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--jobs", type=int, default=settings.DEFAULT_JOBS, help="parallel workers (default 1)")


def add_dataset_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", type=config_file, required=True)
    parser.add_argument("--target", default=None, help="target column (default: the manifest's)")


def add_training_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--hyperparams", type=config_file, required=True)
    parser.add_argument("--standardize", type=on_off, default=True, metavar="{on,off}")
    parser.add_argument("--expand", type=config_file, default=None, metavar="CONFIG", help="expansion config JSON")
    parser.add_argument("--seed", type=int, default=None, help="overrides the hyperparameter seed")


def add_format(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--format", choices=["table", "csv"], default="table")
    parser.add_argument("--out", type=Path, default=None, help="output file (default: stdout)")


def cv_options(args: argparse.Namespace) -> CvOptions:
    expansion = load_json_config(ExpansionConfig, args.expand) if args.expand else None
    return CvOptions(standardize=args.standardize, expansion=expansion)


def with_seed(hp: Hyperparams, seed: Optional[int]) -> Hyperparams:
    return hp if seed is None else hp.model_copy(update={"seed": seed})


def load_runs(manifest: RunManifest) -> tuple[list[WaferRun], FeaturizeConfig]:
    cfg = load_json_config(FeaturizeConfig, manifest.featurize_config)
    runs = []
    for entry in manifest.wafers:
        trace = parse_trace(entry.trace, cfg.variable_names, wafer_id=entry.wafer_id)
        seg = parse_segmentation(entry.segmentation)
        runs.append(assemble_run(trace, seg, entry.wafer_id, entry.group))
    logger.info("Loaded runs", extra={"count": len(runs)})
    return runs, cfg


def load_dataset(manifest_path: Path, target: Optional[str], jobs: int) -> tuple[Dataset, RunManifest]:
    """Featurize every manifest wafer and pair it with metrology for ``target``."""
    manifest = load_manifest(manifest_path)
    runs, cfg = load_runs(manifest)
    vectors = featurize_runs(runs, cfg, jobs=jobs)
    records = parse_metrology(manifest.metrology)
    groups = {w.wafer_id: w.group for w in manifest.wafers}
    ds = build_examples(vectors, records, target or manifest.target, wafer_groups=groups)
    return ds, manifest


def training_and_holdout(manifest_path: Path, target: Optional[str], jobs: int) -> tuple[Dataset, Dataset]:
    ds, manifest = load_dataset(manifest_path, target, jobs)
    return split_holdout(ds, manifest.holdout)


def emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    logger.info("Wrote output", extra={"path": str(out)})
