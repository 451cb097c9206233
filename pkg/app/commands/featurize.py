from __future__ import annotations

import argparse
from pathlib import Path

from app.commands.common import add_jobs, config_file, emit, load_runs
from app.services.dataset import build_examples, write_dataset
from app.services.featurize import features_frame, featurize_runs, write_features
from app.services.ingest import parse_metrology
from app.services.params import load_manifest


def register(subparsers) -> None:
    p = subparsers.add_parser("featurize", help="compress every manifest run into one feature row")
    p.add_argument("--manifest", type=config_file, required=True)
    p.add_argument("--out", type=Path, default=None, help="feature CSV (a .layout.csv sidecar is written next to it)")
    p.add_argument(
        "--dataset-out",
        type=Path,
        default=None,
        help="also write the per-image training table (features paired with metrology)",
    )
    p.add_argument("--target", default=None, help="target column for --dataset-out (default: the manifest's)")
    add_jobs(p)
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest)
    runs, cfg = load_runs(manifest)
    vectors = featurize_runs(runs, cfg, jobs=args.jobs)
    if args.out is None:
        emit(features_frame(vectors).to_csv(index=False, lineterminator="\n"), None)
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        write_features(args.out, vectors)
    if args.dataset_out is not None:
        ds = build_examples(
            vectors,
            parse_metrology(manifest.metrology),
            args.target or manifest.target,
            wafer_groups={w.wafer_id: w.group for w in manifest.wafers},
        )
        args.dataset_out.parent.mkdir(parents=True, exist_ok=True)
        write_dataset(args.dataset_out, ds)
    return 0
