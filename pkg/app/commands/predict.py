from __future__ import annotations

import argparse
from pathlib import Path

import pandas as pd

from app.commands.common import config_file, emit
from app.services.featurize import read_features
from app.services.mlp import load_model, predict_raw


def register(subparsers) -> None:
    p = subparsers.add_parser("predict", help="predict targets for a feature CSV")
    p.add_argument("--model", type=config_file, required=True)
    p.add_argument("--features", type=config_file, required=True)
    p.add_argument("--out", type=Path, default=None, help="predictions CSV (default: stdout)")
    p.set_defaults(func=run)


def run(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    vectors = read_features(args.features)
    preds = predict_raw(model, [v.values for v in vectors]) if vectors else []
    df = pd.DataFrame({"wafer_id": [v.wafer_id for v in vectors], "prediction": list(preds)})
    emit(df.to_csv(index=False, lineterminator="\n"), args.out)
    return 0
