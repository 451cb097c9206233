from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence, Union

import pandas as pd

from app.errors import ConfigError, EtchVmError
from app.services.evaluate import CvSummary, GridResult, HoldoutRow

logger = logging.getLogger(__name__)

FOLD_COLUMNS = ["Fold", "Training Errors", "Validation Errors", "Measurement Errors (nm)"]
HOLDOUT_COLUMNS = ["Variable", "Wafer", "Testing Error (MSE)", "Measurement Error (nm)"]
FORMATS = ("table", "text-table", "csv")


def _fmt5(value: float) -> str:
    return f"{value:.5f}"


def _render(df: pd.DataFrame, fmt: str, numeric: Sequence[str]) -> str:
    if fmt not in FORMATS:
        raise ConfigError(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    if fmt == "csv":
        return df.to_csv(index=False, float_format="%.5f", lineterminator="\n")
    return df.to_string(index=False, formatters={c: _fmt5 for c in numeric}) + "\n"


def fold_frame(summary: CvSummary) -> pd.DataFrame:
    if not summary.folds:
        raise EtchVmError("refusing to render a summary with no folds")
    rows = [
        [str(f.fold_index), f.training_error, f.validation_error, f.measurement_error]
        for f in summary.folds
    ]
    rows.append(["Mean", summary.mean_training_error, summary.mean_validation_error, summary.mean_measurement_error])
    return pd.DataFrame(rows, columns=FOLD_COLUMNS)


def render_report(summary: CvSummary, fmt: str = "table") -> str:
    """Fold table with a trailing Mean row; numbers fixed at five decimals."""
    return _render(fold_frame(summary), fmt, FOLD_COLUMNS[1:])


def holdout_frame(rows: Sequence[HoldoutRow]) -> pd.DataFrame:
    if not rows:
        raise EtchVmError("refusing to render an empty holdout table")
    return pd.DataFrame(
        [[r.target_name, r.wafer_id, r.mse, r.measurement_error] for r in rows],
        columns=HOLDOUT_COLUMNS,
    )


def render_holdout(rows: Sequence[HoldoutRow], fmt: str = "table") -> str:
    return _render(holdout_frame(rows), fmt, HOLDOUT_COLUMNS[2:])


def ranking_frame(results: Sequence[GridResult]) -> pd.DataFrame:
    if not results:
        raise EtchVmError("refusing to render an empty ranking")
    return pd.DataFrame(
        [
            {
                "Rank": r.rank,
                "Grid Index": r.grid_index,
                "Training Errors": r.summary.mean_training_error,
                "Validation Errors": r.summary.mean_validation_error,
                "Measurement Errors (nm)": r.summary.mean_measurement_error,
                "Hyperparameters": r.hyperparams.canonical(),
            }
            for r in results
        ]
    )


def render_ranking(results: Sequence[GridResult], fmt: str = "table") -> str:
    return _render(ranking_frame(results), fmt, ["Training Errors", "Validation Errors", "Measurement Errors (nm)"])


def write_curves(out_dir: Union[str, Path], summary: CvSummary) -> list[Path]:
    """One ``fold_<k>.csv`` per fold: epoch, train_loss, val_loss."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for f in summary.folds:
        df = pd.DataFrame(
            {
                "epoch": range(1, len(f.curve.train_loss) + 1),
                "train_loss": f.curve.train_loss,
                "val_loss": [None if math.isnan(v) else v for v in f.curve.val_loss],
            }
        )
        path = out_dir / f"fold_{f.fold_index}.csv"
        df.to_csv(path, index=False, lineterminator="\n")
        written.append(path)
    logger.info("Wrote learning curves", extra={"path": str(out_dir), "count": len(written)})
    return written
