"""Wafer-grouped leave-one-out cross-validation, grid search and holdout evaluation.

One fold holds out every image of one wafer. Standardization is fitted on the
fold's training wafers only, expansion touches only the training portion, and
every fold asserts that no wafer is on both sides.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from app.errors import DatasetError, DimensionMismatchError, EtchVmError, ConfigError
from app.schemas import CvOptions, Grid, Hyperparams
from app.services.dataset import (
    Dataset,
    StandardizationStats,
    apply_standardizer,
    assert_disjoint,
    expand,
    fit_standardizer,
)
from app.services.mlp import MlpModel, TrainingCurve, init_model, predict_batch, predict_raw, train
from app.services.parallel import run_tasks

logger = logging.getLogger(__name__)

# Slack for the MAE <= RMSE consistency check.
_JENSEN_TOL = 1e-9


def _pair(preds: Sequence[float], targets: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise DimensionMismatchError(f"{p.size} predictions for {t.size} targets")
    if p.size == 0:
        raise DatasetError("metrics of an empty prediction set")
    return p, t


def mse(preds: Sequence[float], targets: Sequence[float]) -> float:
    """Mean squared error, nm^2."""
    p, t = _pair(preds, targets)
    return float(np.mean((p - t) ** 2))


def nmse(preds: Sequence[float], targets: Sequence[float]) -> float:
    return -mse(preds, targets)


def measurement_error(preds: Sequence[float], targets: Sequence[float]) -> float:
    """Mean absolute error, nm."""
    p, t = _pair(preds, targets)
    return float(np.mean(np.abs(p - t)))


def check_mae_rmse(mae: float, mse_value: float, where: str) -> None:
    if mae > math.sqrt(mse_value) * (1 + _JENSEN_TOL) + _JENSEN_TOL:
        raise EtchVmError(f"{where}: measurement error {mae} exceeds RMSE {math.sqrt(mse_value)}")


@dataclass(frozen=True, eq=False)
class FoldReport:
    fold_index: int
    held_out_wafer: str
    training_error: float  # NMSE on the fold's original training rows
    validation_error: float  # NMSE on the held-out wafer
    measurement_error: float  # MAE on the held-out wafer, nm
    curve: TrainingCurve
    train_size: int = 0
    validation_keys: tuple[tuple[str, str], ...] = ()
    stats: Optional[StandardizationStats] = field(default=None, repr=False)
    model: Optional[MlpModel] = field(default=None, repr=False)

    def __post_init__(self):
        if self.measurement_error < 0:
            raise EtchVmError("measurement error must be >= 0")
        check_mae_rmse(self.measurement_error, -self.validation_error, f"fold {self.fold_index}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "fold_index": self.fold_index,
            "held_out_wafer": self.held_out_wafer,
            "training_error": self.training_error,
            "validation_error": self.validation_error,
            "measurement_error": self.measurement_error,
            "train_size": self.train_size,
            "validation_keys": [list(k) for k in self.validation_keys],
            "curve": {
                "train_loss": list(self.curve.train_loss),
                "val_loss": [None if math.isnan(v) else v for v in self.curve.val_loss],
                "stopped_epoch": self.curve.stopped_epoch,
                "restored_epoch": self.curve.restored_epoch,
                "monitor": self.curve.monitor,
            },
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "FoldReport":
        c = data["curve"]
        return cls(
            fold_index=int(data["fold_index"]),
            held_out_wafer=data["held_out_wafer"],
            training_error=float(data["training_error"]),
            validation_error=float(data["validation_error"]),
            measurement_error=float(data["measurement_error"]),
            train_size=int(data.get("train_size", 0)),
            validation_keys=tuple(tuple(k) for k in data.get("validation_keys", [])),
            curve=TrainingCurve(
                train_loss=tuple(float(v) for v in c["train_loss"]),
                val_loss=tuple(math.nan if v is None else float(v) for v in c["val_loss"]),
                stopped_epoch=int(c["stopped_epoch"]),
                restored_epoch=int(c["restored_epoch"]),
                monitor=c.get("monitor", "val"),
            ),
        )


@dataclass(frozen=True, eq=False)
class CvSummary:
    folds: tuple[FoldReport, ...]
    hyperparams: Hyperparams
    target_name: str

    @property
    def mean_training_error(self) -> float:
        return float(np.mean([f.training_error for f in self.folds]))

    @property
    def mean_validation_error(self) -> float:
        return float(np.mean([f.validation_error for f in self.folds]))

    @property
    def mean_measurement_error(self) -> float:
        return float(np.mean([f.measurement_error for f in self.folds]))

    def to_dict(self) -> dict[str, Any]:
        return {
            "target_name": self.target_name,
            "hyperparams": self.hyperparams.model_dump(mode="json"),
            "folds": [f.to_dict() for f in self.folds],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "CvSummary":
        return cls(
            folds=tuple(FoldReport.from_dict(f) for f in data["folds"]),
            hyperparams=Hyperparams.model_validate(data["hyperparams"]),
            target_name=data["target_name"],
        )


def _single_target(ds: Dataset) -> str:
    names = ds.target_names()
    if len(names) != 1:
        raise DatasetError(f"expected exactly one target in the dataset, found {names}")
    return names[0]


def _run_fold(
    ds: Dataset,
    fold_index: int,
    wafer_id: str,
    hp: Hyperparams,
    options: CvOptions,
    keep_model: bool,
) -> FoldReport:
    train_part = ds.select([wafer_id], keep=False)
    val_part = ds.select([wafer_id], keep=True)
    assert_disjoint(train_part.wafers(), val_part.wafers(), context=f"fold {fold_index}")

    # training-set baseline only; the held-out wafer never enters the stats
    if options.standardize:
        stats = fit_standardizer(train_part)
    else:
        stats = StandardizationStats.identity(ds.feature_dim, fitted_on=train_part.wafers())

    fit_part = expand(train_part, options.expansion) if options.expansion else train_part
    if set(fit_part.wafers()) != set(train_part.wafers()):
        raise EtchVmError(f"fold {fold_index}: expansion introduced wafers outside the training portion")
    train_std = apply_standardizer(stats, fit_part)
    val_std = apply_standardizer(stats, val_part)
    if val_std.has_synthetic() or val_std.wafers() != [wafer_id]:
        raise EtchVmError(f"fold {fold_index}: validation set must be the original rows of {wafer_id!r}")

    model = init_model(ds.feature_dim, hp, stats)
    model, curve = train(model, train_std, val_std, hp)

    originals = train_std.originals()
    train_err = nmse(predict_batch(model, originals.X()), originals.y())
    preds = predict_batch(model, val_std.X())
    targets = val_std.y()
    report = FoldReport(
        fold_index=fold_index,
        held_out_wafer=wafer_id,
        training_error=train_err,
        validation_error=nmse(preds, targets),
        measurement_error=measurement_error(preds, targets),
        curve=curve,
        train_size=len(train_std),
        validation_keys=tuple((e.wafer_id, e.image_id) for e in val_part.examples),
        stats=stats,
        model=model if keep_model else None,
    )
    logger.info(
        "Fold finished",
        extra={
            "fold": fold_index,
            "wafer_id": wafer_id,
            "validation_error": report.validation_error,
            "measurement_error": report.measurement_error,
        },
    )
    return report


def loocv(
    ds: Dataset,
    hp: Hyperparams,
    options: Optional[CvOptions] = None,
    *,
    jobs: int = 1,
    keep_models: bool = False,
) -> CvSummary:
    options = options or CvOptions()
    if ds.has_synthetic():
        raise DatasetError("cross-validation input must not contain synthetic examples")
    wafers = ds.wafers()
    if len(wafers) < 2:
        raise DatasetError(f"grouped LOOCV needs at least 2 wafers, got {len(wafers)}")
    target = _single_target(ds)

    tasks = [(ds, k, w, hp, options, keep_models) for k, w in enumerate(wafers)]
    folds = run_tasks(_run_fold, tasks, jobs=jobs)
    if len(folds) != len(wafers):
        raise EtchVmError(f"expected {len(wafers)} folds, produced {len(folds)}")
    return CvSummary(folds=tuple(folds), hyperparams=hp, target_name=target)


@dataclass(frozen=True, eq=False)
class GridResult:
    rank: int
    grid_index: int
    hyperparams: Hyperparams
    summary: CvSummary


def cache_key(ds: Dataset, hp: Hyperparams, options: CvOptions) -> str:
    h = hashlib.sha256()
    h.update(ds.content_hash().encode())
    h.update(hp.canonical().encode())
    h.update(options.model_dump_json().encode())
    return h.hexdigest()


def select_grid_points(n_points: int, budget: Optional[int], seed: int) -> list[int]:
    if budget is not None and budget < 1:
        raise ConfigError(f"budget must be >= 1, got {budget}")
    if budget is None or budget >= n_points:
        return list(range(n_points))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_points, size=budget, replace=False))


def _cv_task(ds: Dataset, hp: Hyperparams, options: CvOptions) -> CvSummary:
    return loocv(ds, hp, options, jobs=1)


def grid_search(
    ds: Dataset,
    grid: Grid,
    budget: Optional[int] = None,
    seed: int = 0,
    *,
    options: Optional[CvOptions] = None,
    jobs: int = 1,
    cache=None,
) -> list[GridResult]:
    """LOOCV every selected grid point and rank by mean validation NMSE (closest to zero first)."""
    options = options or CvOptions()
    n_points = grid.size()
    if not n_points:
        raise ConfigError("grid has no points")
    chosen = select_grid_points(n_points, budget, seed)
    points = {i: grid.point(i) for i in chosen}
    logger.info("Grid search", extra={"grid_size": n_points, "count": len(chosen)})

    summaries: dict[int, CvSummary] = {}
    pending: list[int] = []
    keys = {i: cache_key(ds, points[i], options) for i in chosen}
    for i in chosen:
        cached = cache.get(keys[i]) if cache is not None else None
        if cached is not None:
            summaries[i] = cached
            logger.info("Grid point cached", extra={"grid_index": i})
        else:
            pending.append(i)

    computed = run_tasks(_cv_task, [(ds, points[i], options) for i in pending], jobs=jobs)
    for i, summary in zip(pending, computed):
        summaries[i] = summary
        if cache is not None:
            cache.put(keys[i], summary, grid_index=i)

    ordered = sorted(chosen, key=lambda i: (-summaries[i].mean_validation_error, points[i].canonical()))
    return [
        GridResult(rank=r + 1, grid_index=i, hyperparams=points[i], summary=summaries[i])
        for r, i in enumerate(ordered)
    ]


@dataclass(frozen=True)
class HoldoutRow:
    target_name: str
    wafer_id: str
    mse: float
    measurement_error: float


def holdout_eval(
    model: MlpModel,
    test: Dataset,
    training_wafers: Optional[Sequence[str]] = None,
) -> list[HoldoutRow]:
    """Per-wafer MSE and measurement error on raw (unstandardized) test features."""
    if test.is_empty:
        raise DatasetError("holdout set is empty")
    if test.has_synthetic():
        raise DatasetError("holdout set contains synthetic examples")
    trained_on = model.standardization.fitted_on if training_wafers is None else tuple(training_wafers)
    assert_disjoint(trained_on, test.wafers(), context="holdout evaluation")
    target = _single_target(test)

    rows = []
    for wafer_id in test.wafers():
        part = test.select([wafer_id])
        preds = predict_raw(model, part.X())
        row = HoldoutRow(
            target_name=target,
            wafer_id=wafer_id,
            mse=mse(preds, part.y()),
            measurement_error=measurement_error(preds, part.y()),
        )
        check_mae_rmse(row.measurement_error, row.mse, f"holdout {wafer_id}")
        rows.append(row)
    return rows


def refit_all(ds: Dataset, hp: Hyperparams, options: Optional[CvOptions] = None) -> tuple[MlpModel, TrainingCurve]:
    """Train on every wafer of ``ds``; no validation wafer exists, so training MSE is monitored."""
    options = options or CvOptions()
    if ds.has_synthetic():
        raise DatasetError("refit input must not contain synthetic examples")
    if options.standardize:
        stats = fit_standardizer(ds)
    else:
        stats = StandardizationStats.identity(ds.feature_dim, fitted_on=ds.wafers())
    fit_part = expand(ds, options.expansion) if options.expansion else ds
    model = init_model(ds.feature_dim, hp, stats)
    return train(model, apply_standardizer(stats, fit_part), None, hp)


def best_fold_model(summary: CvSummary) -> MlpModel:
    """Model of the fold with the best validation NMSE (ties: lowest fold index)."""
    best = max(summary.folds, key=lambda f: (f.validation_error, -f.fold_index))
    if best.model is None:
        raise EtchVmError("fold models were not kept; run loocv with keep_models=True")
    return best.model
