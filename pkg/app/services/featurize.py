"""Two-stage compression of cyclic sensor traces.

Each cycle of each sensor is summarized by a line fit plus tail asymptote
(m, b, f). Across the cycles of one step those three series are each
summarized by a cubic in cycle index. The resulting
variables x steps x 3 x 4 coefficients form the feature vector.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.errors import (
    FeaturizeError,
    IngestError,
    InsufficientCyclesError,
    MissingColumnError,
    MissingFileError,
    MissingStepError,
    NonEtchStepError,
    NonFiniteFeatureError,
    TrimError,
)
from app.schemas import ETCH_STEP_KINDS, FeaturizeConfig
from app.services.ingest import WaferRun
from app.services.parallel import run_tasks

logger = logging.getLogger(__name__)

COEFFICIENT_KINDS = ("m", "b", "f")
CUBIC_TERMS = ("a", "b", "c", "d")
CUBIC_DEGREE = 3

# Guards floor/ceil against products like 0.1 * 30 = 3.0000000000000004.
_EPS = 1e-9


@dataclass(frozen=True)
class AugmentedLinearFit:
    m: float
    b: float
    f: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.m, self.b, self.f)


@dataclass(frozen=True, eq=False)
class CubicFit:
    a: float
    b: float
    c: float
    d: float
    cov: np.ndarray = field(default_factory=lambda: np.zeros((4, 4)))

    @property
    def coefficients(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c, self.d])

    def evaluate(self, j) -> np.ndarray:
        j = np.asarray(j, dtype=float)
        return self.a + self.b * j + self.c * j**2 + self.d * j**3


@dataclass(frozen=True)
class FeatureLayout:
    variables: tuple[str, ...]
    steps: tuple[str, ...]

    @classmethod
    def from_config(cls, cfg: FeaturizeConfig) -> "FeatureLayout":
        return cls(variables=tuple(cfg.variable_names), steps=tuple(cfg.step_ids))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (len(self.variables), len(self.steps), len(COEFFICIENT_KINDS), len(CUBIC_TERMS))

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def index_of(self, variable: str, step: str, kind: str, term: str) -> int:
        v = self.variables.index(variable)
        s = self.steps.index(step)
        k = COEFFICIENT_KINDS.index(kind)
        t = CUBIC_TERMS.index(term)
        return int(np.ravel_multi_index((v, s, k, t), self.shape))

    def entries(self) -> list[tuple[str, str, str, str]]:
        return [
            (v, s, k, t)
            for v in self.variables
            for s in self.steps
            for k in COEFFICIENT_KINDS
            for t in CUBIC_TERMS
        ]

    def flatten(self, nested: np.ndarray) -> np.ndarray:
        nested = np.asarray(nested, dtype=float)
        if nested.shape != self.shape:
            raise FeaturizeError(f"expected coefficient block of shape {self.shape}, got {nested.shape}")
        return nested.reshape(-1).copy()

    def unflatten(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.size,):
            raise FeaturizeError(f"expected {self.size} features, got {values.shape}")
        return values.reshape(self.shape).copy()

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(i, *entry) for i, entry in enumerate(self.entries())],
            columns=["index", "variable", "step", "coefficient", "term"],
        )


@dataclass(frozen=True, eq=False)
class FeatureVector:
    wafer_id: str
    values: np.ndarray
    layout: Optional[FeatureLayout] = None
    # Diagonal of the cubic-fit coefficient covariance, same layout as values.
    variances: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if self.layout is not None and values.shape != (self.layout.size,):
            raise FeaturizeError(f"{self.wafer_id}: feature length {values.size} != layout size {self.layout.size}")
        if not np.all(np.isfinite(values)):
            raise NonFiniteFeatureError(f"{self.wafer_id}: non-finite feature values")
        variances = np.zeros_like(values) if self.variances is None else np.asarray(self.variances, dtype=float)
        if variances.shape != values.shape:
            raise FeaturizeError(f"{self.wafer_id}: variances do not match feature length")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "variances", variances)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def tail_window(n: int, tail_fraction: float) -> int:
    """Number of trailing samples averaged for the asymptote: ceil(l*N), at least 1."""
    return min(n, max(1, math.ceil(tail_fraction * n - _EPS)))


def trim_cycle(samples: np.ndarray, trim_fraction: float) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    if n == 0:
        raise TrimError("cannot trim an empty cycle")
    if not 0 <= trim_fraction < 1:
        raise TrimError(f"trim_fraction out of range: {trim_fraction}")
    drop = math.floor(trim_fraction * n + _EPS)
    if n - drop < 2:
        raise TrimError(f"trimming {drop} of {n} samples leaves fewer than 2")
    return samples[drop:]


def intracycle_fit(samples: np.ndarray, tail_fraction: float) -> AugmentedLinearFit:
    """Least-squares line over sample index 0..N-1 plus the mean of the final ceil(l*N) samples."""
    y = np.asarray(samples, dtype=float)
    n = y.shape[0]
    if n < 2:
        raise FeaturizeError(f"a line fit needs at least 2 samples, got {n}")
    if not 0 < tail_fraction <= 1:
        raise FeaturizeError(f"tail_fraction out of range: {tail_fraction}")
    t = np.arange(n, dtype=float)
    tc = t - t.mean()
    y_mean = y.mean()
    m = float(tc @ (y - y_mean) / (tc @ tc))
    b = float(y_mean - m * t.mean())
    f = float(y[n - tail_window(n, tail_fraction):].mean())
    if not all(math.isfinite(v) for v in (m, b, f)):
        raise NonFiniteFeatureError("non-finite cycle fit")
    return AugmentedLinearFit(m=m, b=b, f=f)


def weight_early_cycles(series: np.ndarray, weights: Sequence[float]) -> np.ndarray:
    """Collapse the first len(weights) points into their weighted sum at index 0."""
    series = np.asarray(series, dtype=float)
    k = len(weights)
    if series.shape[0] < k:
        raise InsufficientCyclesError(f"series of {series.shape[0]} cycles is shorter than {k} early-cycle weights")
    head = float(np.dot(np.asarray(weights, dtype=float), series[:k]))
    return np.concatenate(([head], series[k:]))


def intercycle_polyfit(series: np.ndarray) -> CubicFit:
    """Least-squares cubic a + b j + c j^2 + d j^3 over j = 0..n-1."""
    y = np.asarray(series, dtype=float)
    n = y.shape[0]
    if n < CUBIC_DEGREE + 1:
        raise InsufficientCyclesError(f"a cubic needs at least 4 cycles after weighting, got {n}")
    j = np.arange(n, dtype=float)
    vander = np.vander(j, CUBIC_DEGREE + 1, increasing=True)
    coef, _, _, _ = np.linalg.lstsq(vander, y, rcond=None)
    dof = n - (CUBIC_DEGREE + 1)
    if dof > 0:
        resid = y - vander @ coef
        s2 = float(resid @ resid) / dof
        cov = s2 * np.linalg.pinv(vander.T @ vander)
    else:
        cov = np.zeros((4, 4))
    if not np.all(np.isfinite(coef)):
        raise NonFiniteFeatureError("non-finite cubic fit")
    return CubicFit(*(float(c) for c in coef), cov=cov)


def _check_run(run: WaferRun, cfg: FeaturizeConfig) -> None:
    seg = run.segmentation
    for step_id in cfg.step_ids:
        kind = seg.kind_of(step_id)
        if kind is None:
            raise MissingStepError(f"run {run.wafer_id!r} has no step {step_id!r}")
        if kind not in ETCH_STEP_KINDS:
            raise NonEtchStepError(f"step {step_id!r} of run {run.wafer_id!r} is {kind.value}, not an etch step")
        q = seg.cycle_count(step_id)
        if q < cfg.required_cycles:
            raise InsufficientCyclesError(
                f"run {run.wafer_id!r} step {step_id!r} has {q} cycles, needs {cfg.required_cycles}"
            )
    for name in cfg.variable_names:
        if name not in run.trace.names:
            raise MissingColumnError(f"run {run.wafer_id!r} has no sensor {name!r}", column=name)


def featurize_run(run: WaferRun, cfg: FeaturizeConfig) -> FeatureVector:
    _check_run(run, cfg)
    layout = FeatureLayout.from_config(cfg)
    coeffs = np.empty(layout.shape)
    variances = np.empty(layout.shape)
    for v, name in enumerate(cfg.variable_names):
        column = run.trace.column(name)
        for s, step_id in enumerate(cfg.step_ids):
            trim = cfg.trim_for(step_id)
            fits = [
                intracycle_fit(trim_cycle(column[e.row_start:e.row_end], trim), cfg.tail_fraction)
                for e in run.segmentation.cycles(step_id)
            ]
            per_kind = np.array([fit.as_tuple() for fit in fits]).T  # (3, q)
            for k in range(len(COEFFICIENT_KINDS)):
                cubic = intercycle_polyfit(weight_early_cycles(per_kind[k], cfg.early_cycle_weights))
                coeffs[v, s, k] = cubic.coefficients
                variances[v, s, k] = np.diag(cubic.cov)
    if not np.all(np.isfinite(coeffs)):
        raise NonFiniteFeatureError(f"run {run.wafer_id!r} produced non-finite features")
    return FeatureVector(
        wafer_id=run.wafer_id,
        values=layout.flatten(coeffs),
        layout=layout,
        variances=layout.flatten(variances),
    )


def featurize_runs(runs: Sequence[WaferRun], cfg: FeaturizeConfig, jobs: int = 1) -> list[FeatureVector]:
    vectors = run_tasks(featurize_run, [(run, cfg) for run in runs], jobs=jobs)
    logger.info("Featurized runs", extra={"count": len(vectors), "feature_dim": cfg.feature_dim})
    return vectors


# --- export / import ---


def feature_columns(dim: int) -> list[str]:
    width = max(3, len(str(max(dim - 1, 0))))
    return [f"f{i:0{width}d}" for i in range(dim)]


def features_frame(vectors: Sequence[FeatureVector]) -> pd.DataFrame:
    if not vectors:
        return pd.DataFrame(columns=["wafer_id"])
    dim = vectors[0].dim
    if any(v.dim != dim for v in vectors):
        raise FeaturizeError("feature vectors have different lengths")
    df = pd.DataFrame(np.vstack([v.values for v in vectors]), columns=feature_columns(dim))
    df.insert(0, "wafer_id", [v.wafer_id for v in vectors])
    return df


def write_features(path: Union[str, Path], vectors: Sequence[FeatureVector]) -> Optional[Path]:
    """Write the feature CSV and, when a layout is known, a ``<stem>.layout.csv`` sidecar."""
    path = Path(path)
    features_frame(vectors).to_csv(path, index=False, lineterminator="\n")
    layout = vectors[0].layout if vectors else None
    if layout is None:
        return None
    sidecar = path.with_name(path.stem + ".layout.csv")
    layout.to_frame().to_csv(sidecar, index=False, lineterminator="\n")
    return sidecar


def read_features(path: Union[str, Path]) -> list[FeatureVector]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError("file not found", path=path)
    df = pd.read_csv(path, dtype={"wafer_id": str}, encoding="utf-8-sig")
    if "wafer_id" not in df.columns:
        raise MissingColumnError("missing column 'wafer_id'", path=path, row=1, column="wafer_id")
    cols = [c for c in df.columns if c != "wafer_id"]
    if cols != feature_columns(len(cols)):
        raise IngestError("feature columns must be f000..f(K-1) in order", path=path, row=1)
    try:
        matrix = df[cols].to_numpy(dtype=float)
    except ValueError as e:
        raise IngestError(f"non-numeric feature value: {e}", path=path) from None
    return [FeatureVector(wafer_id=w, values=matrix[i]) for i, w in enumerate(df["wafer_id"])]
