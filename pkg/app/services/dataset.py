"""Examples, training-baseline standardization, Gaussian expansion and holdout splits."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.errors import (
    DatasetError,
    DimensionMismatchError,
    IngestError,
    LeakageError,
    MissingFileError,
    MissingTargetError,
    SingularCovarianceError,
    UnknownWaferError,
)
from app.schemas import CovarianceMode, ExpansionConfig
from app.services.featurize import FeatureVector, feature_columns
from app.services.ingest import MetrologyRecord

logger = logging.getLogger(__name__)

SYNTHETIC_TAG = "~syn"


@dataclass(frozen=True, eq=False)
class Example:
    wafer_id: str
    image_id: str
    x: np.ndarray
    y: float
    target_name: str
    synthetic: bool = False

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise DatasetError(f"example {self.wafer_id}/{self.image_id} has non-finite features")
        if not np.isfinite(self.y):
            raise DatasetError(f"example {self.wafer_id}/{self.image_id} has a non-finite target")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", float(self.y))

    @property
    def key(self) -> tuple[str, str, bool]:
        return (self.wafer_id, self.image_id, self.synthetic)


@dataclass(frozen=True, eq=False)
class Dataset:
    examples: tuple[Example, ...]
    feature_dim: int
    wafer_groups: Mapping[str, str]
    # Per-wafer cubic-fit coefficient variances, used by the "fit" expansion mode.
    fit_variances: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "examples", tuple(self.examples))
        for e in self.examples:
            if e.x.shape != (self.feature_dim,):
                raise DimensionMismatchError(
                    f"example {e.wafer_id}/{e.image_id} has {e.x.size} features, dataset expects {self.feature_dim}"
                )
            if e.wafer_id not in self.wafer_groups:
                raise UnknownWaferError(f"wafer {e.wafer_id!r} has no group label")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def is_empty(self) -> bool:
        return not self.examples

    def wafers(self) -> list[str]:
        """Distinct wafer ids, sorted."""
        return sorted({e.wafer_id for e in self.examples})

    def X(self) -> np.ndarray:
        if not self.examples:
            return np.empty((0, self.feature_dim))
        return np.vstack([e.x for e in self.examples])

    def y(self) -> np.ndarray:
        return np.array([e.y for e in self.examples], dtype=float)

    def target_names(self) -> list[str]:
        return sorted({e.target_name for e in self.examples})

    def has_synthetic(self) -> bool:
        return any(e.synthetic for e in self.examples)

    def with_examples(self, examples: Iterable[Example]) -> "Dataset":
        return replace(self, examples=tuple(examples))

    def select(self, wafer_ids: Iterable[str], *, keep: bool = True) -> "Dataset":
        ids = set(wafer_ids)
        return self.with_examples(e for e in self.examples if (e.wafer_id in ids) == keep)

    def originals(self) -> "Dataset":
        return self.with_examples(e for e in self.examples if not e.synthetic)

    def canonical(self) -> "Dataset":
        """Examples in (wafer_id, image_id, synthetic) order; training shuffles start from here."""
        return self.with_examples(sorted(self.examples, key=lambda e: e.key))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for e in self.canonical().examples:
            h.update(f"{e.wafer_id}|{e.image_id}|{e.target_name}|{e.synthetic}|{e.y!r}|".encode())
            h.update(np.ascontiguousarray(e.x).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class StandardizationStats:
    mu: np.ndarray
    sigma: np.ndarray
    fitted_on: tuple[str, ...] = ()

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise DimensionMismatchError("mu and sigma must be vectors of equal length")
        if np.any(sigma < 0):
            raise DatasetError("sigma entries must be >= 0")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "fitted_on", tuple(self.fitted_on))

    @classmethod
    def identity(cls, dim: int, fitted_on: Sequence[str] = ()) -> "StandardizationStats":
        return cls(mu=np.zeros(dim), sigma=np.ones(dim), fitted_on=tuple(fitted_on))

    @property
    def dim(self) -> int:
        return int(self.mu.shape[0])

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.dim:
            raise DimensionMismatchError(f"expected {self.dim} features, got {X.shape[-1]}")
        safe = np.where(self.sigma > 0, self.sigma, 1.0)
        return np.where(self.sigma > 0, (X - self.mu) / safe, 0.0)

    def inverse(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        return np.where(self.sigma > 0, Z * self.sigma + self.mu, self.mu)


# --- operations ---


def build_examples(
    features: Sequence[FeatureVector],
    metrology: Sequence[MetrologyRecord],
    target_name: str,
    wafer_groups: Optional[Mapping[str, str]] = None,
) -> Dataset:
    """Replicate each wafer's feature vector across its images, pairing each with that image's target."""
    if not features:
        raise DatasetError("no feature vectors")
    dim = features[0].dim
    by_wafer: dict[str, list[MetrologyRecord]] = {}
    for rec in metrology:
        by_wafer.setdefault(rec.wafer_id, []).append(rec)

    examples: list[Example] = []
    for fv in features:
        if fv.dim != dim:
            raise DimensionMismatchError(f"wafer {fv.wafer_id!r} has {fv.dim} features, expected {dim}")
        records = by_wafer.get(fv.wafer_id)
        if not records:
            raise DatasetError(f"wafer {fv.wafer_id!r} has no metrology records")
        for rec in records:
            if target_name not in rec.targets:
                raise MissingTargetError(f"target {target_name!r} absent for wafer {rec.wafer_id!r} image {rec.image_id!r}")
            examples.append(
                Example(wafer_id=fv.wafer_id, image_id=rec.image_id, x=fv.values, y=rec.targets[target_name], target_name=target_name)
            )

    unused = sorted(set(by_wafer) - {fv.wafer_id for fv in features})
    if unused:
        logger.warning("Metrology for wafers without features ignored", extra={"wafers": unused})

    groups = dict(wafer_groups or {})
    for fv in features:
        groups.setdefault(fv.wafer_id, "unknown")
    return Dataset(
        examples=tuple(examples),
        feature_dim=dim,
        wafer_groups=groups,
        fit_variances={fv.wafer_id: fv.variances for fv in features},
    )


def fit_standardizer(train: Dataset) -> StandardizationStats:
    """Per-column mean and population standard deviation over the training examples."""
    if train.is_empty:
        raise DatasetError("cannot fit standardization on an empty training set")
    X = train.X()
    return StandardizationStats(mu=X.mean(axis=0), sigma=X.std(axis=0, ddof=0), fitted_on=train.wafers())


def apply_standardizer(stats: StandardizationStats, ds: Dataset) -> Dataset:
    if stats.dim != ds.feature_dim:
        raise DimensionMismatchError(f"stats cover {stats.dim} features, dataset has {ds.feature_dim}")
    if ds.is_empty:
        return ds
    Z = stats.transform(ds.X())
    return ds.with_examples(replace(e, x=Z[i]) for i, e in enumerate(ds.examples))


def _source_rng(seed: int, index: int) -> np.random.Generator:
    # Counter-based stream per source example: results do not depend on evaluation order.
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def _distinct_vectors(ds: Dataset) -> np.ndarray:
    seen: dict[str, np.ndarray] = {}
    for e in ds.examples:
        if not e.synthetic:
            seen.setdefault(e.wafer_id, e.x)
    return np.vstack([seen[w] for w in sorted(seen)]) if seen else np.empty((0, ds.feature_dim))


def expand(train: Dataset, cfg: ExpansionConfig) -> Dataset:
    """Append ``samples_per_example`` Gaussian draws around every original example."""
    if cfg.samples_per_example == 0:
        return train
    sources = [e for e in train.examples if not e.synthetic]
    if not sources:
        raise DatasetError("nothing to expand: training set has no original examples")
    s = cfg.sigma_scale
    dim = train.feature_dim

    chol: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    if s > 0 and cfg.covariance_mode == CovarianceMode.FULL:
        vectors = _distinct_vectors(train)
        if vectors.shape[0] < 2:
            raise DatasetError("full-covariance expansion needs at least 2 distinct feature vectors")
        cov = np.atleast_2d(np.cov(vectors, rowvar=False, ddof=0))
        try:
            chol = np.linalg.cholesky((s**2) * cov)
        except np.linalg.LinAlgError:
            raise SingularCovarianceError(
                f"training feature covariance ({vectors.shape[0]} vectors, {dim} features) is singular; "
                "use covariance_mode=diagonal"
            ) from None
    elif s > 0 and cfg.covariance_mode == CovarianceMode.DIAGONAL:
        std = s * _distinct_vectors(train).std(axis=0, ddof=0)

    synthetic: list[Example] = []
    for i, src in enumerate(sources):
        rng = _source_rng(cfg.seed, i)
        if s > 0 and cfg.covariance_mode == CovarianceMode.FIT:
            variances = train.fit_variances.get(src.wafer_id)
            if variances is None:
                raise DatasetError(f"no fit variances recorded for wafer {src.wafer_id!r}")
            std = s * np.sqrt(np.asarray(variances, dtype=float))
        for r in range(cfg.samples_per_example):
            z = rng.standard_normal(dim)
            if s == 0:
                x = src.x.copy()
            elif chol is not None:
                x = src.x + chol @ z
            else:
                x = src.x + std * z
            synthetic.append(replace(src, image_id=f"{src.image_id}{SYNTHETIC_TAG}{r}", x=x, synthetic=True))

    logger.info(
        "Expanded training set",
        extra={"sources": len(sources), "synthetic": len(synthetic), "mode": cfg.covariance_mode.value},
    )
    return train.with_examples(list(train.examples) + synthetic)


def split_holdout(ds: Dataset, holdout_wafers: Sequence[str]) -> tuple[Dataset, Dataset]:
    present = set(ds.wafers())
    unknown = [w for w in holdout_wafers if w not in present]
    if unknown:
        raise UnknownWaferError(f"unknown holdout wafer ids: {unknown}")
    train = ds.select(holdout_wafers, keep=False)
    test = ds.select(holdout_wafers, keep=True)
    assert_disjoint(train.wafers(), test.wafers(), context="holdout split")
    return train, test


def assert_disjoint(train_wafers: Iterable[str], eval_wafers: Iterable[str], *, context: str) -> None:
    overlap = sorted(set(train_wafers) & set(eval_wafers))
    if overlap:
        raise LeakageError(f"{context}: wafers {overlap} appear in both training and evaluation data")


# --- export / import ---


def write_dataset(path: Union[str, Path], ds: Dataset) -> None:
    df = pd.DataFrame(ds.X(), columns=feature_columns(ds.feature_dim))
    df.insert(0, "wafer_id", [e.wafer_id for e in ds.examples])
    df["image_id"] = [e.image_id for e in ds.examples]
    df["target_name"] = [e.target_name for e in ds.examples]
    df["y"] = ds.y()
    df["synthetic"] = [int(e.synthetic) for e in ds.examples]
    df["group"] = [ds.wafer_groups[e.wafer_id] for e in ds.examples]
    df.to_csv(path, index=False, lineterminator="\n")


def read_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError("file not found", path=path)
    df = pd.read_csv(
        path, dtype={"wafer_id": str, "image_id": str, "target_name": str, "group": str}, encoding="utf-8-sig"
    )
    meta = ["wafer_id", "image_id", "target_name", "y", "synthetic"]
    missing = [c for c in meta if c not in df.columns]
    if missing:
        raise IngestError(f"missing dataset columns {missing}", path=path, row=1)
    cols = [c for c in df.columns if c.startswith("f") and c not in meta]
    if cols != feature_columns(len(cols)):
        raise IngestError("feature columns must be f000..f(K-1) in order", path=path, row=1)
    X = df[cols].to_numpy(dtype=float)
    groups = dict(zip(df["wafer_id"], df["group"])) if "group" in df.columns else {w: "unknown" for w in df["wafer_id"]}
    examples = [
        Example(
            wafer_id=row.wafer_id,
            image_id=row.image_id,
            x=X[i],
            y=float(row.y),
            target_name=row.target_name,
            synthetic=bool(int(row.synthetic)),
        )
        for i, row in enumerate(df.itertuples(index=False))
    ]
    return Dataset(examples=tuple(examples), feature_dim=len(cols), wafer_groups=groups)
