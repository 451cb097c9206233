from __future__ import annotations

import itertools
import math
from enum import Enum
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StepKind(str, Enum):
    DEPOSITION = "deposition"
    ACTIVATION = "activation"
    OTHER = "other"


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"


class Optimizer(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class CovarianceMode(str, Enum):
    DIAGONAL = "diagonal"
    FULL = "full"
    FIT = "fit"  # per-wafer variances of the cubic fit coefficients


ETCH_STEP_KINDS = (StepKind.DEPOSITION, StepKind.ACTIVATION)
DEFAULT_EARLY_WEIGHTS = [0.1, 0.2, 0.7]


def _check_fraction(name: str, value: float, *, allow_zero: bool, allow_one: bool) -> float:
    lo_ok = value >= 0 if allow_zero else value > 0
    hi_ok = value <= 1 if allow_one else value < 1
    if not (lo_ok and hi_ok and math.isfinite(value)):
        raise ValueError(f"{name} out of range: {value}")
    return value


class FeaturizeConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    variable_names: list[str] = Field(min_length=1)
    step_ids: list[str] = Field(min_length=1)
    trim_fraction: float = 0.0
    trim_overrides: dict[str, float] = Field(default_factory=dict)
    tail_fraction: float = 0.10
    early_cycle_weights: list[float] = Field(default_factory=lambda: list(DEFAULT_EARLY_WEIGHTS))
    min_cycles: int = 4

    @field_validator("trim_fraction")
    @classmethod
    def _trim(cls, v: float) -> float:
        return _check_fraction("trim_fraction", v, allow_zero=True, allow_one=False)

    @field_validator("trim_overrides")
    @classmethod
    def _overrides(cls, v: dict[str, float]) -> dict[str, float]:
        for step_id, frac in v.items():
            _check_fraction(f"trim_overrides[{step_id}]", frac, allow_zero=True, allow_one=False)
        return v

    @field_validator("tail_fraction")
    @classmethod
    def _tail(cls, v: float) -> float:
        return _check_fraction("tail_fraction", v, allow_zero=False, allow_one=True)

    @field_validator("early_cycle_weights")
    @classmethod
    def _weights(cls, v: list[float]) -> list[float]:
        if not v:
            raise ValueError("early_cycle_weights must not be empty")
        if any(w <= 0 for w in v):
            raise ValueError("early_cycle_weights must be positive")
        if abs(sum(v) - 1.0) > 1e-9:
            raise ValueError(f"early_cycle_weights must sum to 1, got {sum(v)}")
        return v

    @field_validator("min_cycles")
    @classmethod
    def _min_cycles(cls, v: int) -> int:
        # a cubic needs four points after weighting
        if v < 4:
            raise ValueError("min_cycles must be >= 4")
        return v

    @model_validator(mode="after")
    def _unique(self):
        if len(set(self.variable_names)) != len(self.variable_names):
            raise ValueError("variable_names contains duplicates")
        if len(set(self.step_ids)) != len(self.step_ids):
            raise ValueError("step_ids contains duplicates")
        return self

    def trim_for(self, step_id: str) -> float:
        return self.trim_overrides.get(step_id, self.trim_fraction)

    @property
    def required_cycles(self) -> int:
        return self.min_cycles + len(self.early_cycle_weights) - 1

    @property
    def feature_dim(self) -> int:
        return len(self.variable_names) * len(self.step_ids) * 12


class ExpansionConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    samples_per_example: int = Field(default=0, ge=0)
    sigma_scale: float = Field(default=0.0, ge=0)
    covariance_mode: CovarianceMode = CovarianceMode.DIAGONAL
    seed: int = 0


class CvOptions(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    standardize: bool = True
    expansion: Optional[ExpansionConfig] = None


# Order used for the canonical serialization of hyperparameters; also the grid-file key order.
HYPERPARAM_KEYS = (
    "hidden_layers",
    "activation",
    "l2",
    "optimizer",
    "learning_rate",
    "decay",
    "batch_size",
    "epochs",
    "es_min_delta",
    "es_patience",
    "seed",
    "adam_beta1",
    "adam_beta2",
    "adam_epsilon",
)


class Hyperparams(BaseModel):
    """Network and training settings. Defaults are the reference configuration."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    hidden_layers: list[int] = Field(default_factory=lambda: [4032])
    activation: Activation = Activation.TANH
    l2: float = Field(default=100.0, ge=0)
    optimizer: Optimizer = Optimizer.SGD
    learning_rate: float = Field(default=1e-5, gt=0)
    decay: float = Field(default=1e-8, ge=0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=100, ge=1)
    es_min_delta: float = Field(default=0.0, ge=0)
    es_patience: int = Field(default=10, ge=0)
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = Field(default=1e-8, gt=0)

    @field_validator("hidden_layers")
    @classmethod
    def _layers(cls, v: list[int]) -> list[int]:
        if len(v) > 3:
            raise ValueError("at most 3 hidden layers are supported")
        if any(w < 1 for w in v):
            raise ValueError("hidden layer widths must be >= 1")
        return v

    @model_validator(mode="after")
    def _betas(self):
        for name in ("adam_beta1", "adam_beta2"):
            _check_fraction(name, getattr(self, name), allow_zero=True, allow_one=False)
        return self

    def canonical(self) -> str:
        """Stable one-line serialization used for tie-breaking and cache keys."""
        parts = []
        for key in HYPERPARAM_KEYS:
            value = getattr(self, key)
            if key == "hidden_layers":
                text = "x".join(str(w) for w in value) or "linear"
            elif isinstance(value, Enum):
                text = value.value
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            parts.append(f"{key}={text}")
        return ";".join(parts)


LAYER_KEYS = ("layers", "hidden_units")
GRID_KEYS = LAYER_KEYS + HYPERPARAM_KEYS


def _distinct(values: list[Any]) -> list[Any]:
    out: list[Any] = []
    for v in values:
        if v not in out:
            out.append(v)
    return out


class Grid(BaseModel):
    """Candidate lists per hyperparameter; missing keys use the Hyperparams default.

    Points are never materialized up front: the full search space easily runs
    into millions of combinations, so ``point(i)`` decodes a single index.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    candidates: dict[str, list[Any]]

    @field_validator("candidates")
    @classmethod
    def _non_empty(cls, v: dict[str, list[Any]]) -> dict[str, list[Any]]:
        if not v:
            raise ValueError("grid is empty")
        unknown = sorted(k for k in v if k not in GRID_KEYS)
        if unknown:
            raise ValueError(f"unknown grid rows {unknown}; expected names from {list(GRID_KEYS)}")
        for key, values in v.items():
            if not values:
                raise ValueError(f"grid row {key!r} has no candidates")
        if "hidden_layers" in v and any(k in v for k in LAYER_KEYS):
            raise ValueError("use either hidden_layers or layers/hidden_units, not both")
        return v

    @model_validator(mode="after")
    def _candidates_valid(self):
        # every candidate must build a Hyperparams when combined with the first of the others
        axes = self.axes()
        first = {name: options[0] for name, options in axes}
        for name, options in axes:
            for option in options[1:]:
                hyperparams_from_mapping({**first, name: option})
        hyperparams_from_mapping(first)
        return self

    def axes(self) -> list[tuple[str, list[Any]]]:
        """Grid axes in canonical order (first varies slowest).

        ``layers`` and ``hidden_units`` fold into one ``hidden_layers`` axis;
        layers=0 collapses every width onto the same linear model.
        """
        axes: list[tuple[str, list[Any]]] = []
        if "hidden_layers" in self.candidates:
            widths = [[int(v)] if isinstance(v, (int, float)) else list(v) for v in self.candidates["hidden_layers"]]
            axes.append(("hidden_layers", _distinct(widths)))
        elif any(k in self.candidates for k in LAYER_KEYS):
            combos = itertools.product(
                self.candidates.get("layers", [1]),
                self.candidates.get("hidden_units", [4032]),
            )
            axes.append(("hidden_layers", _distinct([[int(u)] * int(n) for n, u in combos])))
        for key in HYPERPARAM_KEYS[1:]:
            if key in self.candidates:
                axes.append((key, _distinct(list(self.candidates[key]))))
        return axes

    def size(self) -> int:
        return math.prod(len(options) for _, options in self.axes())

    def point(self, index: int) -> Hyperparams:
        axes = self.axes()
        total = math.prod(len(options) for _, options in axes)
        if not 0 <= index < total:
            raise IndexError(f"grid index {index} outside 0..{total - 1}")
        values: dict[str, Any] = {}
        for name, options in reversed(axes):
            index, r = divmod(index, len(options))
            values[name] = options[r]
        return hyperparams_from_mapping(values)

    def points(self) -> list[Hyperparams]:
        """Every point in index order; only sensible for small grids."""
        return [self.point(i) for i in range(self.size())]


def hyperparams_from_mapping(values: dict[str, Any]) -> Hyperparams:
    """Build Hyperparams from grid-style keys (``layers``/``hidden_units`` shorthand allowed)."""
    data = dict(values)
    if isinstance(data.get("hidden_layers"), (int, float)):
        data["hidden_layers"] = [int(data["hidden_layers"])]
    layers = data.pop("layers", None)
    units = data.pop("hidden_units", None)
    if layers is not None or units is not None:
        if "hidden_layers" in data:
            raise ValueError("use either hidden_layers or layers/hidden_units, not both")
        n_layers = int(layers) if layers is not None else 1
        width = int(units) if units is not None else 4032
        data["hidden_layers"] = [width] * n_layers
    return Hyperparams.model_validate(data)


class StepSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    step_id: str
    kind: StepKind


def _default_steps() -> list[StepSpec]:
    kinds = [StepKind.DEPOSITION, StepKind.ACTIVATION] * 3 + [StepKind.ACTIVATION]
    return [StepSpec(step_id=f"S{i + 1}", kind=k) for i, k in enumerate(kinds)]


class SynthConfig(BaseModel):
    """Synthetic fab: 14 wafers in three chamber-condition groups by default."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    n_wafers: int = Field(default=14, ge=2)
    wafer_prefix: str = "R"
    first_wafer_number: int = 21
    variables: list[str] = Field(default_factory=lambda: ["V1", "V2", "V3"], min_length=1)
    steps: list[StepSpec] = Field(default_factory=_default_steps, min_length=1)
    # Non-etch steps emitted once at the start of each run; featurization ignores them.
    other_steps: list[str] = Field(default_factory=lambda: ["purge"])
    cycles_per_step: tuple[int, int] = (8, 12)
    cycles_overrides: dict[str, int] = Field(default_factory=dict)
    samples_per_cycle: int = 40
    lead_samples: int = Field(default=0, ge=0)
    tail_fraction: float = 0.10
    early_cycle_weights: list[float] = Field(default_factory=lambda: list(DEFAULT_EARLY_WEIGHTS))
    latent_dim: int = Field(default=3, ge=1)
    noise_scale: float = Field(default=0.0, ge=0)
    sensor_scale: float = Field(default=0.1, ge=0)
    images_per_wafer: tuple[int, int] = (5, 6)
    group_boundaries: list[int] = Field(default_factory=lambda: [8, 12])
    group_shift: float = 1.0
    targets: dict[str, float] = Field(default_factory=lambda: {"remaining_mask": 30.0, "recess": 120.0})
    target_spread: float = Field(default=5.0, gt=0)
    holdout: list[str] = Field(default_factory=lambda: ["R22", "R34"])
    seed: int = 0

    @field_validator("cycles_per_step", "images_per_wafer", mode="before")
    @classmethod
    def _as_range(cls, v: Any) -> Any:
        if isinstance(v, int):
            return (v, v)
        return v

    @model_validator(mode="after")
    def _feasible(self):
        k = len(self.early_cycle_weights)
        min_q = 4 + k - 1
        lo, hi = self.cycles_per_step
        if lo > hi:
            raise ValueError("cycles_per_step range is inverted")
        if lo < min_q or any(q < min_q for q in self.cycles_overrides.values()):
            raise ValueError(f"every step needs at least {min_q} cycles to featurize")
        if self.samples_per_cycle < 3:
            raise ValueError("samples_per_cycle must be >= 3")
        _check_fraction("tail_fraction", self.tail_fraction, allow_zero=False, allow_one=False)
        if abs(sum(self.early_cycle_weights) - 1.0) > 1e-9 or any(w <= 0 for w in self.early_cycle_weights):
            raise ValueError("early_cycle_weights must be positive and sum to 1")
        ilo, ihi = self.images_per_wafer
        if ilo < 1 or ilo > ihi:
            raise ValueError("images_per_wafer must be a range with 1 <= lo <= hi")
        bounds = self.group_boundaries
        if sorted(set(bounds)) != bounds or any(b <= 0 or b >= self.n_wafers for b in bounds):
            raise ValueError("group_boundaries must be increasing wafer indices inside the run list")
        if not self.targets:
            raise ValueError("at least one target is required")
        ids = set(self.wafer_ids())
        unknown = [w for w in list(self.holdout) + list(self.cycles_overrides) if w not in ids]
        if unknown:
            raise ValueError(f"unknown wafer ids: {unknown}")
        step_ids = [s.step_id for s in self.steps] + list(self.other_steps)
        if len(set(step_ids)) != len(step_ids):
            raise ValueError("step ids must be unique")
        return self

    def wafer_ids(self) -> list[str]:
        return [f"{self.wafer_prefix}{self.first_wafer_number + i}" for i in range(self.n_wafers)]

    def group_of(self, index: int) -> int:
        return 1 + sum(1 for b in self.group_boundaries if index >= b)

    def featurize_config(self) -> FeaturizeConfig:
        trim = 0.0
        if self.lead_samples:
            total = self.lead_samples + self.samples_per_cycle
            # half a sample of slack so floor(trim * total) lands exactly on lead_samples
            trim = (self.lead_samples + 0.5) / total
        return FeaturizeConfig(
            variable_names=list(self.variables),
            step_ids=[s.step_id for s in self.steps],
            trim_fraction=trim,
            tail_fraction=self.tail_fraction,
            early_cycle_weights=list(self.early_cycle_weights),
        )


class WaferEntry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    wafer_id: str
    group: str
    trace: Path
    segmentation: Path


class RunManifest(BaseModel):
    """Paths are relative to the manifest file unless absolute."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    featurize_config: Path
    target: str
    holdout: list[str] = Field(default_factory=list)
    metrology: list[Path] = Field(min_length=1)
    wafers: list[WaferEntry] = Field(min_length=1)

    @model_validator(mode="after")
    def _unique_wafers(self):
        ids = [w.wafer_id for w in self.wafers]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate wafer_id in manifest")
        return self

    def resolved(self, base_dir: Path) -> "RunManifest":
        def fix(p: Path) -> Path:
            return p if p.is_absolute() else base_dir / p

        return RunManifest(
            featurize_config=fix(self.featurize_config),
            target=self.target,
            holdout=list(self.holdout),
            metrology=[fix(p) for p in self.metrology],
            wafers=[
                WaferEntry(
                    wafer_id=w.wafer_id,
                    group=w.group,
                    trace=fix(w.trace),
                    segmentation=fix(w.segmentation),
                )
                for w in self.wafers
            ],
        )
