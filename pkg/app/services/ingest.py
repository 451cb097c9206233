"""Parsing of trace, segmentation and metrology CSVs into validated runs.

Row numbers in error messages are 1-based file lines (the header is line 1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from app.errors import (
    CycleGapError,
    DuplicateImageError,
    EmptyCellError,
    IngestError,
    MissingColumnError,
    MissingFileError,
    NonFiniteTargetError,
    NonMonotoneTimeError,
    NonNumericCellError,
    RunAssemblyError,
    SegmentBoundsError,
    SegmentOverlapError,
)
from app.schemas import StepKind

logger = logging.getLogger(__name__)

TIME_COLUMN = "time"
SEGMENTATION_COLUMNS = ("step_id", "step_kind", "cycle_index", "row_start", "row_end")
METROLOGY_KEYS = ("wafer_id", "image_id")

PathLike = Union[str, Path]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SensorTrace:
    wafer_id: str
    time: np.ndarray
    names: tuple[str, ...]
    values: np.ndarray  # (rows, len(names))

    def __post_init__(self):
        if not self.names:
            raise IngestError("trace needs at least one sensor column")
        if self.values.shape != (len(self.time), len(self.names)):
            raise IngestError("trace columns must have equal row count")
        object.__setattr__(self, "time", _frozen(self.time))
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def n_rows(self) -> int:
        return int(self.time.shape[0])

    def column(self, name: str) -> np.ndarray:
        try:
            return self.values[:, self.names.index(name)]
        except ValueError:
            raise MissingColumnError(f"trace has no column {name!r}", column=name) from None

    def subset(self, names: Sequence[str]) -> "SensorTrace":
        cols = [self.column(n) for n in names]
        return replace(self, names=tuple(names), values=np.column_stack(cols) if cols else self.values[:, :0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SensorTrace):
            return NotImplemented
        return (
            self.wafer_id == other.wafer_id
            and self.names == other.names
            and np.array_equal(self.time, other.time)
            and np.array_equal(self.values, other.values)
        )


@dataclass(frozen=True, order=True)
class SegmentEntry:
    row_start: int
    row_end: int
    step_id: str
    step_kind: StepKind
    cycle_index: int


@dataclass(frozen=True)
class SegmentationMap:
    entries: tuple[SegmentEntry, ...] = ()

    @classmethod
    def build(
        cls,
        entries: Iterable[SegmentEntry],
        *,
        path: Optional[PathLike] = None,
        lines: Optional[dict[SegmentEntry, int]] = None,
    ) -> "SegmentationMap":
        """Validate and order entries by row_start."""
        lines = lines or {}
        ordered = sorted(entries, key=lambda e: (e.row_start, e.row_end))
        for e in ordered:
            if e.row_start < 0 or e.row_end <= e.row_start:
                raise SegmentBoundsError(
                    f"segment {e.step_id}/{e.cycle_index} has row_end <= row_start ({e.row_start}, {e.row_end})",
                    path=path,
                    row=lines.get(e),
                    column="row_end",
                )
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.row_start < prev.row_end:
                raise SegmentOverlapError(
                    f"segment {cur.step_id}/{cur.cycle_index} [{cur.row_start},{cur.row_end}) overlaps "
                    f"{prev.step_id}/{prev.cycle_index} [{prev.row_start},{prev.row_end})",
                    path=path,
                    row=lines.get(cur),
                    column="row_start",
                )

        kinds: dict[str, StepKind] = {}
        cycles: dict[str, list[SegmentEntry]] = {}
        for e in ordered:
            if kinds.setdefault(e.step_id, e.step_kind) != e.step_kind:
                raise IngestError(
                    f"step {e.step_id!r} declared with two kinds",
                    path=path,
                    row=lines.get(e),
                    column="step_kind",
                )
            cycles.setdefault(e.step_id, []).append(e)
        for step_id, items in cycles.items():
            indices = sorted(e.cycle_index for e in items)
            if indices != list(range(len(indices))):
                missing = sorted(set(range(max(indices) + 1)) - set(indices))
                if missing:
                    detail = f"missing cycle {missing[0]}"
                    culprit = min((e for e in items if e.cycle_index > missing[0]), key=lambda e: e.cycle_index)
                else:
                    dup = next(i for i in indices if indices.count(i) > 1)
                    detail = f"duplicate cycle index {dup}"
                    culprit = [e for e in items if e.cycle_index == dup][-1]
                raise CycleGapError(
                    f"step {step_id!r}: {detail}", path=path, row=lines.get(culprit), column="cycle_index"
                )
        return cls(entries=tuple(ordered))

    def steps(self) -> list[str]:
        seen: list[str] = []
        for e in self.entries:
            if e.step_id not in seen:
                seen.append(e.step_id)
        return seen

    def kind_of(self, step_id: str) -> Optional[StepKind]:
        for e in self.entries:
            if e.step_id == step_id:
                return e.step_kind
        return None

    def cycles(self, step_id: str) -> list[SegmentEntry]:
        return sorted((e for e in self.entries if e.step_id == step_id), key=lambda e: e.cycle_index)

    def cycle_count(self, step_id: str) -> int:
        return sum(1 for e in self.entries if e.step_id == step_id)

    @property
    def max_row(self) -> int:
        return max((e.row_end for e in self.entries), default=0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(e.step_id, e.step_kind.value, e.cycle_index, e.row_start, e.row_end) for e in self.entries],
            columns=list(SEGMENTATION_COLUMNS),
        )


@dataclass(frozen=True)
class MetrologyRecord:
    wafer_id: str
    image_id: str
    targets: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class WaferRun:
    wafer_id: str
    group_label: str
    trace: SensorTrace
    segmentation: SegmentationMap


# --- CSV helpers ---


def _read_csv(path: PathLike) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError("file not found", path=path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8-sig")
    except pd.errors.EmptyDataError:
        raise IngestError("file is empty", path=path) from None
    except pd.errors.ParserError as e:
        raise IngestError(f"malformed CSV: {e}", path=path) from None
    df.columns = [str(c).strip() for c in df.columns]
    return df


def _require_columns(df: pd.DataFrame, names: Iterable[str], path: PathLike) -> None:
    for name in names:
        if name not in df.columns:
            raise MissingColumnError(f"missing column {name!r}", path=path, row=1, column=name)


def _numeric(df: pd.DataFrame, name: str, path: PathLike, *, finite_error=NonNumericCellError) -> np.ndarray:
    raw = df[name].str.strip()
    empty = (raw == "").to_numpy()
    if empty.any():
        row = int(np.argmax(empty))
        raise EmptyCellError("empty cell", path=path, row=row + 2, column=name)
    values = pd.to_numeric(raw, errors="coerce").to_numpy(dtype=float)
    bad = np.isnan(values) & ~raw.str.lower().isin(["nan", "+nan", "-nan"]).to_numpy()
    if bad.any():
        row = int(np.argmax(bad))
        raise NonNumericCellError(f"non-numeric value {raw.iloc[row]!r}", path=path, row=row + 2, column=name)
    nonfinite = ~np.isfinite(values)
    if nonfinite.any():
        row = int(np.argmax(nonfinite))
        raise finite_error(f"non-finite value {raw.iloc[row]!r}", path=path, row=row + 2, column=name)
    return values


def _integer(df: pd.DataFrame, name: str, path: PathLike) -> list[int]:
    out = []
    for i, cell in enumerate(df[name].str.strip()):
        try:
            out.append(int(cell))
        except ValueError:
            raise NonNumericCellError(f"expected integer, got {cell!r}", path=path, row=i + 2, column=name) from None
    return out


# --- operations ---


def parse_trace(path: PathLike, variable_names: Sequence[str], wafer_id: Optional[str] = None) -> SensorTrace:
    """Read a trace CSV keeping only the requested sensor columns, in request order."""
    df = _read_csv(path)
    _require_columns(df, [TIME_COLUMN, *variable_names], path)
    if df.empty:
        raise IngestError("trace has no data rows", path=path)
    time = _numeric(df, TIME_COLUMN, path)
    drops = np.flatnonzero(np.diff(time) < 0)
    if drops.size:
        row = int(drops[0]) + 1
        raise NonMonotoneTimeError(
            f"time decreases from {time[row - 1]!r} to {time[row]!r}", path=path, row=row + 2, column=TIME_COLUMN
        )
    names = list(dict.fromkeys(variable_names))
    values = np.column_stack([_numeric(df, n, path) for n in names]) if names else np.empty((len(df), 0))
    trace = SensorTrace(wafer_id=wafer_id or Path(path).stem, time=time, names=tuple(names), values=values)
    logger.debug("Parsed trace", extra={"path": str(path), "rows": trace.n_rows})
    return trace


def parse_segmentation(path: PathLike) -> SegmentationMap:
    df = _read_csv(path)
    _require_columns(df, SEGMENTATION_COLUMNS, path)
    kinds = []
    for i, cell in enumerate(df["step_kind"].str.strip().str.lower()):
        try:
            kinds.append(StepKind(cell))
        except ValueError:
            raise IngestError(f"unknown step_kind {cell!r}", path=path, row=i + 2, column="step_kind") from None
    cycle = _integer(df, "cycle_index", path)
    start = _integer(df, "row_start", path)
    end = _integer(df, "row_end", path)
    for i, c in enumerate(cycle):
        if c < 0:
            raise CycleGapError("cycle_index must be >= 0", path=path, row=i + 2, column="cycle_index")

    entries: list[SegmentEntry] = []
    lines: dict[SegmentEntry, int] = {}
    for i, step_id in enumerate(df["step_id"].str.strip()):
        e = SegmentEntry(row_start=start[i], row_end=end[i], step_id=step_id, step_kind=kinds[i], cycle_index=cycle[i])
        entries.append(e)
        lines.setdefault(e, i + 2)
    return SegmentationMap.build(entries, path=path, lines=lines)


def parse_metrology(paths: Union[PathLike, Sequence[PathLike]]) -> list[MetrologyRecord]:
    """One record per row; duplicates of (wafer_id, image_id) across all files are rejected."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    records: list[MetrologyRecord] = []
    seen: dict[tuple[str, str], str] = {}
    for path in paths:
        df = _read_csv(path)
        _require_columns(df, METROLOGY_KEYS, path)
        target_names = [c for c in df.columns if c not in METROLOGY_KEYS]
        if not target_names:
            raise MissingColumnError("metrology needs at least one target column", path=path, row=1)
        columns = {name: _numeric(df, name, path, finite_error=NonFiniteTargetError) for name in target_names}
        for i, (wafer_id, image_id) in enumerate(zip(df["wafer_id"].str.strip(), df["image_id"].str.strip())):
            key = (wafer_id, image_id)
            if key in seen:
                raise DuplicateImageError(
                    f"duplicate image {image_id!r} for wafer {wafer_id!r} (first seen in {seen[key]})",
                    path=path,
                    row=i + 2,
                    column="image_id",
                )
            seen[key] = str(path)
            targets = {name: float(columns[name][i]) for name in target_names}
            records.append(MetrologyRecord(wafer_id=wafer_id, image_id=image_id, targets=targets))
    return records


def assemble_run(trace: SensorTrace, seg: SegmentationMap, wafer_id: str, group_label: str) -> WaferRun:
    if not seg.entries:
        raise RunAssemblyError(f"run {wafer_id!r} has an empty segmentation (need at least one cycle)")
    if seg.max_row > trace.n_rows:
        raise RunAssemblyError(
            f"segmentation row {seg.max_row} is out of range for a trace of {trace.n_rows} rows",
            column="row_end",
        )
    if trace.wafer_id != wafer_id:
        trace = replace(trace, wafer_id=wafer_id)
    return WaferRun(wafer_id=wafer_id, group_label=group_label, trace=trace, segmentation=seg)


# --- writers (used by synth and round-trip checks) ---


def write_trace(path: PathLike, trace: SensorTrace) -> None:
    df = pd.DataFrame(trace.values, columns=list(trace.names))
    df.insert(0, TIME_COLUMN, trace.time)
    df.to_csv(path, index=False, lineterminator="\n")


def write_segmentation(path: PathLike, seg: SegmentationMap) -> None:
    seg.to_frame().to_csv(path, index=False, lineterminator="\n")


def write_metrology(path: PathLike, records: Sequence[MetrologyRecord]) -> None:
    target_names: list[str] = []
    for r in records:
        for name in r.targets:
            if name not in target_names:
                target_names.append(name)
    rows = [[r.wafer_id, r.image_id, *(r.targets.get(n, math.nan) for n in target_names)] for r in records]
    pd.DataFrame(rows, columns=[*METROLOGY_KEYS, *target_names]).to_csv(path, index=False, lineterminator="\n")
