"""Exception hierarchy.

Every error raised by the toolkit derives from ``EtchVmError``; the CLI maps
those to exit code 1. Ingest errors carry the file, row and column they refer
to so the message always points at the offending cell.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Union


class EtchVmError(Exception):
    pass


class ConfigError(EtchVmError):
    def __init__(self, message: str, path: Optional[Union[str, Path]] = None):
        self.path = str(path) if path is not None else None
        super().__init__(f"{self.path}: {message}" if self.path else message)


# --- ingest ---


class IngestError(EtchVmError):
    def __init__(
        self,
        message: str,
        path: Optional[Union[str, Path]] = None,
        row: Optional[int] = None,
        column: Optional[str] = None,
    ):
        self.path = str(path) if path is not None else None
        self.row = row
        self.column = column
        where = []
        if self.path:
            where.append(f"file {self.path}")
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        self.detail = message
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class MissingFileError(IngestError):
    pass


class MissingColumnError(IngestError):
    pass


class NonNumericCellError(IngestError):
    pass


class EmptyCellError(IngestError):
    pass


class NonMonotoneTimeError(IngestError):
    pass


class SegmentOverlapError(IngestError):
    pass


class CycleGapError(IngestError):
    pass


class SegmentBoundsError(IngestError):
    pass


class DuplicateImageError(IngestError):
    pass


class NonFiniteTargetError(IngestError):
    pass


class RunAssemblyError(IngestError):
    pass


# --- featurize ---


class FeaturizeError(EtchVmError):
    pass


class TrimError(FeaturizeError):
    pass


class InsufficientCyclesError(FeaturizeError):
    pass


class MissingStepError(FeaturizeError):
    pass


class NonEtchStepError(FeaturizeError):
    pass


class NonFiniteFeatureError(FeaturizeError):
    pass


# --- dataset ---


class DatasetError(EtchVmError):
    pass


class UnknownWaferError(DatasetError):
    pass


class MissingTargetError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class SingularCovarianceError(DatasetError):
    pass


class LeakageError(DatasetError):
    pass


# --- model ---


class ModelError(EtchVmError):
    pass


class DivergenceError(ModelError):
    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} (epoch {epoch})")


class ModelFormatError(ModelError):
    pass


class ModelVersionError(ModelFormatError):
    pass
