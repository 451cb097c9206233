"""Loading of run configuration files.

JSON configs go through pydantic. Hyperparameter and grid files use the plain
``name = v1, v2, ...`` format, one hyperparameter per line.
"""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, TypeVar

from pydantic import BaseModel, ValidationError

from app.errors import ConfigError, MissingFileError
from app.schemas import GRID_KEYS, Grid, Hyperparams, RunManifest, hyperparams_from_mapping

logger = logging.getLogger(__name__)

M = TypeVar("M", bound=BaseModel)

_ALIASES = {
    "hyperbolic tangent": "tanh",
    "stochastic gradient descent": "sgd",
    "adaptive-moment": "adam",
    "adaptive moment": "adam",
}

_KEY_ALIASES = {
    "hidden layers": "layers",
    "l2 regularization constant": "l2",
    "learning rate": "learning_rate",
    "learning decay": "decay",
    "learning algorithm": "optimizer",
    "activation function": "activation",
    "es minimum delta": "es_min_delta",
    "es patience": "es_patience",
    "batch size": "batch_size",
}


def _require_file(path: Path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError("file not found", path=path)
    return path


def load_json_config(model_cls: type[M], path: Path) -> M:
    path = _require_file(path)
    try:
        return model_cls.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"invalid {model_cls.__name__}: {e}", path=path) from e


def load_manifest(path: Path) -> RunManifest:
    path = Path(path)
    manifest = load_json_config(RunManifest, path)
    return manifest.resolved(path.parent)


def _parse_scalar(token: str) -> Any:
    text = token.strip()
    lowered = text.lower()
    if lowered in _ALIASES:
        return _ALIASES[lowered]
    if lowered in ("linear", "none"):
        return []
    if "x" in lowered and all(part.strip().isdigit() for part in lowered.split("x")):
        return [int(part) for part in lowered.split("x")]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return lowered


def parse_key_values(text: str, *, path: Path | None = None) -> dict[str, list[Any]]:
    rows: dict[str, list[Any]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else ":" if ":" in line else None
        if sep is None:
            raise ConfigError(f"line {lineno}: expected 'name = values'", path=path)
        key, _, values = line.partition(sep)
        key = key.strip().lower()
        key = _KEY_ALIASES.get(key, key.replace(" ", "_"))
        if key not in GRID_KEYS:
            raise ConfigError(f"line {lineno}: unknown hyperparameter {key!r}", path=path)
        if key in rows:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}", path=path)
        candidates = [_parse_scalar(v) for v in values.split(",") if v.strip()]
        if not candidates:
            raise ConfigError(f"line {lineno}: no values for {key!r}", path=path)
        rows[key] = candidates
    return rows


def load_grid(path: Path) -> Grid:
    path = _require_file(path)
    rows = parse_key_values(path.read_text(encoding="utf-8"), path=path)
    try:
        grid = Grid(candidates=rows)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid grid: {e}", path=path) from e
    logger.info("Loaded grid", extra={"path": str(path), "grid_size": grid.size()})
    return grid


def load_hyperparams(path: Path) -> Hyperparams:
    path = _require_file(path)
    rows = parse_key_values(path.read_text(encoding="utf-8"), path=path)
    multi = [k for k, v in rows.items() if len(v) != 1]
    if multi:
        raise ConfigError(f"hyperparameter file needs one value per key, got several for {multi}", path=path)
    try:
        return hyperparams_from_mapping({k: v[0] for k, v in rows.items()})
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"invalid hyperparameters: {e}", path=path) from e


def dump_hyperparams(hp: Hyperparams) -> str:
    lines = []
    for part in hp.canonical().split(";"):
        key, _, value = part.partition("=")
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
