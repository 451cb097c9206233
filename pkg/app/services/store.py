"""Grid-search result cache backed by SQLAlchemy.

A rerun of the same grid over the same dataset skips every point already
cross-validated, which makes long searches resumable.
"""

from __future__ import annotations

import json
import logging
from datetime import datetime
from typing import Optional

from sqlalchemy.orm import Session

from app.db import create_results_engine, init_db, session_scope
from app.models import AppState, CvResult
from app.services.evaluate import CvSummary

logger = logging.getLogger(__name__)


def get_state(db: Session, key: str) -> str | None:
    row = db.get(AppState, key)
    return row.value if row else None


def set_state(db: Session, key: str, value: str) -> None:
    row = db.get(AppState, key)
    if row is None:
        row = AppState(key=key, value=value)
        db.add(row)
    else:
        row.value = value
        row.updated_at = datetime.utcnow()


class ResultCache:
    def __init__(self, database_url: str, dataset_hash: str):
        self.dataset_hash = dataset_hash
        self._factory = init_db(create_results_engine(database_url))
        self.hits = 0

    def get(self, key: str) -> Optional[CvSummary]:
        with session_scope(self._factory) as db:
            row = db.get(CvResult, key)
            if row is None:
                return None
            payload = row.summary_json
        self.hits += 1
        return CvSummary.from_dict(json.loads(payload))

    def put(self, key: str, summary: CvSummary, grid_index: Optional[int] = None) -> None:
        with session_scope(self._factory) as db:
            row = db.get(CvResult, key) or CvResult(cache_key=key)
            row.dataset_hash = self.dataset_hash
            row.grid_index = grid_index
            row.target_name = summary.target_name
            row.hyperparams = summary.hyperparams.canonical()
            row.mean_validation_error = summary.mean_validation_error
            row.mean_measurement_error = summary.mean_measurement_error
            row.summary_json = json.dumps(summary.to_dict())
            db.add(row)
        logger.debug("Cached grid point", extra={"grid_index": grid_index})

    def count(self) -> int:
        with session_scope(self._factory) as db:
            return db.query(CvResult).filter(CvResult.dataset_hash == self.dataset_hash).count()

    def record_search(self, best_hyperparams: str, evaluated: int) -> None:
        with session_scope(self._factory) as db:
            set_state(
                db,
                f"grid_search:{self.dataset_hash}",
                json.dumps({"best": best_hyperparams, "evaluated": evaluated}),
            )

    def last_search(self) -> Optional[dict]:
        with session_scope(self._factory) as db:
            value = get_state(db, f"grid_search:{self.dataset_hash}")
        return json.loads(value) if value else None
