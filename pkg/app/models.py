from datetime import datetime

from sqlalchemy import DateTime, Float, Integer, String, Text
from sqlalchemy.orm import Mapped, declarative_base, mapped_column

Base = declarative_base()


class CvResult(Base):
    """One cross-validated grid point, keyed by dataset hash + hyperparameters + CV options."""

    __tablename__ = "cv_results"

    cache_key: Mapped[str] = mapped_column(String(64), primary_key=True)
    dataset_hash: Mapped[str] = mapped_column(String(64), index=True)
    grid_index: Mapped[int | None] = mapped_column(Integer, nullable=True)
    target_name: Mapped[str] = mapped_column(String)
    hyperparams: Mapped[str] = mapped_column(Text)  # canonical key=value form
    mean_validation_error: Mapped[float] = mapped_column(Float)
    mean_measurement_error: Mapped[float] = mapped_column(Float)
    summary_json: Mapped[str] = mapped_column(Text)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)


class AppState(Base):
    """Small key/value store for run bookkeeping.

    Used for the last completed grid search per dataset.
    """

    __tablename__ = "app_state"

    key: Mapped[str] = mapped_column(String, primary_key=True)
    value: Mapped[str] = mapped_column(Text)
    updated_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.utcnow)
