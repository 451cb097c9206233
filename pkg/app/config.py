from __future__ import annotations

from typing import Optional

from pydantic import model_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    APP_ENV: str = "dev"

    # Logging: JSON lines on stderr by default, plain text when LOG_JSON=false.
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True

    # Optional grid-search result cache. SQLite is fine locally; any SQLAlchemy URL works.
    # Unset disables caching entirely.
    RESULTS_DATABASE_URL: Optional[str] = None

    # Defaults for commands that do not receive --jobs / --seed.
    DEFAULT_JOBS: int = 1
    DEFAULT_SEED: int = 0

    # Error reporting (optional). Sentry stays off unless a DSN is set and sentry-sdk is installed.
    SENTRY_DSN: Optional[str] = None

    @model_validator(mode="after")
    def _normalize(self):
        level = (self.LOG_LEVEL or "INFO").strip().upper()
        object.__setattr__(self, "LOG_LEVEL", level)

        url = (self.RESULTS_DATABASE_URL or "").strip() or None
        # Some providers expose Postgres URLs as postgres://, SQLAlchemy wants postgresql://
        if url and url.startswith("postgres://"):
            url = "postgresql://" + url[len("postgres://"):]
        object.__setattr__(self, "RESULTS_DATABASE_URL", url)
        object.__setattr__(self, "SENTRY_DSN", (self.SENTRY_DSN or "").strip() or None)

        if self.DEFAULT_JOBS < 1:
            raise ValueError("DEFAULT_JOBS must be >= 1")
        return self

    class Config:
        env_file = ".env"
        extra = "ignore"


settings = Settings()
