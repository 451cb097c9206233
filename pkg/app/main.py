import argparse
import json
import logging
import sys
from typing import Optional, Sequence

try:
    import sentry_sdk  # type: ignore
except Exception:  # pragma: no cover
    sentry_sdk = None

from app.commands import COMMANDS
from app.config import settings
from app.errors import EtchVmError

logger = logging.getLogger(__name__)

# Structured extras copied into each JSON log line when present on the record.
LOG_EXTRAS = (
    "command",
    "path",
    "wafer_id",
    "wafers",
    "fold",
    "epoch",
    "restored_epoch",
    "train_loss",
    "val_loss",
    "best_loss",
    "validation_error",
    "measurement_error",
    "monitor",
    "wait",
    "grid_index",
    "grid_size",
    "count",
    "images",
    "jobs",
    "rows",
    "seed",
    "sources",
    "synthetic",
    "mode",
    "feature_dim",
    "hyperparams",
    "evaluated",
)


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "timestamp": self.formatTime(record, datefmt="%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }
        # pass structured extras if present
        for k in LOG_EXTRAS:
            if hasattr(record, k):
                payload[k] = getattr(record, k)
        if record.exc_info:
            payload["exc_info"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False, default=str)


def setup_logging(level: str = settings.LOG_LEVEL, as_json: bool = settings.LOG_JSON) -> None:
    root = logging.getLogger()
    root.setLevel(level)
    # stdout carries reports and CSVs; logs stay on stderr
    handler = logging.StreamHandler(sys.stderr)
    if as_json:
        handler.setFormatter(JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.handlers = [handler]
    logging.getLogger("joblib").setLevel(logging.WARNING)


def setup_error_reporting() -> bool:
    """Initialise Sentry when SENTRY_DSN is set and sentry-sdk is importable."""
    if not (settings.SENTRY_DSN and sentry_sdk):
        return False
    sentry_sdk.init(
        dsn=settings.SENTRY_DSN,
        environment=settings.APP_ENV,
        traces_sample_rate=0.0,
    )
    return True


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="etchvm",
        description="Virtual metrology for cyclic etch processes: featurize, cross-validate, train, predict.",
    )
    parser.add_argument("--log-level", default=None, help="overrides LOG_LEVEL")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in COMMANDS:
        module.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one sub-command. Exit codes: 0 success, 1 domain error, 2 usage error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2

    setup_logging(level=(args.log_level or settings.LOG_LEVEL).upper())
    reporting = setup_error_reporting()
    logger.info("Command started", extra={"command": args.command})
    try:
        code = args.func(args)
    except EtchVmError as e:
        if reporting:
            sentry_sdk.capture_exception(e)
        logger.error("Command failed", extra={"command": args.command})
        print(f"etchvm {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        if reporting:
            sentry_sdk.capture_exception(e)
        logger.exception("Command crashed", extra={"command": args.command})
        raise
    logger.info("Command finished", extra={"command": args.command})
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
