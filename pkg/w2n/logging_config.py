"""Root logger setup for the w2n commands.

Modules log through ``logging.getLogger(__name__)`` and never configure
handlers themselves. The CLI calls :func:`setup_logging` once per process;
it logs to the console and, given an output directory, to a rotating
``logs/w2n.log`` there (5 MB, 3 backups). Ablation sweeps add one
:func:`create_run_handler` per run.
"""
from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path

_configured = False

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
LOG_DIR_NAME = "logs"
LOG_FILE_NAME = "w2n.log"
MAX_BYTES = 5 * 1024 * 1024  # 5 MB
BACKUP_COUNT = 3


def _as_level(level: str | int) -> int:
    if isinstance(level, str):
        return getattr(logging, level.upper(), logging.INFO)
    return level


def setup_logging(
    level: str | int = "INFO",
    out_dir: str | Path | None = None,
) -> None:
    """Configure root logger with a console handler and, when ``out_dir``
    is given, a rotating file handler.

    Safe to call multiple times: subsequent calls are no-ops unless
    the module-level ``_configured`` flag is reset (e.g. in tests).
    """
    global _configured
    if _configured:
        return
    _configured = True

    level = _as_level(level)
    root = logging.getLogger()
    root.setLevel(level)

    console = logging.StreamHandler()
    console.setLevel(level)
    console.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(console)

    if out_dir is None:
        return
    log_dir = Path(out_dir) / LOG_DIR_NAME
    log_dir.mkdir(parents=True, exist_ok=True)
    file_handler = RotatingFileHandler(
        log_dir / LOG_FILE_NAME,
        maxBytes=MAX_BYTES,
        backupCount=BACKUP_COUNT,
        encoding="utf-8",
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(file_handler)


def create_run_handler(
    run_id: str,
    out_dir: str | Path,
    level: str | int = "INFO",
) -> logging.FileHandler:
    """Create a file handler that writes to ``logs/{run_id}.log``.

    Attach to the root logger at the start of a run and remove it in the
    ``finally`` block so each ablation run gets its own log file.
    """
    log_dir = Path(out_dir) / LOG_DIR_NAME
    log_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_dir / f"{run_id}.log", encoding="utf-8")
    handler.setLevel(_as_level(level))
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    return handler


def reset() -> None:
    """Reset configuration flag (tests only)."""
    global _configured
    _configured = False
