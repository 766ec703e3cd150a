import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import TextIO

from .config import LOG_DIR, setting
from .helpers import safe_int

# Libraries that log chatty DEBUG lines we never want in debug.log
_QUIET_LOGGERS = ("PIL", "matplotlib", "numexpr")


def _build_handler(log_dir: Path, filename: str, level: int) -> RotatingFileHandler:
    handler = RotatingFileHandler(
        log_dir / filename,
        maxBytes=safe_int(setting("log_max_bytes"), 5 * 1024 * 1024, min_value=1024),
        backupCount=safe_int(setting("log_backup_count"), 10, min_value=1),
        encoding="utf-8",
    )
    handler.setLevel(level)
    formatter = logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    handler.setFormatter(formatter)
    return handler


_LEVEL_COLORS: dict[int, str] = {
    logging.DEBUG: "\x1b[90m",
    logging.INFO: "\x1b[36m",
    logging.WARNING: "\x1b[33m",
    logging.ERROR: "\x1b[31m",
    logging.CRITICAL: "\x1b[41m\x1b[97m",
}
_RESET = "\x1b[0m"


def _wants_color(stream: TextIO | None) -> bool:
    if stream is None or not getattr(stream, "isatty", lambda: False)():
        return False
    return "NO_COLOR" not in os.environ and os.environ.get("TERM", "") != "dumb"


class _ConsoleFormatter(logging.Formatter):
    """Short console lines; logger names and tracebacks only in debug mode."""

    def __init__(self, *, debug_enabled: bool, color: bool) -> None:
        super().__init__(datefmt="%H:%M:%S")
        self._debug_enabled = debug_enabled
        self._color = color

    def format(self, record: logging.LogRecord) -> str:
        label = record.levelname
        if self._color:
            label = f"{_LEVEL_COLORS.get(record.levelno, '')}{label}{_RESET}"
        # 颜色码不计入对齐宽度
        pad = " " * max(0, 8 - len(record.levelname))
        body = record.getMessage()
        if self._debug_enabled:
            body = f"{record.name} - {body}"
            if record.exc_info:
                body = f"{body}\n{self.formatException(record.exc_info)}"
        return f"{self.formatTime(record, self.datefmt)} {label}{pad} {body}"


def configure_logging(debug_enabled: bool = False, *, log_dir: Path | None = None, console: bool = True) -> None:
    """
    Route all library and CLI logging to rotating files plus the console.

    pipeline.log keeps INFO and above, error.log ERROR only; debug.log is added
    when ``debug_enabled`` is set. Calling this again replaces the handlers.
    """
    target_dir = Path(log_dir) if log_dir is not None else LOG_DIR
    target_dir.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(logging.DEBUG if debug_enabled else logging.INFO)
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    root_logger.addHandler(_build_handler(target_dir, "pipeline.log", logging.INFO))
    root_logger.addHandler(_build_handler(target_dir, "error.log", logging.ERROR))

    if console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(logging.DEBUG if debug_enabled else logging.INFO)
        console_handler.setFormatter(
            _ConsoleFormatter(debug_enabled=debug_enabled, color=_wants_color(console_handler.stream))
        )
        root_logger.addHandler(console_handler)

    if debug_enabled:
        root_logger.addHandler(_build_handler(target_dir, "debug.log", logging.DEBUG))

    for name in _QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)
