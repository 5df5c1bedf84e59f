"""Dual info/debug log files, one pair per invocation.

Records are ``<ISO8601> <LEVEL> <message>`` lines.  The handlers shrug off
transient write failures (for example a reader holding the file hostage):
the record is dropped, the stream is reopened lazily, and the crawl goes on.
"""

from __future__ import annotations

import logging
import sys
import time

from .clocks import Clock, SystemClock
from .storage import ArchiveLayout

PACKAGE_LOGGER = "ftct"

_FORMAT = "%(asctime)s %(levelname)s %(message)s"
_DATE_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class ResilientFileHandler(logging.FileHandler):
    """FileHandler that survives emit failures by reopening next time."""

    def handleError(self, record: logging.LogRecord) -> None:
        try:
            if self.stream is not None:
                self.stream.close()
        except Exception:
            pass
        # FileHandler.emit reopens the file when stream is None
        self.stream = None


def _utc_formatter() -> logging.Formatter:
    formatter = logging.Formatter(_FORMAT, datefmt=_DATE_FORMAT)
    formatter.converter = time.gmtime
    return formatter


def init_logging(
    layout: ArchiveLayout,
    *,
    clock: Clock | None = None,
    console: bool = False,
) -> tuple[str, str]:
    """Create the info/debug log pair for this invocation.

    Returns the two file paths.  Raises OSError when the logs directory is
    not writable; that is fatal for the caller.
    """
    clock = clock or SystemClock()
    now = clock.time()
    layout.logs_dir.mkdir(parents=True, exist_ok=True)
    info_path = layout.info_log_path(now)
    debug_path = layout.debug_log_path(now)

    root = logging.getLogger(PACKAGE_LOGGER)
    root.setLevel(logging.DEBUG)
    reset_logging()

    formatter = _utc_formatter()
    info_handler = ResilientFileHandler(info_path, encoding="utf-8")
    info_handler.setLevel(logging.INFO)
    debug_handler = ResilientFileHandler(debug_path, encoding="utf-8")
    debug_handler.setLevel(logging.DEBUG)
    handlers: list[logging.Handler] = [info_handler, debug_handler]
    if console:
        stream_handler = logging.StreamHandler(sys.stderr)
        stream_handler.setLevel(logging.INFO)
        handlers.append(stream_handler)
    for handler in handlers:
        handler.setFormatter(formatter)
        handler._ftct_managed = True  # type: ignore[attr-defined]
        root.addHandler(handler)
    return str(info_path), str(debug_path)


def reset_logging() -> None:
    """Detach handlers installed by init_logging (tests and re-invocation)."""
    root = logging.getLogger(PACKAGE_LOGGER)
    for handler in list(root.handlers):
        if getattr(handler, "_ftct_managed", False):
            root.removeHandler(handler)
            handler.close()
