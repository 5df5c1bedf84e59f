"""Date-partitioned on-disk archive: layout algebra, atomic writes, recovery.

Layout contract::

    <root>/logs/info_log<ts>.log
    <root>/logs/debug_log<ts>.log
    <root>/saves/<YYYY-MM-DD>/threads_on_boards/<board><ts>.json
    <root>/saves/<YYYY-MM-DD>/threads/<board>/<thread_no>_<ts>.json

where ``<ts>`` is the UTC instant rendered as ``YYYY-MM-DD_hh-mm-ss`` —
filesystem-safe and lexicographically sortable.  Snapshot bodies are the
verbatim upstream bytes; nothing here ever rewrites a stored payload.
"""

from __future__ import annotations

import json
import logging
import os
import re
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, NamedTuple

from .api import BOARD_CODE_RE, validate_board_code, validate_thread_no

logger = logging.getLogger(__name__)

TIMESTAMP_FMT = "%Y-%m-%d_%H-%M-%S"
DATE_FMT = "%Y-%m-%d"

THREAD_FILE_RE = re.compile(r"^(\d+)_(\d{4}-\d{2}-\d{2}_\d{2}-\d{2}-\d{2})\.json$")
CATALOG_FILE_RE = re.compile(
    r"^([a-z0-9]{1,10}?)(\d{4}-\d{2}-\d{2}_\d{2}-\d{2}-\d{2})\.json$"
)


class MalformedPayload(ValueError):
    """A stored or fetched document does not have the expected shape."""


class ArchiveWriteError(RuntimeError):
    """A snapshot could not be persisted; the cycle must abort."""


def render_timestamp(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime(TIMESTAMP_FMT)


def parse_timestamp(text: str) -> int:
    dt = datetime.strptime(text, TIMESTAMP_FMT).replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def render_date(epoch: float) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime(DATE_FMT)


@dataclass(frozen=True)
class ArchiveLayout:
    """Pure path algebra over one archive root.

    The date partition is the UTC calendar date of each file's timestamp,
    chosen at write time, so a crawl running across midnight starts a fresh
    partition on its own.
    """

    root: Path

    @property
    def saves_dir(self) -> Path:
        return self.root / "saves"

    @property
    def logs_dir(self) -> Path:
        return self.root / "logs"

    def date_dir(self, epoch: float) -> Path:
        return self.saves_dir / render_date(epoch)

    def catalog_path(self, board: str, epoch: float) -> Path:
        validate_board_code(board)
        name = f"{board}{render_timestamp(epoch)}.json"
        return self.date_dir(epoch) / "threads_on_boards" / name

    def thread_path(self, board: str, thread_no: int, epoch: float) -> Path:
        validate_board_code(board)
        validate_thread_no(thread_no)
        name = f"{thread_no}_{render_timestamp(epoch)}.json"
        return self.date_dir(epoch) / "threads" / board / name

    def info_log_path(self, epoch: float) -> Path:
        return self.logs_dir / f"info_log{render_timestamp(epoch)}.log"

    def debug_log_path(self, epoch: float) -> Path:
        return self.logs_dir / f"debug_log{render_timestamp(epoch)}.log"


def write_snapshot(
    path: Path, raw: bytes, *, crash_hook: Callable[[], None] | None = None
) -> None:
    """Atomically persist ``raw`` at ``path`` (temp file + rename).

    A partial file is never visible under the final name: the bytes go to a
    dot-prefixed temp file in the same directory, are fsynced, and only then
    renamed into place.  ``crash_hook`` runs between write and rename; the
    crash-safety tests use it to simulate dying mid-write.
    """
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(
            dir=path.parent, prefix=f".{path.name}.", suffix=".tmp"
        )
        try:
            with os.fdopen(fd, "wb") as handle:
                handle.write(raw)
                handle.flush()
                os.fsync(handle.fileno())
            if crash_hook is not None:
                crash_hook()
            os.replace(tmp_name, path)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except OSError:
                pass
            raise
    except OSError as exc:
        raise ArchiveWriteError(f"cannot persist {path}: {exc}") from exc


class RecoveredSnapshot(NamedTuple):
    timestamp: int
    path: Path


def recover_state(
    layout: ArchiveLayout, now_epoch: float
) -> dict[str, dict[int, RecoveredSnapshot]]:
    """Rebuild per-thread latest-snapshot knowledge from today's partition.

    Walks ``saves/<today>/threads/<board>/`` parsing filenames only — file
    bodies are never read.  Returns the newest snapshot per (board, thread).
    Dot-prefixed entries (stale temp files) are ignored silently; any other
    unparseable name is logged and skipped.
    """
    recovered: dict[str, dict[int, RecoveredSnapshot]] = {}
    threads_dir = layout.date_dir(now_epoch) / "threads"
    if not threads_dir.is_dir():
        return recovered
    try:
        board_dirs = sorted(threads_dir.iterdir())
    except OSError as exc:
        logger.warning("recovery cannot list %s: %s", threads_dir, exc)
        return recovered
    for board_dir in board_dirs:
        if board_dir.name.startswith("."):
            continue
        if not board_dir.is_dir() or not BOARD_CODE_RE.match(board_dir.name):
            logger.warning("recovery skipping unexpected entry %s", board_dir)
            continue
        board = board_dir.name
        try:
            files = sorted(board_dir.iterdir())
        except OSError as exc:
            logger.warning("recovery cannot list %s: %s", board_dir, exc)
            continue
        per_thread = recovered.setdefault(board, {})
        for file in files:
            if file.name.startswith("."):
                continue
            match = THREAD_FILE_RE.match(file.name)
            if not match:
                logger.warning("recovery skipping malformed filename %s", file)
                continue
            thread_no = int(match.group(1))
            timestamp = parse_timestamp(match.group(2))
            known = per_thread.get(thread_no)
            if known is None or timestamp > known.timestamp:
                per_thread[thread_no] = RecoveredSnapshot(timestamp, file)
        if not per_thread:
            recovered.pop(board, None)
    return recovered


@dataclass(frozen=True)
class PostRecord:
    """Parsed view of one post; the verbatim record stays in the raw bytes."""

    post_no: int
    time: int
    poster_name: str
    comment_raw: str
    attached_filename: str | None = None
    attached_ext: str | None = None
    image_props: dict[str, Any] | None = None
    file_props: dict[str, Any] | None = None


_IMAGE_PROP_KEYS = ("w", "h", "tn_w", "tn_h")
_FILE_PROP_KEYS = ("md5", "fsize")


def _parse_post(record: dict[str, Any]) -> PostRecord:
    try:
        post_no = validate_thread_no(record["no"])
    except (KeyError, ValueError) as exc:
        raise MalformedPayload(f"post without usable number: {exc}") from None
    image_props = {k: record[k] for k in _IMAGE_PROP_KEYS if k in record}
    file_props = {k: record[k] for k in _FILE_PROP_KEYS if k in record}
    return PostRecord(
        post_no=post_no,
        time=int(record.get("time", 0)),
        poster_name=str(record.get("name", "")),
        comment_raw=str(record.get("com", "")),
        attached_filename=record.get("filename"),
        attached_ext=record.get("ext"),
        image_props=image_props or None,
        file_props=file_props or None,
    )


@dataclass(frozen=True)
class ThreadSnapshot:
    board: str
    thread_no: int
    fetched_at: float
    raw: bytes
    posts: tuple[PostRecord, ...]


def parse_thread_payload(
    raw: bytes, board: str = "", fetched_at: float = 0.0
) -> ThreadSnapshot:
    """Build the parsed view of a thread document without touching ``raw``.

    Unknown upstream fields stay available through ``raw``; only the fields
    the parsed view names are lifted out.  Raises MalformedPayload when the
    document lacks a non-empty "posts" list.
    """
    if not raw:
        raise MalformedPayload("empty thread payload")
    try:
        document = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedPayload(f"thread payload is not JSON: {exc}") from None
    posts_field = document.get("posts") if isinstance(document, dict) else None
    if not isinstance(posts_field, list) or not posts_field:
        raise MalformedPayload('thread payload lacks a non-empty "posts" list')
    posts = tuple(_parse_post(record) for record in posts_field)
    return ThreadSnapshot(
        board=board,
        thread_no=posts[0].post_no,
        fetched_at=fetched_at,
        raw=raw,
        posts=posts,
    )
