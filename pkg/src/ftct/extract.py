"""Offline utilities over a stored archive: media-link derivation, integrity.

Nothing here touches the network.  Media URLs are derived from the
server-assigned rename token each attachment carries; the original upload
filename is metadata only and never addresses anything.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

from .api import BOARD_CODE_RE, EndpointSet, build_media_url
from .storage import (
    CATALOG_FILE_RE,
    DATE_FMT,
    THREAD_FILE_RE,
    ThreadSnapshot,
    parse_thread_payload,
    parse_timestamp,
)

logger = logging.getLogger(__name__)


def extract_image_links(snapshot: ThreadSnapshot, endpoints: EndpointSet) -> list[str]:
    """Media URLs for every attachment in the snapshot, in post order.

    A post contributes one URL when it carries both a rename token and an
    extension; posts without attachments contribute nothing and half-formed
    attachment fields are skipped with a warning.
    """
    document = json.loads(snapshot.raw)
    links: list[str] = []
    for post in document.get("posts", []):
        token = post.get("tim")
        ext = post.get("ext")
        if token is None and ext is None:
            continue
        if (
            token is None
            or ext is None
            or not isinstance(token, (int, str))
            or not isinstance(ext, str)
            or not ext.startswith(".")
        ):
            logger.warning(
                "post %s has malformed attachment fields (tim=%r ext=%r)",
                post.get("no"), token, ext,
            )
            continue
        links.append(build_media_url(endpoints, snapshot.board, str(token), ext))
    return links


def iter_thread_snapshot_files(root: Path):
    """Yield (date, board, path) for every thread snapshot under ``root``."""
    saves = root / "saves"
    if not saves.is_dir():
        return
    for date_dir in sorted(saves.iterdir()):
        threads_dir = date_dir / "threads"
        if not threads_dir.is_dir():
            continue
        for board_dir in sorted(threads_dir.iterdir()):
            if not board_dir.is_dir():
                continue
            for file in sorted(board_dir.iterdir()):
                if file.is_file() and not file.name.startswith("."):
                    yield date_dir.name, board_dir.name, file


@dataclass
class VerifyReport:
    catalog_files: int = 0
    thread_files: int = 0
    boards: int = 0
    threads: int = 0
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary_lines(self) -> list[str]:
        rows = [
            ("catalog files", self.catalog_files),
            ("thread files", self.thread_files),
            ("boards", self.boards),
            ("threads", self.threads),
            ("violations", len(self.violations)),
        ]
        width = max(len(label) for label, _ in rows)
        lines = [f"{label:<{width}}  {count}" for label, count in rows]
        lines.extend(f"VIOLATION {text}" for text in self.violations)
        return lines


def _check_date_dir_name(name: str) -> bool:
    try:
        datetime.strptime(name, DATE_FMT)
    except ValueError:
        return False
    return True


def verify_archive(root: Path) -> VerifyReport:
    """Check the archive tree against the layout and naming contract.

    Verifies directory naming, snapshot filename grammar, JSON parseability,
    thread/file number agreement, date-partition consistency and strictly
    increasing per-thread snapshot timestamps.
    """
    report = VerifyReport()
    boards_seen: set[str] = set()
    thread_timestamps: dict[tuple[str, int], list[int]] = {}
    saves = root / "saves"
    if not saves.is_dir():
        report.violations.append(f"missing saves directory under {root}")
        return report
    for date_dir in sorted(saves.iterdir()):
        if date_dir.name.startswith("."):
            continue
        if not date_dir.is_dir() or not _check_date_dir_name(date_dir.name):
            report.violations.append(f"unexpected entry {date_dir}")
            continue
        for child in sorted(date_dir.iterdir()):
            if child.name == "threads_on_boards" and child.is_dir():
                _verify_catalog_dir(child, date_dir.name, report)
            elif child.name == "threads" and child.is_dir():
                _verify_threads_dir(
                    child, date_dir.name, report, boards_seen, thread_timestamps
                )
            elif not child.name.startswith("."):
                report.violations.append(f"unexpected entry {child}")
    for (board, thread_no), stamps in sorted(thread_timestamps.items()):
        duplicates = len(stamps) - len(set(stamps))
        if duplicates:
            report.violations.append(
                f"thread /{board}/{thread_no} has {duplicates} duplicate "
                "snapshot timestamps"
            )
    report.boards = len(boards_seen)
    report.threads = len(thread_timestamps)
    return report


def _verify_catalog_dir(directory: Path, date_name: str, report: VerifyReport) -> None:
    for file in sorted(directory.iterdir()):
        if file.name.startswith("."):
            continue
        match = CATALOG_FILE_RE.match(file.name)
        if not file.is_file() or not match:
            report.violations.append(f"bad catalog filename {file}")
            continue
        if not match.group(2).startswith(date_name):
            report.violations.append(
                f"catalog {file} timestamp outside partition {date_name}"
            )
        try:
            json.loads(file.read_bytes())
        except (OSError, ValueError) as exc:
            report.violations.append(f"unreadable catalog {file}: {exc}")
            continue
        report.catalog_files += 1


def _verify_threads_dir(
    directory: Path,
    date_name: str,
    report: VerifyReport,
    boards_seen: set[str],
    thread_timestamps: dict[tuple[str, int], list[int]],
) -> None:
    for board_dir in sorted(directory.iterdir()):
        if board_dir.name.startswith("."):
            continue
        if not board_dir.is_dir() or not BOARD_CODE_RE.match(board_dir.name):
            report.violations.append(f"bad board directory {board_dir}")
            continue
        board = board_dir.name
        boards_seen.add(board)
        for file in sorted(board_dir.iterdir()):
            if file.name.startswith("."):
                continue
            match = THREAD_FILE_RE.match(file.name)
            if not file.is_file() or not match:
                report.violations.append(f"bad thread filename {file}")
                continue
            thread_no = int(match.group(1))
            timestamp_text = match.group(2)
            if not timestamp_text.startswith(date_name):
                report.violations.append(
                    f"thread snapshot {file} timestamp outside partition {date_name}"
                )
            try:
                snapshot = parse_thread_payload(file.read_bytes(), board=board)
            except (OSError, ValueError) as exc:
                report.violations.append(f"unparseable thread snapshot {file}: {exc}")
                continue
            if snapshot.thread_no != thread_no:
                report.violations.append(
                    f"{file} first post is {snapshot.thread_no}, "
                    f"filename says {thread_no}"
                )
            thread_timestamps.setdefault((board, thread_no), []).append(
                parse_timestamp(timestamp_text)
            )
            report.thread_files += 1
