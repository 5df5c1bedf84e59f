"""Main crawl loop: board selection, recovery, catalog diffing, collection.

One cycle per board: fetch the catalog, persist it verbatim, diff it against
the tracker, give disappearing threads one last fetch, then collect new and
changed threads.  A single pipeline issues all requests; there is no
per-board parallelism.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .api import (
    ApiClient,
    BoardListUnavailable,
    FetchKind,
    FetchOutcome,
    ShutdownRequested,
)
from .clocks import Clock, SystemClock
from .config import CollectorConfig, SchedulingMode
from .lifecycle import (
    CatalogSnapshot,
    SnapshotMeta,
    ThreadDelta,
    ThreadState,
    ThreadTrackerEntry,
    apply_delta,
    diff_catalog,
    mark_dead,
    parse_catalog_payload,
    record_snapshot,
)
from .storage import (
    ArchiveLayout,
    MalformedPayload,
    RecoveredSnapshot,
    recover_state,
    write_snapshot,
)

logger = logging.getLogger(__name__)

TrackerMap = dict[str, dict[int, ThreadTrackerEntry]]


class EmptySelectionError(Exception):
    """Board selection produced nothing to monitor."""


class UnknownBoardsError(Exception):
    """Strict mode: an included board is not advertised upstream."""


def resolve_boards(
    available: Iterable[str],
    include: Iterable[str] = (),
    exclude: Iterable[str] = (),
) -> list[str]:
    """Pick the monitored boards.

    A non-empty include list wins (in its own order, unknown entries dropped
    with a warning); otherwise all available boards minus the excludes, in
    lexicographic order.
    """
    available_set = set(available)
    include = list(include)
    if include:
        selected = []
        for board in include:
            if board in available_set:
                selected.append(board)
            else:
                logger.warning("ignoring unknown board %r", board)
    else:
        exclude_set = set(exclude)
        for board in exclude_set - available_set:
            logger.warning("exclude list names unknown board %r", board)
        selected = sorted(available_set - exclude_set)
    if not selected:
        raise EmptySelectionError("no boards left to monitor")
    return selected


def seed_from_recovery(
    recovered: dict[str, dict[int, RecoveredSnapshot]],
) -> TrackerMap:
    """Turn recovered snapshot knowledge into Live tracker entries.

    The filename timestamp doubles as the known modification time, so the
    first cycle after a restart refetches a thread only if the catalog says
    it moved past what is already on disk.
    """
    trackers: TrackerMap = {}
    for board, threads in recovered.items():
        per_board = trackers.setdefault(board, {})
        for thread_no, snapshot in threads.items():
            per_board[thread_no] = ThreadTrackerEntry(
                board=board,
                thread_no=thread_no,
                state=ThreadState.LIVE,
                known_last_modified=snapshot.timestamp,
                validator=None,
                last_snapshot_at=float(snapshot.timestamp),
                snapshot_count=1,
            )
    return trackers


@dataclass
class BoardCycleStats:
    new: int = 0
    live: int = 0
    dead: int = 0
    changed: int = 0
    snapshots: int = 0


@dataclass
class CycleReport:
    index: int
    started_at: float
    wall_seconds: float = 0.0
    requests_issued: int = 0
    catalogs_written: int = 0
    snapshots_written: int = 0
    errors: int = 0
    boards: dict[str, BoardCycleStats] = field(default_factory=dict)

    def log_line(self) -> str:
        parts = [
            f"cycle={self.index}",
            f"requests={self.requests_issued}",
            f"catalogs={self.catalogs_written}",
            f"snapshots={self.snapshots_written}",
            f"errors={self.errors}",
            f"wall_s={self.wall_seconds:.3f}",
        ]
        for board in sorted(self.boards):
            stats = self.boards[board]
            parts.append(
                f"{board}.new={stats.new} {board}.live={stats.live} "
                f"{board}.dead={stats.dead} {board}.changed={stats.changed} "
                f"{board}.snapshots={stats.snapshots}"
            )
        return " ".join(parts)


class Collector:
    """Owns the tracker state and drives cycles until told to stop."""

    def __init__(
        self,
        config: CollectorConfig,
        *,
        client: ApiClient | None = None,
        clock: Clock | None = None,
        stop: threading.Event | None = None,
        on_snapshot_written: Callable[[str, int], None] | None = None,
    ) -> None:
        self.config = config
        self.clock = clock or SystemClock()
        self.stop = stop or threading.Event()
        self.client = client or ApiClient(
            config.endpoints,
            config.budget,
            user_agent=config.user_agent,
            clock=self.clock,
            stop=self.stop,
        )
        self.layout = ArchiveLayout(config.storage_root)
        self.boards: list[str] = []
        self.trackers: TrackerMap = {}
        self.cycles_completed = 0
        self._on_snapshot_written = on_snapshot_written

    def startup(self) -> None:
        """Resolve boards, then rebuild tracker state from today's archive."""
        include = self.config.include_boards
        try:
            available = set(self.client.fetch_board_list())
        except BoardListUnavailable:
            if not include:
                raise
            logger.warning(
                "board discovery unavailable, falling back to include list"
            )
            available = set(include)
        if self.config.strict:
            unknown = sorted(set(include) - available)
            if unknown:
                raise UnknownBoardsError(f"unknown boards: {', '.join(unknown)}")
        self.boards = resolve_boards(available, include, self.config.exclude_boards)
        recovered = recover_state(self.layout, self.clock.time())
        self.trackers = seed_from_recovery(
            {board: threads for board, threads in recovered.items()
             if board in set(self.boards)}
        )
        recovered_count = sum(len(v) for v in self.trackers.values())
        logger.info(
            "startup boards=%s recovered_threads=%d root=%s",
            ",".join(self.boards), recovered_count, self.config.storage_root,
        )

    def run(self, max_cycles: int | None = None) -> int:
        """Loop run_cycle with the configured pause; returns cycles done.

        Stops cleanly on the stop event or a shutdown raised while waiting
        for a request permit; the in-flight request is never cut short.
        """
        try:
            self.startup()
            while not self.stop.is_set():
                report = self.run_cycle()
                logger.info(report.log_line())
                self.cycles_completed += 1
                if max_cycles is not None and self.cycles_completed >= max_cycles:
                    break
                if self.stop.is_set():
                    break
                self.clock.sleep(self.config.cycle_pause_s, interrupt=self.stop)
        except ShutdownRequested:
            logger.info("shutdown requested, cycle abandoned cleanly")
        logger.info("collector stopped after %d cycles", self.cycles_completed)
        return self.cycles_completed

    def run_cycle(self) -> CycleReport:
        started_mono = self.clock.monotonic()
        report = CycleReport(
            index=self.cycles_completed + 1, started_at=self.clock.time()
        )
        requests_before = self.client.request_count
        boards = list(self.boards)
        catalogs: dict[str, CatalogSnapshot] = {}
        if self.config.scheduling_mode is SchedulingMode.CATALOGS_UPFRONT:
            for board in boards:
                snapshot = self._collect_catalog(board, report)
                if snapshot is not None:
                    catalogs[board] = snapshot
        for board in boards:
            if self.config.scheduling_mode is SchedulingMode.CATALOGS_UPFRONT:
                snapshot = catalogs.get(board)
            else:
                snapshot = self._collect_catalog(board, report)
            if snapshot is None:
                continue
            self._collect_threads(board, snapshot, report)
        report.requests_issued = self.client.request_count - requests_before
        report.wall_seconds = self.clock.monotonic() - started_mono
        return report

    def _collect_catalog(self, board: str, report: CycleReport) -> CatalogSnapshot | None:
        outcome = self.client.fetch_catalog(board)
        if outcome.kind is FetchKind.GONE:
            logger.error("board /%s/ does not exist, dropping it", board)
            if board in self.boards:
                self.boards.remove(board)
            report.errors += 1
            return None
        if outcome.kind is FetchKind.TRANSIENT_ERROR:
            logger.warning("catalog fetch for /%s/ failed, skipping board", board)
            report.errors += 1
            return None
        assert outcome.body is not None
        write_snapshot(
            self.layout.catalog_path(board, outcome.fetched_at), outcome.body
        )
        report.catalogs_written += 1
        try:
            return parse_catalog_payload(board, outcome.body, outcome.fetched_at)
        except MalformedPayload as exc:
            logger.error("catalog for /%s/ unusable: %s", board, exc)
            report.errors += 1
            return None

    def _collect_threads(
        self, board: str, snapshot: CatalogSnapshot, report: CycleReport
    ) -> None:
        tracked = self.trackers.setdefault(board, {})
        delta = diff_catalog(tracked, snapshot)
        stats = report.boards.setdefault(board, BoardCycleStats())
        stats.new += len(delta.new)
        stats.live += len(delta.live)
        stats.changed += len(delta.changed)

        confirmed_dead = self._final_fetch_dying(board, tracked, delta, report, stats)
        stats.dead += len(confirmed_dead)
        previous_lm = {
            no: tracked[no].known_last_modified for no in delta.changed
        }
        apply_delta(tracked, delta.replace_dead(confirmed_dead), self.clock.time())

        to_fetch = {
            no
            for no in (delta.new | delta.live)
            if tracked[no].state is ThreadState.NEW
        }
        to_fetch |= set(delta.changed)
        if self.config.refetch_unchanged:
            to_fetch |= set(delta.live)
        for thread_no in sorted(to_fetch):
            entry = tracked[thread_no]
            outcome = self.client.fetch_thread(board, thread_no, entry.validator)
            if outcome.kind is FetchKind.PAYLOAD:
                self._persist_thread(board, thread_no, outcome)
                record_snapshot(
                    entry, SnapshotMeta(outcome.fetched_at, outcome.last_modified)
                )
                stats.snapshots += 1
                report.snapshots_written += 1
            elif outcome.kind is FetchKind.NOT_MODIFIED:
                logger.debug("thread /%s/%d unchanged upstream", board, thread_no)
            elif outcome.kind is FetchKind.GONE:
                # pruned between catalog and fetch
                logger.info("thread /%s/%d vanished before fetch", board, thread_no)
                mark_dead(entry)
                stats.dead += 1
            else:
                report.errors += 1
                if thread_no in previous_lm:
                    # roll the tracked time back so the next cycle retries
                    entry.known_last_modified = previous_lm[thread_no]

    def _final_fetch_dying(
        self,
        board: str,
        tracked: dict[int, ThreadTrackerEntry],
        delta: ThreadDelta,
        report: CycleReport,
        stats: BoardCycleStats,
    ) -> frozenset[int]:
        """One last fetch for threads that left the catalog.

        Payload yields a terminal snapshot; Gone and NotModified both
        confirm death.  A transient failure leaves the thread tracked so the
        next cycle repeats the attempt.
        """
        confirmed: set[int] = set()
        for thread_no in sorted(delta.dead):
            entry = tracked[thread_no]
            outcome = self.client.fetch_thread(board, thread_no, entry.validator)
            if outcome.kind is FetchKind.PAYLOAD:
                self._persist_thread(board, thread_no, outcome)
                record_snapshot(
                    entry, SnapshotMeta(outcome.fetched_at, outcome.last_modified)
                )
                stats.snapshots += 1
                report.snapshots_written += 1
                confirmed.add(thread_no)
            elif outcome.kind in (FetchKind.GONE, FetchKind.NOT_MODIFIED):
                confirmed.add(thread_no)
            else:
                report.errors += 1
        return frozenset(confirmed)

    def _persist_thread(self, board: str, thread_no: int, outcome: FetchOutcome) -> None:
        assert outcome.body is not None
        path = self.layout.thread_path(board, thread_no, outcome.fetched_at)
        write_snapshot(path, outcome.body)
        if self._on_snapshot_written is not None:
            self._on_snapshot_written(board, thread_no)
