"""Shared fixtures-in-code for the end-to-end and acceptance tests."""

from __future__ import annotations

import hashlib
import random
import threading
from pathlib import Path

from ftct.api import ApiClient, EndpointSet, RequestBudget
from ftct.collector import Collector
from ftct.config import CollectorConfig, SchedulingMode
from ftct.mockboard import BoardEvent, BoardScript, EventKind, MockBoard, VirtualClock

# midday UTC so nothing drifts across a date-partition boundary mid-test
BASE = 1_700_049_600.0  # 2023-11-15 12:00:00Z

ENDPOINTS = EndpointSet()


def static_script(threads_per_board: dict[str, list[int]], at: float = BASE) -> BoardScript:
    """Script where every thread exists from ``at`` and never changes."""
    events = [
        BoardEvent(at, EventKind.CREATE_THREAD, board, no)
        for board, nos in threads_per_board.items()
        for no in nos
    ]
    events.sort(key=lambda event: (event.at, event.board, event.thread_no))
    return BoardScript(list(threads_per_board), events)


def make_collector(
    root: Path,
    mock: MockBoard,
    *,
    boards: tuple[str, ...] = (),
    min_interval_ms: float = 1.0,
    mode: SchedulingMode = SchedulingMode.CATALOG_JUST_IN_TIME,
    refetch_unchanged: bool = False,
    cycle_pause_s: float = 0.0,
    stop: threading.Event | None = None,
    on_snapshot_written=None,
) -> Collector:
    """Collector wired to the mock via the in-process transport."""
    config = CollectorConfig(
        storage_root=root,
        include_boards=boards,
        scheduling_mode=mode,
        cycle_pause_s=cycle_pause_s,
        refetch_unchanged=refetch_unchanged,
        budget=RequestBudget(min_interval_ms=min_interval_ms),
        endpoints=ENDPOINTS,
    )
    stop = stop or threading.Event()
    client = ApiClient(
        config.endpoints,
        config.budget,
        clock=mock.clock,
        stop=stop,
        transport=mock.transport(),
        retry_backoff=(0.01, 0.01, 0.01),
    )
    return Collector(
        config,
        client=client,
        clock=mock.clock,
        stop=stop,
        on_snapshot_written=on_snapshot_written,
    )


def archive_hashes(root: Path) -> set[tuple[str, int, str]]:
    """(board, thread_no, sha256) for every thread snapshot under root."""
    from ftct.extract import iter_thread_snapshot_files
    from ftct.storage import THREAD_FILE_RE

    hashes = set()
    for _date, board, path in iter_thread_snapshot_files(root):
        match = THREAD_FILE_RE.match(path.name)
        assert match, path
        digest = hashlib.sha256(path.read_bytes()).hexdigest()
        hashes.add((board, int(match.group(1)), digest))
    return hashes


def random_script(
    rng: random.Random,
    *,
    max_boards: int = 3,
    max_threads: int = 30,
    max_events: int = 100,
    horizon: int = 4,
) -> BoardScript:
    """Randomized event timeline; content events land on 10-second marks.

    Cycle driving code samples the story at ``BASE + 10*j + 2`` so events
    never race a cycle window.
    """
    n_boards = rng.randint(1, max_boards)
    boards = [f"b{i}" for i in range(n_boards)]
    n_threads = rng.randint(1, max_threads)
    events: list[BoardEvent] = []
    next_no = 100
    threads: list[tuple[str, int, int]] = []  # (board, no, created_mark)
    for _ in range(n_threads):
        board = rng.choice(boards)
        mark = rng.randint(1, horizon)
        threads.append((board, next_no, mark))
        events.append(
            BoardEvent(BASE + 10 * mark, EventKind.CREATE_THREAD, board, next_no)
        )
        next_no += 1
    budget = max_events - len(events)
    for board, no, created_mark in threads:
        if budget <= 0:
            break
        marks = [m for m in range(created_mark + 1, horizon + 1)]
        rng.shuffle(marks)
        pruned_at: int | None = None
        for mark in sorted(marks[: rng.randint(0, min(2, len(marks)))]):
            if budget <= 0:
                break
            if pruned_at is not None:
                break
            if rng.random() < 0.25:
                kind = rng.choice([EventKind.PRUNE, EventKind.DELETE])
                pruned_at = mark
            else:
                kind = EventKind.ADD_POST
            events.append(BoardEvent(BASE + 10 * mark, kind, board, no))
            budget -= 1
    events.sort(key=lambda event: (event.at, event.board, event.thread_no))
    return BoardScript(boards, events)


def drive_cycles(
    collector: Collector,
    clock: VirtualClock,
    cycles: range,
) -> None:
    """Run the given cycle indices at their fixed virtual sample points."""
    for j in cycles:
        clock.advance_to(BASE + 10 * j + 2)
        collector.run_cycle()
