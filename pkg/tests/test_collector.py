"""Cycle orchestration: diff handling, dying threads, recovery, shutdown."""

from __future__ import annotations

import json
import threading

import httpx
import pytest

from ftct.api import ApiClient, EndpointSet, FetchKind, FetchOutcome, RequestBudget
from ftct.collector import (
    Collector,
    EmptySelectionError,
    UnknownBoardsError,
    resolve_boards,
    seed_from_recovery,
)
from ftct.config import CollectorConfig, SchedulingMode
from ftct.lifecycle import ThreadState
from ftct.mockboard import BoardEvent, BoardScript, EventKind, MockBoard, VirtualClock
from ftct.storage import ArchiveWriteError, RecoveredSnapshot

from helpers import BASE, archive_hashes, drive_cycles, make_collector


class TestResolveBoards:
    def test_whole_site_sorted(self):
        assert resolve_boards({"a", "b", "pol"}) == ["a", "b", "pol"]

    def test_include_keeps_given_order(self):
        assert resolve_boards({"a", "b", "pol"}, include=["pol"]) == ["pol"]
        assert resolve_boards({"a", "b", "pol"}, include=["pol", "a"]) == ["pol", "a"]

    def test_exclude_mode(self):
        assert resolve_boards({"a", "b", "pol"}, exclude=["b"]) == ["a", "pol"]

    def test_unknown_include_dropped_with_warning(self, caplog_ftct):
        assert resolve_boards({"a"}, include=["a", "zz"]) == ["a"]
        assert any("zz" in record.message for record in caplog_ftct.records)

    def test_empty_selection_raises(self):
        with pytest.raises(EmptySelectionError):
            resolve_boards({"a"}, include=["zz"])
        with pytest.raises(EmptySelectionError):
            resolve_boards({"a"}, exclude=["a"])


class TestSeedFromRecovery:
    def test_entries_become_live(self, tmp_path):
        recovered = {
            "b": {7: RecoveredSnapshot(1000, tmp_path / "7_x.json")},
        }
        trackers = seed_from_recovery(recovered)
        entry = trackers["b"][7]
        assert entry.state is ThreadState.LIVE
        assert entry.known_last_modified == 1000
        assert entry.last_snapshot_at == 1000.0
        assert entry.snapshot_count == 1
        assert entry.validator is None

    def test_empty_map_is_cold_start(self):
        assert seed_from_recovery({}) == {}


def two_board_script() -> BoardScript:
    return BoardScript(
        ["a", "b"],
        [
            BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
            BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 102),
            BoardEvent(BASE, EventKind.CREATE_THREAD, "b", 201),
        ],
    )


class TestRunCycle:
    def test_cold_start_captures_everything(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        report = collector.run_cycle()
        assert report.snapshots_written == 3
        assert report.catalogs_written == 2
        assert report.boards["a"].new == 2
        assert report.boards["b"].new == 1
        assert len(archive_hashes(tmp_path)) == 3
        assert collector.trackers["a"][101].state is ThreadState.LIVE

    def test_static_board_second_cycle_writes_nothing(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        collector.run_cycle()
        mock.clock.advance(10)
        report = collector.run_cycle()
        assert report.snapshots_written == 0
        assert report.catalogs_written == 2  # catalogs renew every cycle
        thread_requests = [r for r in mock.request_log if "/thread/" in r.path]
        assert len(thread_requests) == 3  # only the first cycle fetched threads

    def test_bumped_thread_refetched_once(self, tmp_path):
        script = BoardScript(
            ["a"],
            [
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 102),
                BoardEvent(BASE + 10, EventKind.ADD_POST, "a", 101),
            ],
        )
        mock = MockBoard(script, VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        collector.run_cycle()
        mock.clock.advance_to(BASE + 12)
        report = collector.run_cycle()
        assert report.boards["a"].changed == 1
        assert report.snapshots_written == 1
        hashes = archive_hashes(tmp_path)
        assert sum(1 for (_b, no, _h) in hashes if no == 101) == 2
        assert sum(1 for (_b, no, _h) in hashes if no == 102) == 1

    def test_pruned_thread_gets_final_fetch_then_dead(self, tmp_path):
        script = BoardScript(
            ["a"],
            [
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 102),
                BoardEvent(BASE + 10, EventKind.PRUNE, "a", 101),
            ],
        )
        mock = MockBoard(script, VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        collector.run_cycle()
        files_before = len(archive_hashes(tmp_path))
        mock.clock.advance_to(BASE + 12)
        report = collector.run_cycle()
        assert collector.trackers["a"][101].state is ThreadState.DEAD
        assert report.boards["a"].dead == 1
        assert len(archive_hashes(tmp_path)) == files_before  # gone, nothing written
        final = [r for r in mock.request_log if r.path == "/a/thread/101.json"]
        assert [r.status for r in final] == [200, 404]
        # dead threads are never fetched again
        mock.clock.advance_to(BASE + 22)
        collector.run_cycle()
        final = [r for r in mock.request_log if r.path == "/a/thread/101.json"]
        assert [r.status for r in final] == [200, 404]

    def test_catalog_files_renewed_each_cycle(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock, boards=("a",))
        collector.startup()
        collector.run_cycle()
        mock.clock.advance(10)
        collector.run_cycle()
        catalog_dir = tmp_path / "saves" / "2023-11-15" / "threads_on_boards"
        assert len(list(catalog_dir.iterdir())) == 2

    def test_refetch_unchanged_requests_but_304_prevents_writes(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock, refetch_unchanged=True)
        collector.startup()
        collector.run_cycle()
        mock.clock.advance(10)
        report = collector.run_cycle()
        thread_hits = [
            r for r in mock.request_log if "/thread/" in r.path
        ]
        assert len(thread_hits) == 6  # 3 on each cycle
        assert {r.status for r in thread_hits[3:]} == {304}
        assert report.snapshots_written == 0

    def test_budget_accounting_invariant(self, tmp_path):
        script = BoardScript(
            ["a"],
            [
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
                BoardEvent(BASE + 10, EventKind.CREATE_THREAD, "a", 102),
                BoardEvent(BASE + 20, EventKind.ADD_POST, "a", 101),
                BoardEvent(BASE + 30, EventKind.PRUNE, "a", 102),
            ],
        )
        mock = MockBoard(script, VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        for j in range(1, 5):
            mock.clock.advance_to(BASE + 10 * j + 2)
            report = collector.run_cycle()
            stats = report.boards.get("a")
            assert stats is not None
            bound = (
                len(collector.boards)
                + stats.new
                + stats.changed
                + stats.dead
            )
            assert report.requests_issued <= bound
            assert report.snapshots_written <= report.requests_issued

    def test_every_exposed_version_is_captured(self, tmp_path):
        # each bump creates a version that stays visible for a full cycle
        # duration; all of them must land in the archive at least once
        script = BoardScript(
            ["a"],
            [
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
                BoardEvent(BASE + 20, EventKind.ADD_POST, "a", 101),
                BoardEvent(BASE + 30, EventKind.ADD_POST, "a", 101),
            ],
        )
        mock = MockBoard(script, VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        drive_cycles(collector, mock.clock, range(1, 5))
        hashes = archive_hashes(tmp_path)
        assert len({h for (_b, no, h) in hashes if no == 101}) == 3
        latest = max(tmp_path.glob("saves/*/threads/a/101_*.json"))
        assert len(json.loads(latest.read_bytes())["posts"]) == 3

    def test_no_requests_to_media_host(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        for j in range(1, 4):
            mock.clock.advance_to(BASE + 10 * j + 2)
            collector.run_cycle()
        assert {r.host for r in mock.request_log} == {"a.4cdn.org"}

    def test_upfront_and_jit_capture_identical_content(self, tmp_path):
        for mode, sub in (
            (SchedulingMode.CATALOGS_UPFRONT, "up"),
            (SchedulingMode.CATALOG_JUST_IN_TIME, "jit"),
        ):
            mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
            collector = make_collector(tmp_path / sub, mock, mode=mode)
            collector.startup()
            drive_cycles(collector, mock.clock, range(1, 4))
        assert archive_hashes(tmp_path / "up") == archive_hashes(tmp_path / "jit")

    def test_upfront_fetches_all_catalogs_first(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(
            tmp_path, mock, mode=SchedulingMode.CATALOGS_UPFRONT
        )
        collector.startup()
        collector.run_cycle()
        paths = [r.path for r in mock.request_log if r.path != "/boards.json"]
        assert paths[:2] == ["/a/threads.json", "/b/threads.json"]

    def test_vanished_board_dropped_from_rotation(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock, boards=("a", "zz"))
        collector.startup()
        # startup warns about zz; force it back in to simulate a board
        # that existed at discovery and 404s later
        collector.boards = ["a", "zz"]
        report = collector.run_cycle()
        assert report.errors == 1
        assert collector.boards == ["a"]


class _PathFlaky(httpx.BaseTransport):
    """Every request to ``path`` fails while armed; everything else passes."""

    def __init__(self, inner: httpx.BaseTransport, path: str):
        self.inner = inner
        self.path = path
        self.armed = True

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        if self.armed and request.url.path == self.path:
            return httpx.Response(500, content=b"flaky")
        return self.inner.handle_request(request)


def _collector_with_transport(tmp_path, mock, transport, **kwargs):
    config = CollectorConfig(
        storage_root=tmp_path,
        budget=RequestBudget(min_interval_ms=1),
        endpoints=EndpointSet(),
        **kwargs,
    )
    client = ApiClient(
        config.endpoints,
        config.budget,
        clock=mock.clock,
        transport=transport,
        retry_backoff=(0.01, 0.01, 0.01),
    )
    return Collector(config, client=client, clock=mock.clock)


class TestFailureContainment:
    def test_catalog_failure_skips_board_but_not_cycle(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        flaky = _PathFlaky(mock.transport(), "/a/threads.json")
        collector = _collector_with_transport(tmp_path, mock, flaky)
        collector.startup()
        report = collector.run_cycle()
        assert report.errors == 1
        assert report.boards.keys() == {"b"}
        assert report.snapshots_written == 1
        # next cycle the board recovers
        flaky.armed = False
        mock.clock.advance(10)
        report = collector.run_cycle()
        assert report.boards["a"].new == 2

    def test_transient_thread_fetch_retried_next_cycle(self, tmp_path):
        script = BoardScript(
            ["a"],
            [
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
                BoardEvent(BASE + 10, EventKind.ADD_POST, "a", 101),
            ],
        )
        mock = MockBoard(script, VirtualClock(BASE + 2))
        flaky = _PathFlaky(mock.transport(), "/a/thread/101.json")
        collector = _collector_with_transport(tmp_path, mock, flaky)
        collector.startup()
        flaky.armed = False
        collector.run_cycle()  # snapshot 1 captured
        flaky.armed = True
        mock.clock.advance_to(BASE + 12)
        report = collector.run_cycle()  # bump seen but fetch fails
        assert report.errors == 1
        assert report.snapshots_written == 0
        flaky.armed = False
        mock.clock.advance_to(BASE + 22)
        report = collector.run_cycle()  # retried because lm was rolled back
        assert report.snapshots_written == 1

    def test_storage_failure_aborts_cycle(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock)
        collector.startup()
        (tmp_path / "saves").write_bytes(b"not a directory")
        with pytest.raises(ArchiveWriteError):
            collector.run_cycle()


class _FakeClient:
    """Scripted FetchOutcome sequences keyed by (board, thread_no)."""

    def __init__(self, catalogs, threads):
        self.catalogs = catalogs  # board -> list of catalog payload bytes
        self.threads = threads  # (board, no) -> list of FetchOutcome
        self.request_count = 0

    def fetch_board_list(self):
        return {board: {} for board in self.catalogs}

    def fetch_catalog(self, board):
        self.request_count += 1
        body = self.catalogs[board].pop(0)
        return FetchOutcome(FetchKind.PAYLOAD, BASE + self.request_count, body=body)

    def fetch_thread(self, board, thread_no, validator=None):
        self.request_count += 1
        outcome = self.threads[(board, thread_no)].pop(0)
        return outcome


def _catalog_bytes(entries):
    return json.dumps(
        [{"page": 1, "threads": [{"no": no, "last_modified": lm} for no, lm in entries]}]
    ).encode()


def _payload(no, fetched_at, text="terminal"):
    body = json.dumps({"posts": [{"no": no, "time": 1, "com": text}]}).encode()
    return FetchOutcome(FetchKind.PAYLOAD, fetched_at, body=body, last_modified="v2")


class TestDyingThreadOutcomes:
    def _collector(self, tmp_path, client):
        config = CollectorConfig(
            storage_root=tmp_path, budget=RequestBudget(min_interval_ms=1)
        )
        return Collector(config, client=client, clock=VirtualClock(BASE + 2))

    def test_payload_yields_terminal_snapshot_then_dead(self, tmp_path):
        client = _FakeClient(
            catalogs={"a": [_catalog_bytes([(101, 5)]), _catalog_bytes([])]},
            threads={("a", 101): [_payload(101, BASE + 2), _payload(101, BASE + 13)]},
        )
        collector = self._collector(tmp_path, client)
        collector.startup()
        collector.run_cycle()
        report = collector.run_cycle()
        assert collector.trackers["a"][101].state is ThreadState.DEAD
        assert report.snapshots_written == 1  # the terminal capture
        assert collector.trackers["a"][101].snapshot_count == 2

    def test_not_modified_confirms_death_without_write(self, tmp_path):
        not_modified = FetchOutcome(FetchKind.NOT_MODIFIED, BASE + 13)
        client = _FakeClient(
            catalogs={"a": [_catalog_bytes([(101, 5)]), _catalog_bytes([])]},
            threads={("a", 101): [_payload(101, BASE + 2), not_modified]},
        )
        collector = self._collector(tmp_path, client)
        collector.startup()
        collector.run_cycle()
        report = collector.run_cycle()
        assert collector.trackers["a"][101].state is ThreadState.DEAD
        assert report.snapshots_written == 0

    def test_transient_keeps_thread_pending(self, tmp_path):
        transient = FetchOutcome(FetchKind.TRANSIENT_ERROR, BASE + 13)
        client = _FakeClient(
            catalogs={
                "a": [
                    _catalog_bytes([(101, 5)]),
                    _catalog_bytes([]),
                    _catalog_bytes([]),
                ]
            },
            threads={
                ("a", 101): [
                    _payload(101, BASE + 2),
                    transient,
                    FetchOutcome(FetchKind.GONE, BASE + 23),
                ]
            },
        )
        collector = self._collector(tmp_path, client)
        collector.startup()
        collector.run_cycle()
        collector.run_cycle()  # transient: still live, no state change
        assert collector.trackers["a"][101].state is ThreadState.LIVE
        collector.run_cycle()  # gone now: dead
        assert collector.trackers["a"][101].state is ThreadState.DEAD


class TestRecoveryEndToEnd:
    def test_restart_refetches_only_moved_threads(self, tmp_path):
        script = BoardScript(
            ["a"],
            [
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 102),
                BoardEvent(BASE + 20, EventKind.ADD_POST, "a", 101),
            ],
        )
        clock = VirtualClock(BASE + 2)
        mock = MockBoard(script, clock)
        first = make_collector(tmp_path, mock)
        first.startup()
        drive_cycles(first, clock, range(1, 2))  # one cycle at BASE+12
        assert len(archive_hashes(tmp_path)) == 2

        clock.advance_to(BASE + 22)  # the bump landed at BASE+20
        second = make_collector(tmp_path, mock)
        second.startup()
        assert second.trackers["a"][101].state is ThreadState.LIVE
        before = {r.path for r in mock.request_log}
        report = second.run_cycle()
        assert report.snapshots_written == 1  # only the bumped thread
        hashes = archive_hashes(tmp_path)
        assert sum(1 for (_b, no, _h) in hashes if no == 101) == 2
        assert sum(1 for (_b, no, _h) in hashes if no == 102) == 1

    def test_mid_cycle_crash_then_restart_matches_uninterrupted(self, tmp_path):
        script = BoardScript(
            ["a"],
            [
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 101),
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 102),
                BoardEvent(BASE, EventKind.CREATE_THREAD, "a", 103),
                BoardEvent(BASE + 20, EventKind.ADD_POST, "a", 102),
            ],
        )

        def run_to_completion(root, crash_mid_cycle: bool):
            clock = VirtualClock(BASE + 2)
            mock = MockBoard(script, clock)

            class Crash(Exception):
                pass

            writes = []

            def maybe_crash(board, thread_no):
                writes.append(thread_no)
                if crash_mid_cycle and len(writes) == 2:
                    raise Crash

            collector = make_collector(root, mock, on_snapshot_written=maybe_crash)
            collector.startup()
            for j in range(1, 4):
                clock.advance_to(BASE + 10 * j + 2)
                try:
                    collector.run_cycle()
                except Crash:
                    collector = make_collector(root, mock)
                    collector.startup()
                    collector.run_cycle()
            return archive_hashes(root)

        clean = run_to_completion(tmp_path / "clean", crash_mid_cycle=False)
        crashed = run_to_completion(tmp_path / "crashed", crash_mid_cycle=True)
        assert clean == crashed


class TestRunLoop:
    def test_max_cycles_stops_loop(self, tmp_path, caplog_ftct):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        collector = make_collector(tmp_path, mock, cycle_pause_s=10.0)
        cycles = collector.run(max_cycles=3)
        assert cycles == 3
        lines = [r.message for r in caplog_ftct.records if r.message.startswith("cycle=")]
        assert len(lines) == 3
        assert "requests=" in lines[0] and "snapshots=" in lines[0]

    def test_stop_mid_cycle_finishes_in_flight_work_only(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        stop = threading.Event()
        seen = []

        def stop_after_first(board, thread_no):
            seen.append(thread_no)
            stop.set()

        collector = make_collector(
            tmp_path, mock, stop=stop, on_snapshot_written=stop_after_first
        )
        cycles = collector.run()  # returns instead of raising
        assert cycles == 0  # the interrupted cycle does not count
        assert len(seen) == 1  # in-flight snapshot completed, rest abandoned
        assert len(archive_hashes(tmp_path)) == 1

    def test_preset_stop_shuts_down_cleanly(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        stop = threading.Event()
        stop.set()
        collector = make_collector(tmp_path, mock, stop=stop)
        assert collector.run() == 0

    def test_strict_mode_rejects_unknown_boards(self, tmp_path):
        mock = MockBoard(two_board_script(), VirtualClock(BASE + 2))
        config = CollectorConfig(
            storage_root=tmp_path,
            include_boards=("a", "zz"),
            strict=True,
            budget=RequestBudget(min_interval_ms=1),
        )
        client = ApiClient(
            config.endpoints,
            config.budget,
            clock=mock.clock,
            transport=mock.transport(),
        )
        collector = Collector(config, client=client, clock=mock.clock)
        with pytest.raises(UnknownBoardsError):
            collector.startup()
