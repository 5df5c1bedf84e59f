"""Per-thread lifecycle tracking: catalog diffing and state transitions.

Pure functions over an owner-held tracker map.  The only legal state traces
are New, New Live..., New Live... Dead and New Dead; Dead is terminal.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

from .api import validate_board_code, validate_thread_no
from .storage import MalformedPayload


class MixedBoardError(ValueError):
    """Tracker and catalog refer to different boards."""


class IllegalTransition(RuntimeError):
    """Attempted state change that the lifecycle machine forbids."""


class ThreadState(enum.Enum):
    NEW = "new"
    LIVE = "live"
    DEAD = "dead"


@dataclass(frozen=True)
class CatalogEntry:
    thread_no: int
    last_modified: int
    page: int = 1


@dataclass(frozen=True)
class CatalogSnapshot:
    """One parsed fetch of a board's thread listing plus the verbatim bytes."""

    board: str
    fetched_at: float
    entries: tuple[CatalogEntry, ...]
    raw: bytes

    def thread_numbers(self) -> frozenset[int]:
        return frozenset(entry.thread_no for entry in self.entries)

    def last_modified_map(self) -> dict[int, int]:
        return {entry.thread_no: entry.last_modified for entry in self.entries}


def parse_catalog_payload(board: str, raw: bytes, fetched_at: float) -> CatalogSnapshot:
    """Parse a threads-listing document (list of pages of thread stubs)."""
    validate_board_code(board)
    try:
        pages = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedPayload(f"catalog for /{board}/ is not JSON: {exc}") from None
    if not isinstance(pages, list):
        raise MalformedPayload(f"catalog for /{board}/ is not a list of pages")
    entries: list[CatalogEntry] = []
    seen: set[int] = set()
    for index, page in enumerate(pages):
        if not isinstance(page, dict) or not isinstance(page.get("threads"), list):
            raise MalformedPayload(f"catalog page {index} for /{board}/ malformed")
        page_no = page.get("page", index + 1)
        for stub in page["threads"]:
            try:
                thread_no = validate_thread_no(stub["no"])
                last_modified = int(stub["last_modified"])
            except (TypeError, KeyError, ValueError) as exc:
                raise MalformedPayload(
                    f"catalog stub for /{board}/ malformed: {exc}"
                ) from None
            if thread_no in seen:
                raise MalformedPayload(
                    f"duplicate thread {thread_no} in /{board}/ catalog"
                )
            seen.add(thread_no)
            entries.append(CatalogEntry(thread_no, last_modified, page_no))
    return CatalogSnapshot(board, fetched_at, tuple(entries), raw)


@dataclass
class ThreadTrackerEntry:
    board: str
    thread_no: int
    state: ThreadState = ThreadState.NEW
    known_last_modified: int = 0
    validator: str | None = None
    last_snapshot_at: float | None = None
    snapshot_count: int = 0


@dataclass(frozen=True)
class ThreadDelta:
    """Outcome of diffing one catalog against the tracker.

    ``new``, ``live`` and ``dead`` are pairwise disjoint; ``new | live``
    covers the catalog and ``dead`` only ever references tracked non-Dead
    threads.  ``catalog_last_modified`` carries the catalog's modification
    times so the delta alone suffices to apply the update.
    """

    board: str
    new: frozenset[int]
    live: frozenset[int]
    dead: frozenset[int]
    changed: frozenset[int]
    catalog_last_modified: dict[int, int] = field(compare=False)

    def replace_dead(self, confirmed: frozenset[int]) -> "ThreadDelta":
        """Narrow the dead set to threads whose death was confirmed."""
        if not confirmed <= self.dead:
            raise ValueError("confirmed dead set must be a subset of delta.dead")
        return ThreadDelta(
            self.board, self.new, self.live, confirmed, self.changed,
            self.catalog_last_modified,
        )


def diff_catalog(
    tracked: dict[int, ThreadTrackerEntry], current: CatalogSnapshot
) -> ThreadDelta:
    """Classify the catalog's threads against the tracker.

    new: in the catalog, never tracked.  live: in both (non-Dead).  dead:
    tracked non-Dead but gone from the catalog.  changed: live threads whose
    catalog time moved strictly past the tracked one.
    """
    for entry in tracked.values():
        if entry.board != current.board:
            raise MixedBoardError(
                f"tracker holds /{entry.board}/ but catalog is /{current.board}/"
            )
    catalog_nos = current.thread_numbers()
    lm = current.last_modified_map()
    tracked_alive = {
        no for no, entry in tracked.items() if entry.state is not ThreadState.DEAD
    }
    new = frozenset(catalog_nos - tracked.keys())
    live = frozenset(catalog_nos & tracked_alive)
    dead = frozenset(tracked_alive - catalog_nos)
    changed = frozenset(
        no for no in live if lm[no] > tracked[no].known_last_modified
    )
    return ThreadDelta(current.board, new, live, dead, changed, lm)


def apply_delta(
    tracked: dict[int, ThreadTrackerEntry], delta: ThreadDelta, now: float
) -> dict[int, ThreadTrackerEntry]:
    """Fold a delta into the tracker map (mutated in place and returned).

    New threads are inserted as New; they become Live only once a snapshot
    is recorded.  Dead threads transition terminally.  Known modification
    times follow the catalog for surviving threads.
    """
    for no in delta.live:
        entry = tracked[no]
        if entry.state is ThreadState.DEAD:
            raise IllegalTransition(f"thread {no} is Dead but delta lists it live")
        entry.known_last_modified = delta.catalog_last_modified[no]
    for no in delta.new:
        tracked[no] = ThreadTrackerEntry(
            board=delta.board,
            thread_no=no,
            state=ThreadState.NEW,
            known_last_modified=delta.catalog_last_modified[no],
        )
    for no in delta.dead:
        mark_dead(tracked[no])
    return tracked


def mark_dead(entry: ThreadTrackerEntry) -> ThreadTrackerEntry:
    if entry.state is ThreadState.DEAD:
        raise IllegalTransition(f"thread {entry.thread_no} is already Dead")
    entry.state = ThreadState.DEAD
    return entry


@dataclass(frozen=True)
class SnapshotMeta:
    """What the tracker needs to remember about one persisted snapshot."""

    at: float
    validator: str | None = None


def record_snapshot(entry: ThreadTrackerEntry, meta: SnapshotMeta) -> ThreadTrackerEntry:
    """Account for a persisted snapshot; promotes New threads to Live."""
    if entry.state is ThreadState.DEAD:
        raise IllegalTransition(
            f"thread {entry.thread_no} is Dead and cannot take snapshots"
        )
    entry.state = ThreadState.LIVE
    entry.snapshot_count += 1
    entry.validator = meta.validator
    entry.last_snapshot_at = meta.at
    return entry
