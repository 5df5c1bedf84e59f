"""Deterministic in-process double of the upstream JSON API.

A :class:`BoardScript` is a time-ordered event timeline (thread creation,
posts, pruning); :class:`MockBoard` serves the catalog/thread endpoints that
timeline implies at the current virtual instant.  Identical (script, clock)
inputs produce byte-identical responses, so every end-to-end property test
runs offline and reproducibly.

The server is callable three ways: directly (``serve_catalog`` /
``serve_thread``), as an httpx transport (no sockets), or as a real HTTP
server on an ephemeral localhost port.
"""

from __future__ import annotations

import enum
import json
import threading
from dataclasses import dataclass, field
from email.utils import formatdate
from http.server import BaseHTTPRequestHandler, HTTPServer
from typing import Any, Mapping

import httpx

from .api import BOARD_CODE_RE

CATALOG_PAGE_SIZE = 10


class VirtualClock:
    """Explicitly-advanced clock shared by tests, server and crawler."""

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._lock = threading.Lock()

    def time(self) -> float:
        with self._lock:
            return self._now

    def monotonic(self) -> float:
        return self.time()

    def sleep(self, seconds: float, interrupt: threading.Event | None = None) -> bool:
        if interrupt is not None and interrupt.is_set():
            return True
        if seconds > 0:
            self.advance(seconds)
        return False

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("virtual clock cannot run backwards")
        with self._lock:
            self._now += seconds

    def advance_to(self, instant: float) -> None:
        with self._lock:
            if instant < self._now:
                raise ValueError(
                    f"virtual clock cannot go back from {self._now} to {instant}"
                )
            self._now = instant


class EventKind(enum.Enum):
    CREATE_THREAD = "create_thread"
    ADD_POST = "add_post"
    PRUNE = "prune"
    DELETE = "delete"


_CONTENT_KINDS = (EventKind.CREATE_THREAD, EventKind.ADD_POST)


@dataclass(frozen=True)
class BoardEvent:
    at: float
    kind: EventKind
    board: str
    thread_no: int
    fragment: Mapping[str, Any] | None = None


@dataclass
class BoardScript:
    """Validated, time-ordered timeline of board events."""

    boards: list[str]
    events: list[BoardEvent]

    def __post_init__(self) -> None:
        for board in self.boards:
            if not BOARD_CODE_RE.match(board):
                raise ValueError(f"invalid board code in script: {board!r}")
        if len(set(self.boards)) != len(self.boards):
            raise ValueError("duplicate boards in script")
        last_at = float("-inf")
        created: set[tuple[str, int]] = set()
        content_seconds: dict[tuple[str, int], set[int]] = {}
        for event in self.events:
            if event.board not in self.boards:
                raise ValueError(f"event for unscripted board {event.board!r}")
            if event.at < last_at:
                raise ValueError("events must be sorted by time")
            last_at = event.at
            key = (event.board, event.thread_no)
            if event.kind is EventKind.CREATE_THREAD:
                if key in created:
                    raise ValueError(f"thread {key} created twice")
                created.add(key)
            elif key not in created:
                raise ValueError(f"{event.kind.value} before creation of {key}")
            if event.kind in _CONTENT_KINDS:
                seconds = content_seconds.setdefault(key, set())
                second = int(event.at)
                if second in seconds:
                    raise ValueError(
                        f"two content events for {key} within second {second}; "
                        "validators work at one-second granularity"
                    )
                seconds.add(second)


@dataclass(frozen=True)
class RequestRecord:
    time: float
    method: str
    host: str
    path: str
    status: int


@dataclass
class _ThreadStory:
    created_at: int
    op_fragment: Mapping[str, Any] | None
    posts: list[tuple[int, int, Mapping[str, Any] | None]] = field(default_factory=list)
    ended_at: float | None = None  # prune or delete time


class MockBoard:
    """Scripted API double with a complete request log.

    The request log is the oracle for pacing, request-count and
    no-media-host assertions: every hit lands there, in order, regardless
    of which calling mode delivered it.
    """

    def __init__(self, script: BoardScript, clock: VirtualClock | None = None) -> None:
        self.script = script
        self.clock = clock or VirtualClock()
        self.request_log: list[RequestRecord] = []
        self._log_lock = threading.Lock()
        self._stories: dict[str, dict[int, _ThreadStory]] = {
            board: {} for board in script.boards
        }
        next_post_no = 1 + max(
            (event.thread_no for event in script.events), default=0
        )
        for event in script.events:
            per_board = self._stories[event.board]
            if event.kind is EventKind.CREATE_THREAD:
                per_board[event.thread_no] = _ThreadStory(
                    created_at=int(event.at), op_fragment=event.fragment
                )
            elif event.kind is EventKind.ADD_POST:
                post_no = int((event.fragment or {}).get("no", 0)) or next_post_no
                next_post_no = max(next_post_no, post_no) + 1
                per_board[event.thread_no].posts.append(
                    (post_no, int(event.at), event.fragment)
                )
            else:
                story = per_board[event.thread_no]
                if story.ended_at is None:
                    story.ended_at = event.at
        self._server: HTTPServer | None = None
        self._server_thread: threading.Thread | None = None

    # -- scripted state at an instant

    def _visible_threads(self, board: str, now: float) -> dict[int, _ThreadStory]:
        return {
            no: story
            for no, story in self._stories[board].items()
            if story.created_at <= now
            and (story.ended_at is None or story.ended_at > now)
        }

    def _thread_version(self, story: _ThreadStory, now: float) -> int:
        """Integer second of the latest content event at or before ``now``."""
        version = story.created_at
        for _, at, _ in story.posts:
            if at <= now:
                version = max(version, at)
        return version

    def _catalog_document(self, board: str, now: float) -> bytes:
        stubs = [
            {
                "no": no,
                "last_modified": self._thread_version(story, now),
                "replies": sum(1 for _, at, _ in story.posts if at <= now),
            }
            for no, story in self._visible_threads(board, now).items()
        ]
        stubs.sort(key=lambda stub: (-stub["last_modified"], stub["no"]))
        pages = [
            {"page": index + 1, "threads": stubs[start : start + CATALOG_PAGE_SIZE]}
            for index, start in enumerate(range(0, len(stubs), CATALOG_PAGE_SIZE))
        ] or [{"page": 1, "threads": []}]
        return _stable_json(pages)

    def _thread_document(self, board: str, thread_no: int, now: float) -> bytes:
        story = self._stories[board][thread_no]
        op = {
            "no": thread_no,
            "time": story.created_at,
            "name": "Anonymous",
            "com": f"thread {thread_no} opening post",
        }
        if story.op_fragment:
            op.update(story.op_fragment)
        posts = [op]
        reply_index = 0
        for post_no, at, fragment in story.posts:
            if at > now:
                continue
            reply_index += 1
            post = {
                "no": post_no,
                "time": at,
                "name": "Anonymous",
                "com": f"reply {reply_index} in thread {thread_no}",
            }
            if fragment:
                post.update(fragment)
            posts.append(post)
        return _stable_json({"posts": posts})

    # -- request handling (shared by every calling mode)

    def handle(
        self,
        method: str,
        host: str,
        path: str,
        headers: Mapping[str, str] | None = None,
    ) -> tuple[int, dict[str, str], bytes]:
        now = self.clock.time()
        status, response_headers, body = self._route(
            method, path, headers or {}, now
        )
        with self._log_lock:
            self.request_log.append(RequestRecord(now, method, host, path, status))
        return status, response_headers, body

    def _route(
        self, method: str, path: str, headers: Mapping[str, str], now: float
    ) -> tuple[int, dict[str, str], bytes]:
        json_headers = {"Content-Type": "application/json"}
        if method != "GET":
            return 405, json_headers, _stable_json({"error": "method not allowed"})
        parts = [part for part in path.split("/") if part]
        if parts == ["boards.json"]:
            boards = [{"board": board, "title": board} for board in self.script.boards]
            return 200, json_headers, _stable_json({"boards": boards})
        if len(parts) == 2 and parts[1] == "threads.json":
            board = parts[0]
            if board not in self._stories:
                return 404, json_headers, _stable_json({"error": "unknown board"})
            return 200, json_headers, self._catalog_document(board, now)
        if len(parts) == 3 and parts[1] == "thread" and parts[2].endswith(".json"):
            board = parts[0]
            try:
                thread_no = int(parts[2][: -len(".json")])
            except ValueError:
                return 404, json_headers, _stable_json({"error": "bad thread id"})
            if board not in self._stories:
                return 404, json_headers, _stable_json({"error": "unknown board"})
            if thread_no not in self._visible_threads(board, now):
                return 404, json_headers, _stable_json({"error": "no such thread"})
            story = self._stories[board][thread_no]
            validator = formatdate(self._thread_version(story, now), usegmt=True)
            if _header(headers, "If-Modified-Since") == validator:
                return 304, {"Last-Modified": validator}, b""
            body = self._thread_document(board, thread_no, now)
            return 200, {**json_headers, "Last-Modified": validator}, body
        return 404, json_headers, _stable_json({"error": "not found"})

    # -- direct-call surface for fixtures and unit tests

    def serve_catalog(self, board: str) -> tuple[int, dict[str, str], bytes]:
        return self.handle("GET", "", f"/{board}/threads.json")

    def serve_thread(
        self, board: str, thread_no: int, validator: str | None = None
    ) -> tuple[int, dict[str, str], bytes]:
        headers = {"If-Modified-Since": validator} if validator else {}
        return self.handle("GET", "", f"/{board}/thread/{thread_no}.json", headers)

    # -- httpx transport (in-process, no sockets)

    def transport(self) -> httpx.BaseTransport:
        return _MockTransport(self)

    # -- real HTTP on an ephemeral localhost port

    def start_http(self) -> str:
        """Start serving on 127.0.0.1:<ephemeral>; returns ``host:port``."""
        if self._server is not None:
            raise RuntimeError("mock server already running")
        mock = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def do_GET(self) -> None:  # noqa: N802 (http.server API)
                status, headers, body = mock.handle(
                    "GET",
                    self.headers.get("Host", ""),
                    self.path,
                    dict(self.headers),
                )
                self.send_response(status)
                for key, value in headers.items():
                    self.send_header(key, value)
                self.send_header("Content-Length", str(len(body)))
                # one request per connection keeps the single-threaded
                # server responsive to shutdown between requests
                self.send_header("Connection", "close")
                self.end_headers()
                if body:
                    self.wfile.write(body)
                self.close_connection = True

            def log_message(self, *args: Any) -> None:
                pass

        self._server = HTTPServer(("127.0.0.1", 0), Handler)
        self._server_thread = threading.Thread(
            target=self._server.serve_forever, daemon=True
        )
        self._server_thread.start()
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def stop_http(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None
            self._server_thread = None

    def __enter__(self) -> "MockBoard":
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop_http()


class _MockTransport(httpx.BaseTransport):
    def __init__(self, mock: MockBoard) -> None:
        self._mock = mock

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        host = request.url.host
        if request.url.port:
            host = f"{host}:{request.url.port}"
        status, headers, body = self._mock.handle(
            request.method, host, request.url.path, dict(request.headers)
        )
        return httpx.Response(status, headers=headers, content=body)


def _stable_json(document: Any) -> bytes:
    return json.dumps(document, sort_keys=True, separators=(",", ":")).encode()


def _header(headers: Mapping[str, str], name: str) -> str | None:
    wanted = name.lower()
    for key, value in headers.items():
        if key.lower() == wanted:
            return value
    return None
