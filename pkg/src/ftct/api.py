"""Read-only JSON API client: URL building, pacing, conditional fetches.

All wire activity funnels through one :class:`RequestPacer` so that catalog
and thread fetches share a single global request budget.  Bodies are kept as
verbatim bytes; this module never reserializes upstream payloads.
"""

from __future__ import annotations

import enum
import json
import logging
import math
import re
import threading
from dataclasses import dataclass
from typing import Any, Callable

import httpx

from .clocks import Clock, SystemClock

logger = logging.getLogger(__name__)

BOARD_CODE_RE = re.compile(r"^[a-z0-9]{1,10}$")

DEFAULT_USER_AGENT = "ftct/0.1 (+https://github.com/ftct-dev/ftct)"

# Backoff schedule for transient failures: initial attempt plus one retry
# after each listed delay, then give up until the next cycle.
DEFAULT_RETRY_BACKOFF: tuple[float, ...] = (2.0, 8.0, 32.0)


class ShutdownRequested(Exception):
    """Raised instead of granting a permit once shutdown has been signalled."""


class RequestQueueFull(RuntimeError):
    """More callers blocked on the budget than ``burst`` allows."""


class BoardListUnavailable(Exception):
    """Board discovery failed after bounded retries."""


def validate_board_code(code: str) -> str:
    """Return ``code`` unchanged if it is a valid board token, else raise."""
    if not isinstance(code, str) or not BOARD_CODE_RE.match(code):
        raise ValueError(f"invalid board code: {code!r}")
    return code


def validate_thread_no(thread_no: int) -> int:
    if not isinstance(thread_no, int) or isinstance(thread_no, bool) or thread_no <= 0:
        raise ValueError(f"invalid thread number: {thread_no!r}")
    return thread_no


@dataclass(frozen=True)
class EndpointSet:
    """Upstream hosts. ``media_host`` is only ever used to derive links."""

    api_host: str = "a.4cdn.org"
    media_host: str = "i.4cdn.org"
    scheme: str = "https"

    def __post_init__(self) -> None:
        for name in ("api_host", "media_host"):
            value = getattr(self, name)
            if not value or "/" in value or " " in value:
                raise ValueError(f"{name} must be a bare hostname, got {value!r}")
        if self.scheme not in ("http", "https"):
            raise ValueError(f"scheme must be http or https, got {self.scheme!r}")


@dataclass(frozen=True)
class RequestBudget:
    """Global pacing contract: at least ``min_interval_ms`` between grants."""

    min_interval_ms: float = 1100.0
    burst: int = 1

    def __post_init__(self) -> None:
        if self.min_interval_ms <= 0:
            raise ValueError("min_interval_ms must be > 0")
        if self.burst < 1:
            raise ValueError("burst must be >= 1")


def build_catalog_url(endpoints: EndpointSet, board: str) -> str:
    validate_board_code(board)
    return f"{endpoints.scheme}://{endpoints.api_host}/{board}/threads.json"


def build_thread_url(endpoints: EndpointSet, board: str, thread_no: int) -> str:
    validate_board_code(board)
    validate_thread_no(thread_no)
    return f"{endpoints.scheme}://{endpoints.api_host}/{board}/thread/{thread_no}.json"


def build_boards_url(endpoints: EndpointSet) -> str:
    return f"{endpoints.scheme}://{endpoints.api_host}/boards.json"


def build_media_url(endpoints: EndpointSet, board: str, token: str, ext: str) -> str:
    """Media link for an attachment's server-assigned rename token."""
    validate_board_code(board)
    return f"{endpoints.scheme}://{endpoints.media_host}/{board}/{token}{ext}"


class FetchKind(enum.Enum):
    PAYLOAD = "payload"
    NOT_MODIFIED = "not_modified"
    GONE = "gone"
    TRANSIENT_ERROR = "transient_error"


@dataclass(frozen=True)
class FetchOutcome:
    kind: FetchKind
    fetched_at: float
    body: bytes | None = None
    last_modified: str | None = None

    def __post_init__(self) -> None:
        if self.kind is FetchKind.PAYLOAD and not self.body:
            raise ValueError("payload outcome requires a non-empty body")
        if self.kind is not FetchKind.PAYLOAD and self.body is not None:
            raise ValueError(f"{self.kind.value} outcome must not carry a body")


class RequestPacer:
    """Grants request permits no closer together than the budget interval.

    Thread-safe; grants are serialized so the interval holds across all
    request kinds globally.  At most ``burst`` callers may be inside
    :meth:`acquire` at once; beyond that the queue is refused rather than
    grown without bound.
    """

    def __init__(
        self,
        budget: RequestBudget,
        *,
        clock: Clock | None = None,
        stop: threading.Event | None = None,
        on_grant: Callable[[float], None] | None = None,
    ) -> None:
        self._interval = budget.min_interval_ms / 1000.0
        self._burst = budget.burst
        self._clock = clock or SystemClock()
        self._stop = stop
        self._on_grant = on_grant
        self._grant_lock = threading.Lock()
        self._queue_lock = threading.Lock()
        self._queued = 0
        self._next_free = float("-inf")

    def acquire(self) -> float:
        """Block until a permit is free; return its grant time (monotonic).

        Raises ShutdownRequested if the stop event fires while waiting.
        """
        with self._queue_lock:
            if self._queued >= self._burst:
                raise RequestQueueFull(f"more than {self._burst} queued permits")
            self._queued += 1
        try:
            with self._grant_lock:
                while True:
                    if self._stop is not None and self._stop.is_set():
                        raise ShutdownRequested
                    wait = self._next_free - self._clock.monotonic()
                    if wait <= 0:
                        break
                    if self._clock.sleep(wait, interrupt=self._stop):
                        raise ShutdownRequested
                grant = self._clock.monotonic()
                next_free = grant + self._interval
                if next_free - grant < self._interval:
                    # float rounding at large clock values can fall a hair
                    # short; the contract is "at least the interval"
                    next_free = math.nextafter(next_free, math.inf)
                self._next_free = next_free
                if self._on_grant is not None:
                    self._on_grant(grant)
                return grant
        finally:
            with self._queue_lock:
                self._queued -= 1


class ApiClient:
    """HTTP GET client for the board/catalog/thread endpoints.

    One client holds one budget; every wire request (including retries)
    acquires a permit first.  Conditional thread fetches carry the validator
    from the prior snapshot as ``If-Modified-Since``.
    """

    def __init__(
        self,
        endpoints: EndpointSet | None = None,
        budget: RequestBudget | None = None,
        *,
        user_agent: str = DEFAULT_USER_AGENT,
        clock: Clock | None = None,
        stop: threading.Event | None = None,
        transport: httpx.BaseTransport | None = None,
        timeout: float = 30.0,
        retry_backoff: tuple[float, ...] | None = None,
        on_grant: Callable[[float], None] | None = None,
    ) -> None:
        self.endpoints = endpoints or EndpointSet()
        self.budget = budget or RequestBudget()
        self._clock = clock or SystemClock()
        self._stop = stop
        self.pacer = RequestPacer(
            self.budget, clock=self._clock, stop=stop, on_grant=on_grant
        )
        self._retry_backoff = tuple(
            DEFAULT_RETRY_BACKOFF if retry_backoff is None else retry_backoff
        )
        self._http = httpx.Client(
            transport=transport,
            timeout=timeout,
            headers={"User-Agent": user_agent},
            follow_redirects=True,
        )
        # at most one request on the wire, even for a shared client
        self._wire_lock = threading.Lock()
        self._board_cache: dict[str, dict[str, Any]] | None = None
        self.request_count = 0

    # -- URL helpers bound to this client's endpoints

    def catalog_url(self, board: str) -> str:
        return build_catalog_url(self.endpoints, board)

    def thread_url(self, board: str, thread_no: int) -> str:
        return build_thread_url(self.endpoints, board, thread_no)

    # -- fetch operations

    def fetch_catalog(self, board: str) -> FetchOutcome:
        return self._fetch(self.catalog_url(board))

    def fetch_thread(
        self, board: str, thread_no: int, validator: str | None = None
    ) -> FetchOutcome:
        return self._fetch(self.thread_url(board, thread_no), validator=validator)

    def fetch_board_list(self) -> dict[str, dict[str, Any]]:
        """Map of board code to upstream metadata, cached for the process."""
        if self._board_cache is not None:
            return self._board_cache
        outcome = self._fetch(build_boards_url(self.endpoints))
        if outcome.kind is not FetchKind.PAYLOAD:
            raise BoardListUnavailable(f"board index fetch ended with {outcome.kind.value}")
        assert outcome.body is not None
        document = json.loads(outcome.body)
        boards: dict[str, dict[str, Any]] = {}
        for entry in document.get("boards", []):
            code = entry.get("board")
            if not isinstance(code, str) or not BOARD_CODE_RE.match(code):
                logger.warning("skipping board with unusable code: %r", code)
                continue
            boards[code] = entry
        if not boards:
            raise BoardListUnavailable("board index carried no usable boards")
        self._board_cache = boards
        return boards

    def _fetch(self, url: str, validator: str | None = None) -> FetchOutcome:
        attempts = 1 + len(self._retry_backoff)
        for attempt in range(attempts):
            outcome = self._attempt(url, validator)
            if outcome.kind is not FetchKind.TRANSIENT_ERROR:
                return outcome
            if attempt < attempts - 1:
                delay = self._retry_backoff[attempt]
                logger.debug(
                    "transient failure for %s, retrying in %.0fs (attempt %d/%d)",
                    url, delay, attempt + 1, attempts,
                )
                if self._clock.sleep(delay, interrupt=self._stop):
                    raise ShutdownRequested
        logger.warning("giving up on %s after %d attempts", url, attempts)
        return outcome

    def _attempt(self, url: str, validator: str | None) -> FetchOutcome:
        headers = {"If-Modified-Since": validator} if validator else None
        with self._wire_lock:
            self.pacer.acquire()
            self.request_count += 1
            try:
                response = self._http.get(url, headers=headers)
            except httpx.HTTPError as exc:
                logger.debug("request error for %s: %s", url, exc)
                return FetchOutcome(FetchKind.TRANSIENT_ERROR, self._clock.time())
        fetched_at = self._clock.time()
        if response.status_code == 304:
            return FetchOutcome(
                FetchKind.NOT_MODIFIED, fetched_at, last_modified=validator
            )
        if response.status_code == 404:
            return FetchOutcome(FetchKind.GONE, fetched_at)
        if response.status_code == 200:
            body = response.content
            try:
                json.loads(body)
            except (ValueError, UnicodeDecodeError):
                logger.debug("unparseable 200 body from %s", url)
                return FetchOutcome(FetchKind.TRANSIENT_ERROR, fetched_at)
            return FetchOutcome(
                FetchKind.PAYLOAD,
                fetched_at,
                body=body,
                last_modified=response.headers.get("Last-Modified"),
            )
        logger.debug("status %d from %s", response.status_code, url)
        return FetchOutcome(FetchKind.TRANSIENT_ERROR, fetched_at)

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ApiClient":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()
