"""Injectable time sources.

Every component that reads the time or sleeps takes a clock object so the
test suite can drive the whole pipeline on a virtual timeline.  The real
implementation is :class:`SystemClock`; the virtual one lives next to the
mock server in :mod:`ftct.mockboard`.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def time(self) -> float:
        """Current wall time as UTC epoch seconds."""
        ...

    def monotonic(self) -> float:
        """Monotonic seconds, for interval measurement."""
        ...

    def sleep(self, seconds: float, interrupt: threading.Event | None = None) -> bool:
        """Sleep for ``seconds``; return True if interrupted early."""
        ...


class SystemClock:
    """Real time via the :mod:`time` module."""

    def time(self) -> float:
        return time.time()

    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float, interrupt: threading.Event | None = None) -> bool:
        if seconds <= 0:
            return bool(interrupt and interrupt.is_set())
        if interrupt is not None:
            return interrupt.wait(seconds)
        time.sleep(seconds)
        return False
