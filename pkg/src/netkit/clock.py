"""Injectable time sources.

Everything that waits or timestamps takes a clock so tests can run reconnect
schedules and timeouts without real sleeping.
"""

from __future__ import annotations

import datetime as dt
import threading
import time


def rfc3339(ts: float) -> str:
    return dt.datetime.fromtimestamp(ts, dt.timezone.utc).isoformat(timespec="seconds").replace("+00:00", "Z")


class SystemClock:
    def time(self) -> float:
        return time.time()

    def monotonic(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float, interrupt: threading.Event | None = None) -> bool:
        """Sleep; return True if ``interrupt`` fired first."""
        if interrupt is None:
            time.sleep(max(0.0, seconds))
            return False
        return interrupt.wait(max(0.0, seconds))

    def wait(self, cond: threading.Condition, deadline: float | None) -> None:
        """Wait on a held condition until notified or ``deadline`` (monotonic)."""
        if deadline is None:
            cond.wait()
        else:
            cond.wait(max(0.0, deadline - self.monotonic()))


class FakeClock:
    """Manually driven clock.

    With ``autoadvance`` (the default) ``sleep`` jumps time forward instantly,
    which is what a single-threaded schedule test wants. Without it, sleepers
    block until another thread calls ``advance``.
    """

    def __init__(self, start: float = 1_700_000_000.0, autoadvance: bool = True):
        self._wall0 = start
        self._offset = 0.0
        self.autoadvance = autoadvance
        self._cond = threading.Condition()
        self.sleeps: list[float] = []

    def time(self) -> float:
        return self._wall0 + self._offset

    def monotonic(self) -> float:
        return self._offset

    def advance(self, seconds: float) -> None:
        with self._cond:
            self._offset += seconds
            self._cond.notify_all()

    def sleep(self, seconds: float, interrupt: threading.Event | None = None) -> bool:
        self.sleeps.append(seconds)
        if self.autoadvance:
            if interrupt is not None and interrupt.is_set():
                return True
            self.advance(seconds)
            return False
        deadline = self._offset + seconds
        with self._cond:
            while self._offset < deadline:
                if interrupt is not None and interrupt.is_set():
                    return True
                self._cond.wait(0.01)
        return False

    def wait(self, cond: threading.Condition, deadline: float | None) -> None:
        # fake time only moves on advance(); poll the caller's condition
        cond.wait(0.005)
