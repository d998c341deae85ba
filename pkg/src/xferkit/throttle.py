"""Rate limiting and retry pacing.

TokenBucket throttles operations per second (with burst); BandwidthGate
paces payload bytes to a target rate at 100 ms granularity. Both are
thread-safe and shared across all sessions of one connector instance.
"""

from __future__ import annotations

import random
import threading
import time


class TokenBucket:
    """Ops-per-second bucket. try_take() never blocks; callers back off."""

    def __init__(self, rate: float, burst: int = 1):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.burst = max(1, int(burst))
        self._tokens = float(self.burst)
        self._stamp = time.monotonic()
        self._lock = threading.Lock()

    def _refill(self, now: float) -> None:
        self._tokens = min(self.burst, self._tokens + (now - self._stamp) * self.rate)
        self._stamp = now

    def try_take(self) -> bool:
        with self._lock:
            self._refill(time.monotonic())
            if self._tokens >= 1.0:
                self._tokens -= 1.0
                return True
            return False

    def wait_time(self) -> float:
        """Seconds until the next token becomes available."""
        with self._lock:
            self._refill(time.monotonic())
            if self._tokens >= 1.0:
                return 0.0
            return (1.0 - self._tokens) / self.rate


class BandwidthGate:
    """Byte-rate pacer: take(n) blocks until n bytes fit under the cap."""

    GRANULARITY = 0.1  # seconds per pacing slice

    def __init__(self, bytes_per_second: float):
        if bytes_per_second <= 0:
            raise ValueError("bandwidth must be positive")
        self.rate = float(bytes_per_second)
        self._lock = threading.Lock()
        self._next_free = time.monotonic()

    def take(self, nbytes: int) -> None:
        if nbytes <= 0:
            return
        with self._lock:
            now = time.monotonic()
            start = max(now, self._next_free)
            self._next_free = start + nbytes / self.rate
            wake = self._next_free
        # Sleep outside the lock so concurrent sessions queue fairly.
        while True:
            remaining = wake - time.monotonic()
            if remaining <= 0:
                return
            time.sleep(min(remaining, self.GRANULARITY))


def backoff_delay(attempt: int, base: float = 0.25, factor: float = 2.0,
                  cap: float = 8.0, rng: random.Random | None = None) -> float:
    """Full-jitter exponential backoff delay for the given retry attempt (1-based)."""
    ceiling = min(cap, base * (factor ** max(0, attempt - 1)))
    r = rng if rng is not None else random
    return r.uniform(0.0, ceiling)


def precise_sleep(duration: float, spin_window: float = 0.005) -> None:
    """Sleep with sub-millisecond accuracy.

    time.sleep alone can overshoot by several milliseconds on coarse-timer
    kernels, which would silently inflate injected latencies; sleeping short
    and spinning the residue keeps modeled overheads honest.
    """
    if duration <= 0:
        return
    deadline = time.monotonic() + duration
    coarse = duration - spin_window
    if coarse > 0:
        time.sleep(coarse)
    while time.monotonic() < deadline:
        pass
