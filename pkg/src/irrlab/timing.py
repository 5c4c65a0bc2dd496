"""Monotonic clock helpers shared by every component.

Timestamps are integer microseconds from ``time.perf_counter_ns``; durations
handed to callers are fractional milliseconds.
"""
from __future__ import annotations

import time

# Coarse sleep stops this far short of the deadline; the rest is a yielding spin.
SPIN_WINDOW_S = 0.0002


def now_us() -> int:
    """Current monotonic time in integer microseconds."""
    return time.perf_counter_ns() // 1000


def sleep_until(deadline_s: float, spin_window_s: float = SPIN_WINDOW_S) -> None:
    """Block until ``time.perf_counter() >= deadline_s``.

    Never returns early. The final ``spin_window_s`` is spent in a loop that
    calls ``time.sleep(0)`` so the GIL is released while spinning.
    """
    while True:
        remaining = deadline_s - time.perf_counter()
        if remaining <= 0:
            return
        if remaining > spin_window_s:
            time.sleep(remaining - spin_window_s)
        else:
            time.sleep(0)


def precise_sleep(seconds: float) -> None:
    if seconds <= 0:
        return
    sleep_until(time.perf_counter() + seconds)


class Stopwatch:
    """Elapsed-time timer with microsecond resolution.

    Started on construction; ``stop`` may be called once.
    """

    def __init__(self) -> None:
        self.start_us = now_us()
        self.stop_us: int | None = None

    @property
    def running(self) -> bool:
        return self.stop_us is None

    def stop(self) -> float:
        if self.stop_us is not None:
            raise RuntimeError("stopwatch already stopped")
        self.stop_us = now_us()
        return self.elapsed_ms

    @property
    def elapsed_ms(self) -> float:
        end = self.stop_us if self.stop_us is not None else now_us()
        return (end - self.start_us) / 1000.0
