"""Order-preserving latency injection.

:class:`LatencySimulator` delays each admitted message by a fixed duration and
raises a ready event once the delay has elapsed. In asynchronous mode every
message gets its own release thread; the threads run concurrently but a
message is only released once every message admitted before it has been
released, so the stream keeps its order *and* its inter-arrival spacing.

The synchronous mode processes one message at a time, which is what a naive
"sleep then forward" stage does: when messages arrive faster than the delay,
a backlog forms and each message waits longer than the previous one.
"""
from __future__ import annotations

import itertools
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .timing import now_us, sleep_until

log = logging.getLogger(__name__)

ASYNC = "async"
SYNC = "sync"


class SimulatorShutdown(RuntimeError):
    """Raised when a message is offered to a simulator that has been shut down."""


@dataclass
class LatencySimulatorResult:
    message: Any
    messageNumber: int
    admitted_us: int = 0
    released_us: int | None = None


@dataclass
class Subscription:
    simulator: "LatencySimulator"
    handler: Callable[[LatencySimulatorResult], Any]
    id: int = field(default=0)

    def cancel(self) -> None:
        self.simulator._unsubscribe(self)


class LatencySimulator:
    """Delay messages while preserving their order.

    Parameters
    ----------
    delay_ms : float
        Default delay applied by :meth:`delay` when no duration is given.
    mode : {"async", "sync"}
        ``"async"`` releases every message ``duration`` after its admission
        (subject to the ordering gate). ``"sync"`` delays messages one after
        another through a single worker, reproducing the backlog effect.
    """

    def __init__(self, delay_ms: float = 0.0, mode: str = ASYNC):
        if mode not in (ASYNC, SYNC):
            raise ValueError(f"mode must be 'async' or 'sync', got {mode!r}")
        if delay_ms < 0:
            raise ValueError("delay_ms must be >= 0")
        self.delay_ms = float(delay_ms)
        self.mode = mode
        self._cond = threading.Condition()
        self._received = 0  # Mr
        self._processed = 0  # Mp
        self._closed = False
        self._handlers: list[Subscription] = []
        self._sub_ids = itertools.count(1)
        self._threads: set[threading.Thread] = set()
        self._sync_queue: queue.Queue | None = None
        self._sync_worker: threading.Thread | None = None
        if mode == SYNC:
            self._sync_queue = queue.Queue()
            self._sync_worker = threading.Thread(
                target=self._sync_loop, name="latency-sim-sync", daemon=True
            )
            self._sync_worker.start()

    @property
    def received_count(self) -> int:
        return self._received

    @property
    def processed_count(self) -> int:
        return self._processed

    @property
    def in_flight(self) -> int:
        with self._cond:
            return self._received - self._processed

    def on_message_ready(self, handler: Callable[[LatencySimulatorResult], Any]) -> Subscription:
        sub = Subscription(self, handler, next(self._sub_ids))
        with self._cond:
            self._handlers.append(sub)
        return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._cond:
            self._handlers = [h for h in self._handlers if h.id != sub.id]

    def delay(self, message: Any, duration: float | None = None) -> int:
        """Admit ``message`` and schedule its release; returns its messageNumber."""
        duration_ms = self.delay_ms if duration is None else float(duration)
        if duration_ms < 0:
            raise ValueError("duration must be >= 0")
        admitted_ns = time.perf_counter_ns()
        with self._cond:
            if self._closed:
                raise SimulatorShutdown("latency simulator is shut down")
            self._received += 1
            result = LatencySimulatorResult(message, self._received, admitted_ns // 1000)
            fire_now = (
                self.mode == ASYNC
                and duration_ms == 0
                and result.messageNumber == self._processed + 1
            )
        if self.mode == SYNC:
            self._sync_queue.put((result, duration_ms))
        elif fire_now:
            self._release(result)
        else:
            t = threading.Thread(
                target=self._delayed_release,
                args=(result, admitted_ns / 1e9 + duration_ms / 1000.0),
                name=f"latency-sim-{result.messageNumber}",
                daemon=True,
            )
            with self._cond:
                self._threads.add(t)
            t.start()
        return result.messageNumber

    def _delayed_release(self, result: LatencySimulatorResult, deadline_s: float) -> None:
        try:
            sleep_until(deadline_s)
            with self._cond:
                self._cond.wait_for(lambda: self._processed + 1 == result.messageNumber)
            self._release(result)
        finally:
            with self._cond:
                self._threads.discard(threading.current_thread())

    def _release(self, result: LatencySimulatorResult) -> None:
        # Only the holder of messageNumber == Mp + 1 gets here, so handlers
        # never run concurrently; Mp advances after they return.
        result.released_us = now_us()
        with self._cond:
            handlers = [s.handler for s in self._handlers]
        try:
            for handler in handlers:
                try:
                    handler(result)
                except Exception:
                    log.exception("MessageReady handler failed for message %d",
                                  result.messageNumber)
        finally:
            with self._cond:
                self._processed += 1
                self._cond.notify_all()

    def _sync_loop(self) -> None:
        while True:
            item = self._sync_queue.get()
            if item is None:
                return
            result, duration_ms = item
            sleep_until(time.perf_counter() + duration_ms / 1000.0)
            self._release(result)

    def drain(self, timeout: float | None = None) -> bool:
        """Wait until every admitted message has been released."""
        with self._cond:
            return self._cond.wait_for(
                lambda: self._processed == self._received, timeout=timeout
            )

    def shutdown(self, timeout: float | None = None) -> bool:
        """Refuse new admissions and release everything still in flight.

        Returns True once drained (False if ``timeout`` expired first).
        """
        with self._cond:
            self._closed = True
        drained = self.drain(timeout)
        if self._sync_worker is not None and drained:
            self._sync_queue.put(None)
            self._sync_worker.join(timeout)
        return drained

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def delay_synchronous(messages: Iterable[Any], nl: float, sd: float) -> list[float]:
    """Push ``messages`` through a synchronous delay stage, one every ``sd`` ms.

    Returns the observed delay (release time minus generation time) of each
    message in milliseconds. With ``sd < nl`` the delays grow by roughly
    ``nl - sd`` per message.
    """
    messages = list(messages)
    if not messages:
        return []
    sim = LatencySimulator(delay_ms=nl, mode=SYNC)
    generated: dict[int, int] = {}
    delays: dict[int, float] = {}
    sim.on_message_ready(
        lambda r: delays.__setitem__(r.messageNumber, (r.released_us - generated[r.messageNumber]) / 1000)
    )
    start = time.perf_counter()
    for i, message in enumerate(messages):
        sleep_until(start + i * sd / 1000.0)
        # generation time is taken before admission so queueing is counted
        generated[i + 1] = now_us()
        sim.delay(message)
    sim.shutdown()
    return [delays[n] for n in range(1, len(messages) + 1)]
