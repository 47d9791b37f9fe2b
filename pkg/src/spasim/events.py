"""Minimal deterministic event queue shared by the scheduler and the overlay."""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Callable


class Priority(IntEnum):
    """Processing order for events carrying the same timestamp."""

    WORKLOAD = 0      # task completions; may end the application
    COMPLETION = 1    # job completion / walltime expiry
    CONTENTION = 2    # background load changes
    OVERLAY = 3       # worker registration and ramp-up
    SUBMIT = 4        # all same-time submissions land before that pass
    PASS = 5          # scheduler passes (and fixed-delay starts)
    TICK = 6          # orchestrator top-up / idle checks


@dataclass(order=True)
class Event:
    time: float
    priority: int
    key: int
    seq: int
    callback: Callable[..., Any] = field(compare=False)
    args: tuple = field(compare=False, default=())
    cancelled: bool = field(compare=False, default=False)

    def cancel(self) -> None:
        self.cancelled = True


class EventQueue:
    def __init__(self, start: float = 0.0) -> None:
        self.now = float(start)
        self._heap: list[Event] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return sum(1 for e in self._heap if not e.cancelled)

    def call_at(self, time: float, priority: int, callback: Callable[..., Any], *args: Any, key: int = 0) -> Event:
        if time < self.now:
            raise ValueError(f"cannot schedule event at {time} before current time {self.now}")
        event = Event(float(time), int(priority), key, next(self._seq), callback, args)
        heapq.heappush(self._heap, event)
        return event

    def peek_time(self) -> float:
        while self._heap and self._heap[0].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0].time if self._heap else float("inf")

    def step(self) -> bool:
        """Run the next live event; return False when the queue is empty."""
        while self._heap:
            event = heapq.heappop(self._heap)
            if event.cancelled:
                continue
            self.now = event.time
            event.callback(*event.args)
            return True
        return False

    def run_until(self, until: float, stop: Callable[[], bool] | None = None) -> None:
        while self._heap and self.peek_time() <= until:
            if stop is not None and stop():
                return
            self.step()
        if until != float("inf") and until > self.now and (stop is None or not stop()):
            self.now = until
