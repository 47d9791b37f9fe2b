"""Synthetic chunk-incrementation workload and its executor.

Each chunk is read once, incremented ``iterations`` times with a sleep of
``task_delay_s`` after every increment, then written back. One chunk is one
task. The executor dispatches tasks greedily onto whatever executor slots the
overlay currently offers, or, in fluid mode, drains an infinitely divisible
pool of CPU time at a rate equal to the live slot count.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np

from .events import EventQueue, Priority
from .model import average_workers
from .overlay import OverlayEvent


@dataclass(frozen=True)
class WorkloadSpec:
    chunks: int = 125
    iterations: int = 10
    task_delay_s: float = 0.0
    increment_duration_s: float = 20.0
    increment_jitter_s: float = 0.0
    read_write_overhead_s: float = 0.0

    def __post_init__(self) -> None:
        if self.chunks < 1 or self.iterations < 1:
            raise ValueError("chunks and iterations must be >= 1")
        for name in ("task_delay_s", "increment_duration_s", "increment_jitter_s", "read_write_overhead_s"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def per_task_s(self) -> float:
        """Nominal task duration (no jitter)."""
        return self.read_write_overhead_s + self.iterations * (self.task_delay_s + self.increment_duration_s)

    def task_durations(self, rng: np.random.Generator | None = None) -> list[float]:
        if self.increment_jitter_s == 0:
            return [self.per_task_s] * self.chunks
        if rng is None:
            raise ValueError("jittered durations need a random generator")
        lo = max(0.0, self.increment_duration_s - self.increment_jitter_s)
        hi = self.increment_duration_s + self.increment_jitter_s
        draws = rng.uniform(lo, hi, size=self.chunks)
        return [self.read_write_overhead_s + self.iterations * (self.task_delay_s + float(inc)) for inc in draws]

    def scaled(self, factor: float) -> "WorkloadSpec":
        return WorkloadSpec(self.chunks, self.iterations, self.task_delay_s * factor,
                            self.increment_duration_s * factor, self.increment_jitter_s * factor,
                            self.read_write_overhead_s * factor)


def calibrate_task_delay(max_parallelism: int, chunks: int, iterations: int, target_sleep_makespan_s: float) -> float:
    """Sleep per iteration so that the sleeps alone take ``target_sleep_makespan_s`` at full parallelism."""
    if min(max_parallelism, chunks, iterations) < 1 or target_sleep_makespan_s <= 0:
        raise ValueError("all inputs must be positive")
    return target_sleep_makespan_s / (math.ceil(chunks / max_parallelism) * iterations)


def total_cpu_time(spec: WorkloadSpec) -> float:
    if spec.increment_jitter_s:
        raise ValueError("total CPU time of a jittered workload is only known after the run")
    return (spec.chunks * spec.iterations * (spec.task_delay_s + spec.increment_duration_s)
            + spec.chunks * spec.read_write_overhead_s)


class TaskState(str, Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"


@dataclass
class Task:
    chunk_id: int
    duration_s: float
    state: TaskState = TaskState.QUEUED
    worker_id: int | None = None
    start: float | None = None
    end: float | None = None


@dataclass
class WorkerTrace:
    """Step function of usable executor slots; each breakpoint holds until the next."""

    breakpoints: list[tuple[float, int]] = field(default_factory=list)

    def record(self, time: float, workers: int) -> None:
        pts = self.breakpoints
        if pts and time < pts[-1][0]:
            raise ValueError("trace times must not decrease")
        if pts and pts[-1][0] == time:
            pts.pop()
        if not pts or pts[-1][1] != workers:
            pts.append((time, workers))

    def value_at(self, time: float) -> int:
        value = 0
        for t, n in self.breakpoints:
            if t > time:
                break
            value = n
        return value


@dataclass
class RunResult:
    makespan_s: float
    avg_workers: float
    total_cpu_time_s: float
    per_job_queue_delay_s: list[float]
    failed: bool
    failure_reason: str | None
    trace: WorkerTrace
    start_time: float = 0.0
    tasks: list[Task] = field(default_factory=list)
    lost_attempts: list[Task] = field(default_factory=list)

    @property
    def end_time(self) -> float:
        return self.start_time + self.makespan_s


class WorkloadExecutor:
    """Runs a :class:`WorkloadSpec` on a changing set of executor slots.

    Slots come and go through :meth:`add_worker`, :meth:`start_driver` and
    :meth:`remove_workers`; task completions are scheduled on ``queue``.
    """

    def __init__(
        self,
        spec: WorkloadSpec,
        queue: EventQueue,
        *,
        fluid: bool = False,
        rng: np.random.Generator | None = None,
        requeue_on_worker_loss: bool = False,
        start_time: float = 0.0,
        on_finish: Callable[[float], None] | None = None,
        on_activity: Callable[[int, float], None] | None = None,
    ) -> None:
        self.spec = spec
        self.queue = queue
        self.fluid = fluid
        self.requeue = requeue_on_worker_loss
        self.start_time = start_time
        self.on_finish = on_finish
        self.on_activity = on_activity
        self.tasks = [Task(i, d) for i, d in enumerate(spec.task_durations(rng))]
        self.total_cpu_time_s = math.fsum(t.duration_s for t in self.tasks)
        self.trace = WorkerTrace([(start_time, 0)])
        self.lost_attempts: list[Task] = []
        self.capacity: dict[int, int] = {}
        self.worker_job: dict[int, int] = {}
        self.running_on: dict[int, set[int]] = {}
        self.driver_started = False
        self.driver_host: int | None = None
        self.done = False
        self.failed = False
        self.failure_reason: str | None = None
        self.end_time: float | None = None
        self._queued = list(range(spec.chunks))
        self._completed = 0
        self._task_events: dict[int, object] = {}
        # fluid bookkeeping
        self._remaining = self.total_cpu_time_s
        self._rate = 0
        self._last = start_time
        self._fluid_event = None

    # slot changes -------------------------------------------------------

    def usable_slots(self) -> int:
        if not self.driver_started:
            return 0
        return sum(self.capacity.values())

    def add_worker(self, worker_id: int, job_id: int, slots: int, now: float) -> None:
        if self.done:
            return
        cap = slots - (1 if worker_id == self.driver_host else 0)
        self.capacity[worker_id] = max(cap, 0)
        self.worker_job[worker_id] = job_id
        self.running_on.setdefault(worker_id, set())
        self._changed(now)

    def start_driver(self, host_worker: int | None, now: float) -> None:
        if self.done:
            return
        self.driver_started = True
        self.driver_host = host_worker
        if host_worker is not None and host_worker in self.capacity:
            self.capacity[host_worker] = max(self.capacity[host_worker] - 1, 0)
        self._changed(now)

    def remove_workers(self, worker_ids: Iterable[int], now: float) -> list[Task]:
        """Drop workers; returns the tasks that were running on them."""
        lost = []
        for wid in worker_ids:
            if wid not in self.capacity:
                continue
            for chunk in sorted(self.running_on.pop(wid, ())):
                task = self.tasks[chunk]
                self._task_events.pop(chunk).cancel()
                self.lost_attempts.append(Task(chunk, task.duration_s, TaskState.FAILED, wid, task.start, now))
                lost.append(task)
                if self.requeue:
                    task.state, task.worker_id, task.start = TaskState.QUEUED, None, None
                    heapq.heappush(self._queued, chunk)
                else:
                    task.state, task.end = TaskState.FAILED, now
            del self.capacity[wid]
            del self.worker_job[wid]
        if not self.done:
            self._changed(now)
        return lost

    def busy_jobs(self) -> set[int]:
        """Jobs whose workers are currently executing work."""
        if self.fluid:
            if self.done or not self.driver_started:
                return set()
            return {self.worker_job[w] for w, c in self.capacity.items() if c > 0}
        return {self.worker_job[w] for w, running in self.running_on.items() if running}

    def _changed(self, now: float) -> None:
        if self.done:
            return
        if self.fluid:
            self._replan(now)
        else:
            self._dispatch(now)
        self.trace.record(now, self.usable_slots())

    # discrete mode ------------------------------------------------------

    def _dispatch(self, now: float) -> None:
        if not self.driver_started:
            return
        for wid in sorted(self.capacity):
            while self._queued and len(self.running_on[wid]) < self.capacity[wid]:
                chunk = heapq.heappop(self._queued)
                task = self.tasks[chunk]
                task.state, task.worker_id, task.start, task.end = TaskState.RUNNING, wid, now, None
                self.running_on[wid].add(chunk)
                self._task_events[chunk] = self.queue.call_at(
                    now + task.duration_s, Priority.WORKLOAD, self._task_done, chunk, key=chunk)
                if self.on_activity:
                    self.on_activity(self.worker_job[wid], now)
            if not self._queued:
                break

    def _task_done(self, chunk: int) -> None:
        now = self.queue.now
        task = self.tasks[chunk]
        task.state, task.end = TaskState.DONE, now
        self._task_events.pop(chunk)
        self.running_on[task.worker_id].discard(chunk)
        self._completed += 1
        if self.on_activity:
            self.on_activity(self.worker_job[task.worker_id], now)
        if self._completed == len(self.tasks):
            self._finish(now)
        else:
            self._dispatch(now)

    @property
    def queued_work(self) -> bool:
        """Whether any work is still waiting for a slot."""
        if self.fluid:
            return not self.done
        return bool(self._queued)

    # fluid mode ---------------------------------------------------------

    def _replan(self, now: float) -> None:
        self._remaining -= self._rate * (now - self._last)
        self._last = now
        self._rate = self.usable_slots()
        if self._fluid_event is not None:
            self._fluid_event.cancel()
            self._fluid_event = None
        if self._rate > 0:
            self._fluid_event = self.queue.call_at(
                now + max(self._remaining, 0.0) / self._rate, Priority.WORKLOAD, self._fluid_done)

    def _fluid_done(self) -> None:
        now = self.queue.now
        self._remaining = 0.0
        self._fluid_event = None
        for task in self.tasks:
            task.state = TaskState.DONE
        self._finish(now)

    # termination --------------------------------------------------------

    def _finish(self, now: float) -> None:
        self.trace.record(now, self.usable_slots())
        self.done = True
        self.end_time = now
        if self.on_finish:
            self.on_finish(now)

    def fail(self, reason: str, now: float) -> None:
        if self.done:
            return
        if self._fluid_event is not None:
            self._fluid_event.cancel()
        for ev in self._task_events.values():
            ev.cancel()
        self._task_events.clear()
        self.trace.record(now, self.usable_slots())
        self.done = True
        self.failed = True
        self.failure_reason = reason
        self.end_time = now

    def result(self, queue_delays: list[float] | None = None) -> RunResult:
        if not self.done:
            raise RuntimeError("workload has not finished")
        makespan = self.end_time - self.start_time
        avg = average_workers(self.trace, makespan) if makespan > 0 else 0.0
        return RunResult(
            makespan_s=makespan,
            avg_workers=avg,
            total_cpu_time_s=self.total_cpu_time_s,
            per_job_queue_delay_s=list(queue_delays or []),
            failed=self.failed,
            failure_reason=self.failure_reason,
            trace=self.trace,
            start_time=self.start_time,
            tasks=self.tasks,
            lost_attempts=self.lost_attempts,
        )


def run_workload(
    overlay_events: Iterable[OverlayEvent],
    spec: WorkloadSpec,
    fluid: bool = False,
    seed: int | None = 0,
    *,
    start_time: float = 0.0,
    requeue_on_worker_loss: bool = False,
) -> RunResult:
    """Replay a fixed stream of overlay events against the workload.

    ``worker_accepting`` adds ``slots`` on a worker, ``driver_elected`` starts
    the driver (consuming a slot on ``worker_id`` when one is given),
    ``worker_lost`` removes a worker and ``run_failed`` aborts the run.
    """
    events = sorted(overlay_events, key=lambda e: e.time)
    queue = EventQueue(start_time)
    executor = WorkloadExecutor(spec, queue, fluid=fluid, rng=np.random.default_rng(seed),
                                requeue_on_worker_loss=requeue_on_worker_loss, start_time=start_time)

    def apply(ev: OverlayEvent) -> None:
        if executor.done:
            return
        if ev.kind == "worker_accepting":
            executor.add_worker(ev.worker_id, ev.job_id if ev.job_id is not None else -1, ev.slots, ev.time)
        elif ev.kind == "driver_elected":
            executor.start_driver(ev.worker_id if ev.slots else None, ev.time)
        elif ev.kind == "worker_lost":
            if executor.remove_workers([ev.worker_id], ev.time) and not requeue_on_worker_loss:
                executor.fail("task lost to worker expiry", ev.time)
        elif ev.kind == "run_failed":
            executor.fail("walltime expiration", ev.time)

    for i, ev in enumerate(events):
        queue.call_at(ev.time, Priority.OVERLAY, apply, ev, key=i)
    queue.run_until(math.inf, stop=lambda: executor.done)
    if not executor.done:
        executor.fail("no driver" if not executor.driver_started else "no live workers", queue.now)
    return executor.result()
