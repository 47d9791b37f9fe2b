"""Slurm-like batch queue: FCFS with a single head-job reservation and backfill.

Backfill considers at most ``backfill_user_cap`` eligible pending jobs per user
in one pass; the user's remaining eligible jobs are pushed back by
``backfill_reentry_delay``. Background load from other users is synthesized by
:class:`BackgroundLoad`, a per-node busy/free renewal process whose realization
depends only on its seed, never on the experiment jobs.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import math
from dataclasses import dataclass, field, fields
from enum import Enum
from typing import Iterable, NamedTuple, Protocol

import numpy as np

from .cluster import (
    ClusterProfile,
    NodeClass,
    ResourceRequest,
    UnsatisfiableRequest,
    check_time,
    smallest_fitting_class,
    validate_request,
)
from .events import EventQueue, Priority


class JobState(str, Enum):
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    TIMEOUT = "TIMEOUT"
    CANCELLED = "CANCELLED"

    @property
    def terminal(self) -> bool:
        return self in (JobState.COMPLETED, JobState.TIMEOUT, JobState.CANCELLED)


_TRANSITIONS = {
    JobState.PENDING: {JobState.RUNNING, JobState.CANCELLED},
    JobState.RUNNING: {JobState.COMPLETED, JobState.TIMEOUT},
}


class SchedulerError(RuntimeError):
    pass


@dataclass
class BatchJob:
    id: int
    user: str
    request: ResourceRequest
    submit_time: float
    state: JobState = JobState.PENDING
    start_time: float | None = None
    end_time: float | None = None
    assigned_nodes: list[tuple[NodeClass, int]] = field(default_factory=list)
    backfill_eligible_at: float = 0.0
    # Optional intrinsic run length; the scheduler completes the job after it.
    runtime: float | None = None
    reason: str | None = None

    def _move(self, state: JobState) -> None:
        if state not in _TRANSITIONS.get(self.state, ()):
            raise SchedulerError(f"job {self.id}: illegal transition {self.state.value} -> {state.value}")
        self.state = state

    @property
    def node_count(self) -> int:
        return sum(n for _, n in self.assigned_nodes)


def queue_delay(job: BatchJob) -> float:
    if job.start_time is None:
        raise SchedulerError(f"job {job.id}: no start time")
    return job.start_time - job.submit_time


class ContentionKind(str, Enum):
    NONE = "NONE"
    FIXED_DELAYS = "FIXED_DELAYS"
    STOCHASTIC = "STOCHASTIC"


@dataclass(frozen=True)
class ContentionModel:
    """Background load on the cluster.

    ``FIXED_DELAYS`` skips the queue entirely: the i-th submitted job starts at
    its submit time plus ``fixed_delays[i]``. ``STOCHASTIC`` keeps a stationary
    fraction ``busy_fraction`` of nodes busy; each busy node is released at
    ``release_rate`` per hour. ``initial_busy_fraction`` (defaults to
    ``busy_fraction``) sets the state at time zero, so a saturated cluster that
    drains towards its stationary load is ``initial_busy_fraction=1``.
    """

    kind: ContentionKind = ContentionKind.NONE
    fixed_delays: tuple[float, ...] | None = None
    busy_fraction: float | None = None
    release_rate: float | None = None
    seed: int = 0
    initial_busy_fraction: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ContentionKind(self.kind))
        if self.fixed_delays is not None:
            object.__setattr__(self, "fixed_delays", tuple(check_time(d, "fixed delay") for d in self.fixed_delays))
        if self.kind is ContentionKind.FIXED_DELAYS and self.fixed_delays is None:
            raise ValueError("FIXED_DELAYS contention requires fixed_delays")
        if self.kind is ContentionKind.STOCHASTIC:
            if self.busy_fraction is None or self.release_rate is None:
                raise ValueError("STOCHASTIC contention requires busy_fraction and release_rate")
            if not 0.0 <= self.busy_fraction <= 1.0:
                raise ValueError("busy_fraction must lie in [0, 1]")
            if not self.release_rate > 0:
                raise ValueError("release_rate must be positive")
            if self.initial_busy_fraction is not None and not 0.0 <= self.initial_busy_fraction <= 1.0:
                raise ValueError("initial_busy_fraction must lie in [0, 1]")

    def with_seed(self, seed: int) -> "ContentionModel":
        return ContentionModel(self.kind, self.fixed_delays, self.busy_fraction,
                               self.release_rate, seed, self.initial_busy_fraction)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["kind"] = self.kind.value
        if self.fixed_delays is not None:
            out["fixed_delays"] = list(self.fixed_delays)
        return {k: v for k, v in out.items() if v is not None}

    @classmethod
    def from_dict(cls, data: dict) -> "ContentionModel":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown contention fields: {sorted(unknown)}")
        return cls(**data)


class BackgroundLoad:
    """Seeded busy/free renewal process per node, evaluated lazily in time order."""

    def __init__(self, model: ContentionModel, profile: ClusterProfile) -> None:
        self._rng = np.random.default_rng(model.seed)
        stationary = float(model.busy_fraction)
        initial = stationary if model.initial_busy_fraction is None else float(model.initial_busy_fraction)
        self.release_rate = float(model.release_rate) / 3600.0
        if stationary >= 1.0:
            self.acquire_rate = math.inf
        else:
            self.acquire_rate = self.release_rate * stationary / (1.0 - stationary)
        self.nodes = [(c.name, i) for c in profile.node_classes for i in range(c.count)]
        busy = self._rng.random(len(self.nodes)) < initial
        self.busy = [bool(b) for b in busy]
        self.demand = {c.name: 0 for c in profile.node_classes}
        for (cname, _), b in zip(self.nodes, self.busy):
            self.demand[cname] += b
        self._next = []
        for idx in range(len(self.nodes)):
            self._schedule(idx, 0.0)

    def _draw(self, rate: float) -> float:
        if rate == math.inf:
            return 0.0
        if rate <= 0.0:
            return math.inf
        return float(self._rng.exponential(1.0 / rate))

    def _schedule(self, idx: int, now: float) -> None:
        delay = self._draw(self.release_rate if self.busy[idx] else self.acquire_rate)
        if delay != math.inf:
            heapq.heappush(self._next, (now + delay, idx))

    def peek_time(self) -> float:
        return self._next[0][0] if self._next else math.inf

    def pop(self) -> tuple[float, str, int, bool]:
        """Apply the next node transition; returns (time, class, node index, busy)."""
        time, idx = heapq.heappop(self._next)
        self.busy[idx] = not self.busy[idx]
        cname, node = self.nodes[idx]
        self.demand[cname] += 1 if self.busy[idx] else -1
        self._schedule(idx, time)
        return time, cname, node, self.busy[idx]


def contention_stream(model: ContentionModel, profile: ClusterProfile, until: float) -> list[tuple]:
    if model.kind is not ContentionKind.STOCHASTIC:
        return []
    load = BackgroundLoad(model, profile)
    out = [(0.0, c, -1, n) for c, n in load.demand.items()]
    while load.peek_time() <= until:
        out.append(load.pop())
    return out


def stream_digest(events: Iterable[tuple]) -> str:
    h = hashlib.sha256()
    for ev in events:
        h.update(repr(ev).encode())
    return h.hexdigest()


class LogEvent(NamedTuple):
    time_s: float
    event_kind: str
    job_id: int | None
    detail: str


def write_event_log(path, events: Iterable[LogEvent], header: str | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time_s", "event_kind", "job_id", "detail"])
        for ev in events:
            writer.writerow([f"{ev.time_s:.3f}", ev.event_kind, "" if ev.job_id is None else ev.job_id, ev.detail])


class JobListener(Protocol):
    def on_job_start(self, job: BatchJob, now: float) -> None: ...

    def on_job_end(self, job: BatchJob, now: float) -> None: ...


@dataclass
class PassReport:
    time: float
    started: list[tuple[int, str]] = field(default_factory=list)
    deferred: list[int] = field(default_factory=list)
    head_id: int | None = None
    reservation_before: float | None = None
    reservation_after: float | None = None


def _fmt_nodes(assigned: list[tuple[NodeClass, int]]) -> str:
    return ",".join(f"{c.name}:{n}" for c, n in assigned)


class BatchScheduler:
    """Discrete-event batch scheduler over one :class:`ClusterProfile`.

    External components share :attr:`queue` to schedule their own events and
    register as listeners to learn about job starts and ends.
    """

    def __init__(
        self,
        profile: ClusterProfile,
        contention: ContentionModel | None = None,
        *,
        queue: EventQueue | None = None,
        log: list[LogEvent] | None = None,
        record_passes: bool = False,
    ) -> None:
        self.profile = profile
        self.contention = contention or ContentionModel()
        self.queue = queue if queue is not None else EventQueue()
        self.log: list[LogEvent] = log if log is not None else []
        self.listeners: list[JobListener] = []
        self.jobs: dict[int, BatchJob] = {}
        self.pending: list[BatchJob] = []
        self.running: dict[int, BatchJob] = {}
        self.assigned = {c.name: 0 for c in profile.node_classes}
        self.background = {c.name: 0 for c in profile.node_classes}
        self.contention_log: list[tuple] = []
        self.pass_reports: list[PassReport] | None = [] if record_passes else None
        self._pass_event = None
        self._last_pass = -math.inf
        self._timers: dict[int, list] = {}
        self._submitted = 0
        self._stopped = False
        self._bg: BackgroundLoad | None = None
        if self.contention.kind is ContentionKind.STOCHASTIC:
            self._bg = BackgroundLoad(self.contention, profile)
            self.contention_log.extend((0.0, c, -1, n) for c, n in self._bg.demand.items())
            self._rebalance()
            self._schedule_background()

    @property
    def now(self) -> float:
        return self.queue.now

    def _log(self, kind: str, job_id: int | None, detail: str = "") -> None:
        self.log.append(LogEvent(self.now, kind, job_id, detail))

    # node accounting -----------------------------------------------------

    def free_nodes(self, class_name: str) -> int:
        count = self.profile.node_class(class_name).count
        return count - self.assigned[class_name] - self.background[class_name]

    def node_usage(self) -> dict[str, tuple[int, int, int]]:
        """Per class: (nodes held by jobs, nodes held by background load, class size)."""
        return {c.name: (self.assigned[c.name], self.background[c.name], c.count)
                for c in self.profile.node_classes}

    def _rebalance(self) -> None:
        if self._bg is None:
            return
        for c in self.profile.node_classes:
            self.background[c.name] = min(self._bg.demand[c.name], c.count - self.assigned[c.name])

    def _schedule_background(self) -> None:
        t = self._bg.peek_time()
        if t != math.inf:
            self.queue.call_at(max(t, self.now), Priority.CONTENTION, self._on_background)

    def _on_background(self) -> None:
        self.contention_log.append(self._bg.pop())
        self._rebalance()
        self._schedule_background()

    def _try_allocate(self, request: ResourceRequest) -> list[tuple[NodeClass, int]] | None:
        need = request.nodes
        plan = []
        for c in self.profile.fitting_classes(request):
            take = min(need, self.free_nodes(c.name))
            if take > 0:
                plan.append((c, take))
                need -= take
            if need == 0:
                return plan
        return None

    def reservation(self, job: BatchJob, now: float | None = None) -> float:
        """Earliest time ``job`` could start if every running job used its full walltime.

        Background-held nodes are assumed never to come back; ``inf`` when the
        request cannot be met from experiment-job releases alone.
        """
        now = self.now if now is None else now
        fitting = {c.name for c in self.profile.fitting_classes(job.request)}
        free = sum(self.free_nodes(c) for c in fitting)
        need = job.request.nodes
        if free >= need:
            return now
        releases = sorted(
            (j.start_time + j.request.walltime, j.id, n)
            for j in self.running.values()
            for c, n in j.assigned_nodes
            if c.name in fitting
        )
        for t, _, n in releases:
            free += n
            if free >= need:
                return t
        return math.inf

    # queue operations -----------------------------------------------------

    def submit(self, job: BatchJob) -> BatchJob:
        if job.state is not JobState.PENDING:
            raise SchedulerError(f"job {job.id} must be PENDING to submit")
        if job.id in self.jobs:
            raise SchedulerError(f"duplicate job id {job.id}")
        if job.submit_time > self.now:
            self.jobs[job.id] = job
            self.queue.call_at(job.submit_time, Priority.SUBMIT, self._enqueue, job, key=job.id)
        else:
            job.submit_time = self.now if job.submit_time < self.now else job.submit_time
            self.jobs[job.id] = job
            self._enqueue(job)
        return job

    def _enqueue(self, job: BatchJob) -> None:
        if job.state is not JobState.PENDING:
            return
        job.backfill_eligible_at = job.submit_time
        self._log("submit", job.id, f"nodes={job.request.nodes} mem={job.request.memory_per_node_gb:g}")
        try:
            validate_request(self.profile, job.request)
        except UnsatisfiableRequest as exc:
            job.reason = str(exc)
            self._cancel(job)
            return
        index = self._submitted
        self._submitted += 1
        if self.contention.kind is ContentionKind.FIXED_DELAYS:
            delays = self.contention.fixed_delays
            if index >= len(delays):
                job.reason = f"no fixed delay for submission #{index} ({len(delays)} given)"
                self._cancel(job)
                return
            ev = self.queue.call_at(job.submit_time + delays[index], Priority.PASS, self._start_fixed, job, key=job.id)
            self._timers[job.id] = [ev]
            return
        self.pending.append(job)
        self._ensure_pass()

    def _ensure_pass(self) -> None:
        if self._pass_event is not None and not self._pass_event.cancelled:
            return
        interval = self.profile.scheduler_pass_interval
        t = math.ceil(self.now / interval) * interval
        if t < self.now:
            t += interval
        if t <= self._last_pass:
            t = self._last_pass + interval
        self._pass_event = self.queue.call_at(t, Priority.PASS, self._on_pass)

    def _on_pass(self) -> None:
        self._pass_event = None
        self._last_pass = self.now
        self.scheduling_pass(self.now)
        if self.pending:
            self._ensure_pass()

    def scheduling_pass(self, now: float | None = None) -> list[tuple[int, float]]:
        """Run one pass; returns ``(job id, start time)`` for every job started."""
        now = self.now if now is None else now
        report = PassReport(now)
        cap = self.profile.backfill_user_cap
        considered: list[BatchJob] = []
        per_user: dict[str, int] = {}
        for job in sorted(self.pending, key=lambda j: (j.submit_time, j.id)):
            if job.backfill_eligible_at > now:
                continue
            if per_user.get(job.user, 0) >= cap:
                job.backfill_eligible_at = now + self.profile.backfill_reentry_delay
                report.deferred.append(job.id)
                self._log("defer", job.id, f"eligible_at={job.backfill_eligible_at:.3f}")
                continue
            per_user[job.user] = per_user.get(job.user, 0) + 1
            considered.append(job)

        head: BatchJob | None = None
        limit = math.inf
        for job in considered:
            if head is None:
                plan = self._try_allocate(job.request)
                if plan is not None:
                    self._start(job, plan, "fcfs")
                    report.started.append((job.id, "fcfs"))
                    continue
                head = job
                limit = self.reservation(job, now)
                report.head_id = job.id
                report.reservation_before = limit
            elif now + job.request.walltime <= limit:
                plan = self._try_allocate(job.request)
                if plan is not None:
                    self._start(job, plan, "backfill")
                    report.started.append((job.id, "backfill"))
        if head is not None:
            report.reservation_after = self.reservation(head, now)
        if self.pass_reports is not None:
            self.pass_reports.append(report)
        return [(jid, now) for jid, _ in report.started]

    def _start(self, job: BatchJob, plan: list[tuple[NodeClass, int]], how: str) -> None:
        self.pending.remove(job)
        for c, n in plan:
            self.assigned[c.name] += n
        self._begin(job, plan, how)

    def _start_fixed(self, job: BatchJob) -> None:
        if job.state is not JobState.PENDING:
            return
        self._begin(job, [(smallest_fitting_class(self.profile, job.request), job.request.nodes)], "fixed")

    def _begin(self, job: BatchJob, plan: list[tuple[NodeClass, int]], how: str) -> None:
        job._move(JobState.RUNNING)
        job.start_time = self.now
        job.assigned_nodes = list(plan)
        self.running[job.id] = job
        self._log("start", job.id, f"{how} {_fmt_nodes(plan)}")
        timers = [self.queue.call_at(job.start_time + job.request.walltime, Priority.COMPLETION,
                                     self._end, job, JobState.TIMEOUT, key=job.id)]
        if job.runtime is not None and job.runtime < job.request.walltime:
            timers.append(self.queue.call_at(job.start_time + job.runtime, Priority.COMPLETION,
                                             self._end, job, JobState.COMPLETED, key=job.id))
        self._timers[job.id] = timers
        for listener in list(self.listeners):
            listener.on_job_start(job, self.now)

    def _end(self, job: BatchJob, state: JobState) -> None:
        if job.state is not JobState.RUNNING:
            return
        job._move(state)
        job.end_time = self.now
        for ev in self._timers.pop(job.id, []):
            ev.cancel()
        del self.running[job.id]
        if self.contention.kind is not ContentionKind.FIXED_DELAYS:
            for c, n in job.assigned_nodes:
                self.assigned[c.name] -= n
            self._rebalance()
        self._log(state.value.lower(), job.id, _fmt_nodes(job.assigned_nodes))
        for listener in list(self.listeners):
            listener.on_job_end(job, self.now)
        if self.pending:
            self._ensure_pass()

    def _cancel(self, job: BatchJob) -> None:
        job._move(JobState.CANCELLED)
        job.end_time = self.now
        if job in self.pending:
            self.pending.remove(job)
        for ev in self._timers.pop(job.id, []):
            ev.cancel()
        self._log("cancel", job.id, job.reason or "")
        for listener in list(self.listeners):
            listener.on_job_end(job, self.now)

    def finish_job(self, job_id: int, state: JobState = JobState.COMPLETED) -> None:
        """End a job from outside: RUNNING jobs finish with ``state``, PENDING ones are cancelled."""
        job = self.jobs.get(job_id)
        if job is None:
            return
        if job.state is JobState.RUNNING:
            self._end(job, state)
        elif job.state is JobState.PENDING:
            self._cancel(job)

    def cancel_job(self, job_id: int, reason: str = "cancelled") -> None:
        job = self.jobs[job_id]
        if job.state is JobState.PENDING:
            job.reason = reason
            self._cancel(job)

    def stop(self) -> None:
        self._stopped = True

    def advance(self, until: float) -> list[LogEvent]:
        """Process every event up to and including ``until``; returns the new log entries."""
        if until < self.now:
            raise SchedulerError(f"cannot advance backwards from {self.now} to {until}")
        mark = len(self.log)
        self.queue.run_until(until, stop=lambda: self._stopped)
        return self.log[mark:]
