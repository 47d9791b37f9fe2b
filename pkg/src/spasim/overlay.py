"""Spark-standalone-style overlay cluster living inside batch allocations.

One :class:`OverlayCluster` tracks the masters, workers and the driver of a
single application. Batch deployments run the driver in client mode (outside
any worker); pilot deployments run it in cluster mode, where it takes one task
slot on a worker of the pilot that won the lockfile election. That is the
source of the one-slot difference between the two deployments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple

import numpy as np

from .scheduler import BatchJob, JobState

EXECUTOR_MEMORY_FRACTION = 0.95


class OverlayError(RuntimeError):
    pass


class OverlayRole(str, Enum):
    MASTER = "MASTER"
    WORKER = "WORKER"
    DRIVER = "DRIVER"


class DeployMode(str, Enum):
    CLIENT = "CLIENT"
    CLUSTER = "CLUSTER"


class ExpiryOutcome(str, Enum):
    RUN_FAILED = "RUN_FAILED"
    DEGRADED = "DEGRADED"


CLIENT_HOST = "CLIENT"


@dataclass
class Worker:
    id: int
    host_job: int
    registered_at: float
    cores: int
    memory_gb: float
    slots: int
    accepting_tasks_at: float
    executor_failed: bool = False


@dataclass
class Master:
    host_job: int
    active: bool


class OverlayEvent(NamedTuple):
    """Overlay state change; ``slots`` is the slot count gained (accepting) or consumed (driver)."""

    time: float
    kind: str
    job_id: int | None
    worker_id: int | None = None
    slots: int = 0


@dataclass
class OverlayCluster:
    deploy_mode: DeployMode
    join_transfer_delay: float = 0.0
    executor_fail_prob: float = 0.0
    rng: np.random.Generator | None = None
    masters: list[Master] = field(default_factory=list)
    workers: dict[int, Worker] = field(default_factory=dict)
    driver_host: int | str | None = None
    driver_job: int | None = None
    driver_started_at: float | None = None
    lock_held_by: int | None = None
    events: list[OverlayEvent] = field(default_factory=list)
    _next_worker: int = 0
    _live_jobs: set = field(default_factory=set)

    def __post_init__(self) -> None:
        self.deploy_mode = DeployMode(self.deploy_mode)
        if not 0.0 <= self.executor_fail_prob <= 1.0:
            raise ValueError("executor_fail_prob must lie in [0, 1]")
        if self.executor_fail_prob > 0 and self.rng is None:
            raise ValueError("executor_fail_prob > 0 needs a random generator")

    # lifecycle -----------------------------------------------------------

    def start_workers_for_allocation(
        self,
        job: BatchJob,
        registration_delay: float,
        join_transfer_delay: float | None = None,
        now: float = 0.0,
    ) -> list[Worker]:
        """Start one master and ``tasks_per_node`` workers on every node of ``job``.

        Workers registering after the driver has started pay
        ``join_transfer_delay`` before they accept tasks.
        """
        if job.state is not JobState.RUNNING:
            raise OverlayError(f"job {job.id} is {job.state.value}, not RUNNING")
        if job.id in self._live_jobs:
            raise OverlayError(f"job {job.id} already hosts overlay processes")
        if join_transfer_delay is not None:
            self.join_transfer_delay = join_transfer_delay
        req = job.request
        self._live_jobs.add(job.id)
        self.masters.append(Master(job.id, active=not any(m.active for m in self.masters)))
        registered = now + registration_delay
        share = req.memory_per_node_gb / req.tasks_per_node
        created = []
        for _ in range(req.nodes * req.tasks_per_node):
            failed = bool(self.executor_fail_prob > 0 and self.rng.random() < self.executor_fail_prob)
            worker = Worker(
                id=self._next_worker,
                host_job=job.id,
                registered_at=registered,
                cores=req.cpus_per_task,
                memory_gb=EXECUTOR_MEMORY_FRACTION * share,
                slots=req.cpus_per_task,
                accepting_tasks_at=math.inf if failed else self._accepting_time(registered),
                executor_failed=failed,
            )
            self._next_worker += 1
            self.workers[worker.id] = worker
            created.append(worker)
        return created

    def _accepting_time(self, registered_at: float) -> float:
        if self.driver_started_at is not None and registered_at > self.driver_started_at:
            return registered_at + self.join_transfer_delay
        return registered_at

    def job_workers(self, job_id: int) -> list[Worker]:
        return [w for w in self.workers.values() if w.host_job == job_id]

    def register(self, job_id: int, now: float) -> list[Worker]:
        """Record registration of ``job_id``'s workers with the master at ``now``."""
        workers = [w for w in self.job_workers(job_id) if w.registered_at <= now]
        for w in workers:
            self.events.append(OverlayEvent(now, "worker_registered", job_id, w.id))
        return workers

    def mark_accepting(self, worker_id: int, now: float) -> Worker:
        w = self.workers[worker_id]
        if w.accepting_tasks_at > now:
            raise OverlayError(f"worker {worker_id} not ready before {w.accepting_tasks_at}")
        self.events.append(OverlayEvent(now, "worker_accepting", w.host_job, w.id, w.slots))
        return w

    def elect_driver(self, candidate_job: int, now: float) -> bool:
        """Lockfile election: the first candidate to try wins, later ones lose.

        Same-timestamp candidates must be presented in ascending job id order;
        the simulation event queue guarantees that ordering.
        """
        if candidate_job not in self._live_jobs:
            raise OverlayError(f"job {candidate_job} has no running allocation")
        if self.lock_held_by is not None:
            return False
        if self.deploy_mode is DeployMode.CLUSTER:
            ready = [w for w in self.job_workers(candidate_job) if w.registered_at <= now]
            if not ready:
                raise OverlayError(f"job {candidate_job} has no registered worker to host the driver")
            usable = [w for w in ready if not w.executor_failed]
            host = min(usable or ready, key=lambda w: w.id).id
        else:
            host = CLIENT_HOST
        self.lock_held_by = candidate_job
        self.driver_job = candidate_job
        self.driver_host = host
        self.driver_started_at = now
        for w in self.workers.values():
            if not w.executor_failed and w.registered_at > now:
                w.accepting_tasks_at = w.registered_at + self.join_transfer_delay
        self.events.append(OverlayEvent(now, "driver_elected", candidate_job,
                                        None if host == CLIENT_HOST else host,
                                        1 if self.deploy_mode is DeployMode.CLUSTER else 0))
        return True

    @property
    def driver_running(self) -> bool:
        return self.driver_started_at is not None and self.driver_host is not None

    def available_task_slots(self, now: float) -> int:
        live = [w for w in self.workers.values() if w.accepting_tasks_at <= now]
        slots = sum(w.slots for w in live)
        if (self.deploy_mode is DeployMode.CLUSTER and self.driver_running
                and self.driver_started_at <= now and any(w.id == self.driver_host for w in live)):
            slots -= 1
        return slots

    def total_slots(self) -> int:
        return sum(w.slots for w in self.workers.values())

    def _drop_job(self, job_id: int, now: float) -> list[int]:
        lost = [w.id for w in self.job_workers(job_id)]
        for wid in lost:
            del self.workers[wid]
            self.events.append(OverlayEvent(now, "worker_lost", job_id, wid))
        self.masters = [m for m in self.masters if m.host_job != job_id]
        if self.masters and not any(m.active for m in self.masters):
            # Bookkeeping only: no recovery of master state is modeled.
            self.masters[0].active = True
        self._live_jobs.discard(job_id)
        return lost

    def handle_allocation_expiry(self, job_id: int, now: float) -> tuple[ExpiryOutcome, list[int]]:
        """Remove an expired allocation; returns the outcome and the lost worker ids."""
        if job_id not in self._live_jobs:
            raise OverlayError(f"unknown job {job_id}")
        lost = self._drop_job(job_id, now)
        hosted_driver = self.driver_job == job_id
        if hosted_driver:
            self.driver_host = None
        if hosted_driver or not self.workers:
            self.events.append(OverlayEvent(now, "run_failed", job_id))
            return ExpiryOutcome.RUN_FAILED, lost
        return ExpiryOutcome.DEGRADED, lost

    def release_allocation(self, job_id: int, now: float) -> list[int]:
        """Orderly shutdown of an allocation (idle exit or end of application)."""
        if job_id not in self._live_jobs:
            return []
        return self._drop_job(job_id, now)

    def live_jobs(self) -> set[int]:
        return set(self._live_jobs)
