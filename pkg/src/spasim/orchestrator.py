"""Batch and pilot submission logic: initial submission, pilot top-up, idle exit."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator

from .cluster import ResourceRequest
from .overlay import DeployMode, OverlayCluster
from .scheduler import BatchJob, JobState, LogEvent

DEFAULT_IDLE_TIMEOUT = 600.0


class SubmissionMode(str, Enum):
    BATCH = "BATCH"
    PILOT = "PILOT"


class PlanError(ValueError):
    pass


@dataclass(frozen=True)
class SubmissionPlan:
    mode: SubmissionMode
    per_job_request: ResourceRequest
    pilot_count: int = 1
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    deploy_mode: DeployMode | None = None

    def __post_init__(self) -> None:
        mode = SubmissionMode(self.mode)
        object.__setattr__(self, "mode", mode)
        expected = DeployMode.CLIENT if mode is SubmissionMode.BATCH else DeployMode.CLUSTER
        if self.deploy_mode is None:
            object.__setattr__(self, "deploy_mode", expected)
        elif DeployMode(self.deploy_mode) is not expected:
            raise PlanError(f"{mode.value} submission requires {expected.value} deploy mode")
        else:
            object.__setattr__(self, "deploy_mode", DeployMode(self.deploy_mode))
        if self.pilot_count < 1:
            raise PlanError("pilot_count must be >= 1")
        if mode is SubmissionMode.BATCH and self.pilot_count != 1:
            raise PlanError("batch submission uses exactly one job")
        if mode is SubmissionMode.PILOT and self.per_job_request.nodes != 1:
            raise PlanError("each pilot requests exactly one node")
        if self.idle_timeout < 0:
            raise PlanError("idle_timeout must be non-negative")


class Orchestrator:
    """Keeps ``pilot_count`` pilots queued or running, and retires idle ones.

    ``draining`` is set by the caller once the application has no unstarted
    work left; from then on expired or retired pilots are not replaced.
    """

    def __init__(
        self,
        plan: SubmissionPlan,
        *,
        user: str = "spa",
        ids: Iterator[int] | None = None,
        log: list[LogEvent] | None = None,
    ) -> None:
        self.plan = plan
        self.user = user
        self._ids = ids if ids is not None else itertools.count(1)
        self.log = log if log is not None else []
        self.submitted: list[int] = []
        self.jobs: dict[int, BatchJob] = {}
        self.last_activity: dict[int, float] = {}
        self.draining = False

    @property
    def live_pilot_count(self) -> int:
        return sum(1 for j in self.jobs.values() if j.state is JobState.RUNNING)

    @property
    def queued_pilot_count(self) -> int:
        return sum(1 for j in self.jobs.values() if j.state is JobState.PENDING)

    def _new_job(self, now: float) -> BatchJob:
        job = BatchJob(id=next(self._ids), user=self.user, request=self.plan.per_job_request, submit_time=now)
        self.submitted.append(job.id)
        self.jobs[job.id] = job
        return job

    def initial_submit(self, now: float) -> list[BatchJob]:
        if self.submitted:
            raise PlanError("initial submission already done")
        jobs = [self._new_job(now) for _ in range(self.plan.pilot_count)]
        if self.plan.mode is SubmissionMode.PILOT:
            for job in jobs:
                self.log.append(LogEvent(now, "pilot_submitted", job.id, ""))
        return jobs

    def maintain(self, now: float) -> list[BatchJob]:
        if self.plan.mode is SubmissionMode.BATCH or self.draining:
            return []
        missing = self.plan.pilot_count - self.live_pilot_count - self.queued_pilot_count
        jobs = [self._new_job(now) for _ in range(max(missing, 0))]
        for job in jobs:
            self.log.append(LogEvent(now, "pilot_topup", job.id, ""))
        return jobs

    def note_start(self, job_id: int, now: float) -> None:
        self.last_activity[job_id] = now

    def note_activity(self, job_id: int, now: float) -> None:
        if job_id in self.last_activity:
            self.last_activity[job_id] = max(self.last_activity[job_id], now)

    def check_idle(self, overlay: OverlayCluster, now: float, busy_jobs: Callable[[], set] | set = frozenset()) -> list[int]:
        """Running pilots with no task activity for ``idle_timeout`` that do not host the driver."""
        if self.plan.mode is SubmissionMode.BATCH:
            return []
        busy = busy_jobs() if callable(busy_jobs) else busy_jobs
        idle = []
        for job_id in self.submitted:
            job = self.jobs[job_id]
            if job.state is not JobState.RUNNING or job_id == overlay.driver_job or job_id in busy:
                continue
            if now - self.last_activity.get(job_id, now) >= self.plan.idle_timeout:
                idle.append(job_id)
        return idle

    def record_idle_exit(self, job_id: int, now: float) -> None:
        self.log.append(LogEvent(now, "pilot_idle_cancelled", job_id, ""))
