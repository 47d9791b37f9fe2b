"""End-to-end run: batch queue, overlay clusters, orchestrators and workloads.

Several applications may share one simulated cluster (and one user's backfill
cap); each gets its own orchestrator, overlay and executor.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import ClusterProfile
from .events import EventQueue, Priority
from .orchestrator import Orchestrator, SubmissionMode, SubmissionPlan
from .overlay import ExpiryOutcome, OverlayCluster
from .scheduler import BatchJob, BatchScheduler, ContentionModel, JobState, LogEvent, queue_delay
from .workload import RunResult, WorkloadExecutor, WorkloadSpec

DEFAULT_HORIZON_S = 7 * 86400.0


@dataclass(frozen=True)
class RunSettings:
    registration_delay: float = 0.0
    join_transfer_delay: float = 0.0
    executor_fail_prob: float = 0.0
    fluid: bool = False
    requeue_on_worker_loss: bool = False
    horizon_s: float = DEFAULT_HORIZON_S

    def __post_init__(self) -> None:
        if self.registration_delay < 0 or self.join_transfer_delay < 0:
            raise ValueError("ramp-up delays must be non-negative")
        if not 0.0 <= self.executor_fail_prob <= 1.0:
            raise ValueError("executor_fail_prob must lie in [0, 1]")
        if self.horizon_s <= 0:
            raise ValueError("horizon_s must be positive")


@dataclass
class Application:
    name: str
    plan: SubmissionPlan
    workload: WorkloadSpec
    submit_time: float
    orchestrator: Orchestrator
    overlay: OverlayCluster
    executor: WorkloadExecutor
    done: bool = False
    result: RunResult | None = None
    _flushed: int = field(default=0, repr=False)


class Simulation:
    def __init__(
        self,
        profile: ClusterProfile,
        contention: ContentionModel | None = None,
        settings: RunSettings | None = None,
        seed: int = 0,
        *,
        record_passes: bool = False,
    ) -> None:
        self.profile = profile
        self.settings = settings or RunSettings()
        self.seed = seed
        self.queue = EventQueue()
        self.log: list[LogEvent] = []
        self.scheduler = BatchScheduler(profile, contention, queue=self.queue, log=self.log,
                                        record_passes=record_passes)
        self.scheduler.listeners.append(self)
        self.apps: list[Application] = []
        self._job_app: dict[int, Application] = {}
        self._ids = itertools.count(1)
        self._started = False

    def add_application(self, name: str, plan: SubmissionPlan, workload: WorkloadSpec,
                        submit_time: float = 0.0) -> Application:
        if self._started:
            raise RuntimeError("applications must be added before run()")
        index = len(self.apps)
        orchestrator = Orchestrator(plan, ids=self._ids, log=self.log)
        overlay = OverlayCluster(
            plan.deploy_mode,
            join_transfer_delay=self.settings.join_transfer_delay,
            executor_fail_prob=self.settings.executor_fail_prob,
            rng=np.random.default_rng([self.seed, 2, index]),
        )
        app = Application(name, plan, workload, submit_time, orchestrator, overlay, None)
        # Same jitter stream for every application: equal total CPU time across modes.
        app.executor = WorkloadExecutor(
            workload, self.queue,
            fluid=self.settings.fluid,
            rng=np.random.default_rng([self.seed, 1]),
            requeue_on_worker_loss=self.settings.requeue_on_worker_loss,
            start_time=submit_time,
            on_finish=lambda now, app=app: self._terminate(app, now),
            on_activity=orchestrator.note_activity,
        )
        self.apps.append(app)
        return app

    # driving ------------------------------------------------------------

    def run(self) -> list[RunResult]:
        self._started = True
        interval = self.profile.scheduler_pass_interval
        for app in self.apps:
            self.queue.call_at(app.submit_time, Priority.SUBMIT, self._submit_initial, app)
            if app.plan.mode is SubmissionMode.PILOT:
                first_tick = (math.floor(app.submit_time / interval) + 1) * interval
                self.queue.call_at(first_tick, Priority.TICK, self._tick, app)
        horizon = max(app.submit_time for app in self.apps) + self.settings.horizon_s
        self.queue.call_at(horizon, Priority.TICK, self._horizon)
        self.scheduler.advance(math.inf)
        for app in self.apps:
            if not app.done:
                self._fail(app, "stalled", self.queue.now)
        return [app.result for app in self.apps]

    def _flush(self, app: Application) -> None:
        for ev in app.overlay.events[app._flushed:]:
            detail = f"app={app.name}"
            if ev.worker_id is not None:
                detail += f" worker={ev.worker_id}"
            self.log.append(LogEvent(ev.time, ev.kind, ev.job_id, detail))
        app._flushed = len(app.overlay.events)

    def _submit(self, app: Application, jobs: list[BatchJob]) -> None:
        for job in jobs:
            self._job_app[job.id] = app
            if app.done:
                job._move(JobState.CANCELLED)
                continue
            self.scheduler.submit(job)

    def _submit_initial(self, app: Application) -> None:
        self._submit(app, app.orchestrator.initial_submit(self.queue.now))

    def _tick(self, app: Application) -> None:
        if app.done:
            return
        now = self.queue.now
        orch = app.orchestrator
        orch.draining = app.executor.driver_started and not app.executor.queued_work
        for job_id in orch.check_idle(app.overlay, now, app.executor.busy_jobs):
            orch.record_idle_exit(job_id, now)
            self.scheduler.finish_job(job_id, JobState.COMPLETED)
        self._submit(app, orch.maintain(now))
        if not app.done:
            self.queue.call_at(now + self.profile.scheduler_pass_interval, Priority.TICK, self._tick, app)

    def _horizon(self) -> None:
        for app in self.apps:
            if not app.done:
                self._fail(app, "horizon reached before completion", self.queue.now)

    # scheduler callbacks ----------------------------------------------------

    def on_job_start(self, job: BatchJob, now: float) -> None:
        app = self._job_app[job.id]
        if app.done:
            self.scheduler.finish_job(job.id)
            return
        app.overlay.start_workers_for_allocation(job, self.settings.registration_delay,
                                                 self.settings.join_transfer_delay, now)
        app.orchestrator.note_start(job.id, now)
        self.queue.call_at(now + self.settings.registration_delay, Priority.OVERLAY,
                           self._register, app, job, key=job.id)

    def on_job_end(self, job: BatchJob, now: float) -> None:
        app = self._job_app[job.id]
        if job.state is JobState.CANCELLED:
            # Scheduler-side cancellations (unsatisfiable request, exhausted
            # delays) carry a reason; the run cannot make progress without them.
            if job.reason and not app.done:
                self._fail(app, job.reason, now)
            return
        if app.done:
            app.overlay.release_allocation(job.id, now)
            return
        if job.state is JobState.TIMEOUT:
            outcome, lost = app.overlay.handle_allocation_expiry(job.id, now)
            self._flush(app)
            if outcome is ExpiryOutcome.RUN_FAILED:
                self._fail(app, "walltime expiration", now)
                return
            if app.executor.remove_workers(lost, now) and not self.settings.requeue_on_worker_loss:
                self._fail(app, "task lost to worker expiry", now)
        else:
            lost = app.overlay.release_allocation(job.id, now)
            self._flush(app)
            app.executor.remove_workers(lost, now)

    def _register(self, app: Application, job: BatchJob) -> None:
        if app.done or job.state is not JobState.RUNNING:
            return
        now = self.queue.now
        overlay = app.overlay
        workers = overlay.register(job.id, now)
        # Batch: the allocation's workers are all up, so the driver starts now.
        # Pilot: every pilot races for the lock as soon as its worker registers.
        if overlay.elect_driver(job.id, now):
            host = overlay.driver_host if isinstance(overlay.driver_host, int) else None
            app.executor.start_driver(host, now)
        for w in workers:
            if w.executor_failed:
                self.log.append(LogEvent(now, "executor_failed", job.id, f"app={app.name} worker={w.id}"))
            else:
                self.queue.call_at(w.accepting_tasks_at, Priority.OVERLAY, self._accept, app, w.id, key=job.id)
        self._flush(app)

    def _accept(self, app: Application, worker_id: int) -> None:
        if app.done or worker_id not in app.overlay.workers:
            return
        w = app.overlay.mark_accepting(worker_id, self.queue.now)
        self._flush(app)
        app.executor.add_worker(w.id, w.host_job, w.slots, self.queue.now)

    # termination ------------------------------------------------------------

    def _fail(self, app: Application, reason: str, now: float) -> None:
        if app.done:
            return
        app.executor.fail(reason, now)
        self._terminate(app, now)

    def _terminate(self, app: Application, now: float) -> None:
        if app.done:
            return
        app.done = True
        self.log.append(LogEvent(now, "app_failed" if app.executor.failed else "app_done", None,
                                 f"app={app.name}" + (f" reason={app.executor.failure_reason}"
                                                      if app.executor.failed else "")))
        for job_id in app.orchestrator.submitted:
            self.scheduler.finish_job(job_id, JobState.COMPLETED)
        delays = [queue_delay(app.orchestrator.jobs[j]) for j in app.orchestrator.submitted
                  if app.orchestrator.jobs[j].start_time is not None]
        app.result = app.executor.result(delays)
        if all(a.done for a in self.apps):
            self.scheduler.stop()


def simulate(
    profile: ClusterProfile,
    plan: SubmissionPlan,
    workload: WorkloadSpec,
    contention: ContentionModel | None = None,
    settings: RunSettings | None = None,
    seed: int = 0,
) -> RunResult:
    """Simulate a single application alone on the cluster."""
    sim = Simulation(profile, contention, settings, seed)
    sim.add_application("app", plan, workload)
    return sim.run()[0]
