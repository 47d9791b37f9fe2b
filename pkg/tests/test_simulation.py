import math

from spasim.cluster import ResourceRequest, builtin_profile
from spasim.orchestrator import SubmissionMode, SubmissionPlan
from spasim.scheduler import ContentionModel, JobState
from spasim.simulation import RunSettings, Simulation, simulate
from spasim.workload import WorkloadSpec

BELUGA = builtin_profile("beluga-like", 10)
CONFIG1 = WorkloadSpec(task_delay_s=45)
BATCH = SubmissionPlan(SubmissionMode.BATCH, ResourceRequest(1, 112, 1, 16, 9000))


def pilots(n, mem, tasks, walltime=9000, idle=600.0):
    return SubmissionPlan(SubmissionMode.PILOT, ResourceRequest(1, mem, 1, tasks, walltime),
                          pilot_count=n, idle_timeout=idle)


def test_batch_config1_makespan():
    r = simulate(BELUGA, BATCH, CONFIG1)
    assert not r.failed and r.makespan_s == 5200.0 and r.avg_workers == 16.0
    assert r.per_job_queue_delay_s == [0.0]


def test_pilot_has_one_fewer_slot():
    r = simulate(BELUGA, pilots(8, 14, 2), CONFIG1, settings=RunSettings(fluid=True))
    assert r.avg_workers == 15.0
    assert math.isclose(r.makespan_s, 81250 / 15, rel_tol=1e-12)


def test_batch_walltime_expiry_fails_run():
    short = SubmissionPlan(SubmissionMode.BATCH, ResourceRequest(1, 112, 1, 16, 3000))
    r = simulate(BELUGA, short, CONFIG1)
    assert r.failed and r.failure_reason == "walltime expiration"


def test_driver_pilot_expiry_fails_run():
    r = simulate(BELUGA, pilots(8, 14, 2, walltime=3000), CONFIG1)
    assert r.failed and r.failure_reason == "walltime expiration"


def test_unsatisfiable_request_recorded_as_failure():
    huge = SubmissionPlan(SubmissionMode.BATCH, ResourceRequest(1, 900, 1, 16, 9000))
    r = simulate(BELUGA, huge, CONFIG1)
    assert r.failed and "unsatisfiable" in r.failure_reason


def test_idle_pilots_exit_but_driver_host_stays():
    sim = Simulation(BELUGA, settings=RunSettings())
    app = sim.add_application("p", pilots(16, 7, 1, idle=60.0), WorkloadSpec(chunks=20, iterations=1,
                                                                             increment_duration_s=600))
    (r,) = sim.run()
    assert not r.failed
    kinds = [(e.event_kind, e.job_id) for e in sim.log]
    cancelled = {j for k, j in kinds if k == "pilot_idle_cancelled"}
    driver_job = app.overlay.driver_job
    assert cancelled and driver_job not in cancelled
    assert all(app.orchestrator.jobs[j].state is JobState.COMPLETED for j in cancelled)


def test_ramp_up_delays_slow_pilots():
    fast = simulate(BELUGA, pilots(8, 14, 2), CONFIG1, settings=RunSettings(fluid=True))
    slow = simulate(BELUGA, pilots(8, 14, 2), CONFIG1,
                    settings=RunSettings(fluid=True, registration_delay=60, join_transfer_delay=120))
    assert slow.makespan_s > fast.makespan_s


def test_fixed_delays_shift_start():
    c = ContentionModel("FIXED_DELAYS", fixed_delays=(600.0,))
    r = simulate(BELUGA, BATCH, CONFIG1, c)
    assert r.per_job_queue_delay_s == [600.0] and r.makespan_s == 5800.0


def test_shared_cluster_applications_compete():
    sim = Simulation(builtin_profile("cedar-like", 1000))  # 2 nodes
    sim.add_application("a", BATCH, CONFIG1)
    sim.add_application("b", BATCH, CONFIG1)
    a, b = sim.run()
    assert not a.failed and not b.failed
    assert sorted([a.makespan_s, b.makespan_s]) == [5200.0, 5200.0]


def test_simulation_deterministic():
    c = ContentionModel("STOCHASTIC", busy_fraction=0.5, release_rate=6, seed=4)
    runs = [simulate(BELUGA, pilots(16, 7, 1), CONFIG1, c, seed=4) for _ in range(2)]
    assert runs[0].makespan_s == runs[1].makespan_s
    assert runs[0].trace.breakpoints == runs[1].trace.breakpoints
