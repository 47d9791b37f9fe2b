import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scenarios import check_scenario, random_scenario
from spasim.cluster import ClusterProfile, NodeClass, ResourceRequest, builtin_profile
from spasim.scheduler import (
    BatchJob,
    BatchScheduler,
    ContentionModel,
    JobState,
    SchedulerError,
    contention_stream,
    queue_delay,
    stream_digest,
    write_event_log,
)


def flat_profile(nodes=4, cap=10):
    return ClusterProfile("flat", (NodeClass("n", 128, 32, nodes),), cap)


def job(i, nodes, walltime, submit=0.0, runtime=None, user="u", mem=8.0):
    return BatchJob(i, user, ResourceRequest(nodes, mem, 1, 1, walltime), submit, runtime=runtime)


def starts(sched):
    return {j.id: j.start_time for j in sched.jobs.values()}


def test_hand_simulated_backfill():
    # 4 nodes. j1 takes 3; j2 (2 nodes) becomes head with reservation t=1000.
    # j3 would overrun the reservation; j4 fits in the gap and backfills.
    s = BatchScheduler(flat_profile(4), record_passes=True)
    for j in (job(1, 3, 1000), job(2, 2, 500), job(3, 1, 1200), job(4, 1, 600)):
        s.submit(j)
    s.advance(5000)
    assert starts(s) == {1: 0.0, 2: 1020.0, 3: 1020.0, 4: 0.0}
    first = s.pass_reports[0]
    assert first.started == [(1, "fcfs"), (4, "backfill")]
    assert first.head_id == 2 and first.reservation_before == 1000.0 and first.reservation_after == 1000.0
    assert s.jobs[1].state is JobState.TIMEOUT and s.jobs[1].end_time == 1000.0


def test_backfill_blocked_when_it_would_delay_head():
    s = BatchScheduler(flat_profile(2))
    for j in (job(1, 1, 300), job(2, 2, 300), job(3, 1, 301)):
        s.submit(j)
    s.advance(10_000)
    # j3 would end after j2's reservation at 300, so it waits behind the head.
    assert starts(s) == {1: 0.0, 2: 300.0, 3: 600.0}


def test_per_user_cap_defers_excess_by_180s():
    prof = builtin_profile("beluga-like", node_divisor=10)
    s = BatchScheduler(prof, record_passes=True)
    for i in range(16):
        s.submit(BatchJob(i + 1, "spa", ResourceRequest(1, 7, 1, 1, 9000), 0.0))
    s.advance(1000)
    st = starts(s)
    assert sorted(st.values()) == [0.0] * 10 + [180.0] * 6
    assert s.pass_reports[0].deferred == list(range(11, 17))
    assert all(s.jobs[i].backfill_eligible_at == 180.0 for i in range(11, 17))


def test_cap_is_per_user():
    s = BatchScheduler(flat_profile(8, cap=2))
    for i in range(6):
        s.submit(job(i + 1, 1, 100, user="ab"[i % 2]))
    s.advance(50)
    assert sum(j.state is JobState.RUNNING for j in s.jobs.values()) == 4


def test_submit_waits_for_next_pass():
    s = BatchScheduler(flat_profile())
    s.submit(job(1, 1, 100, submit=10.0))
    s.advance(1000)
    assert s.jobs[1].start_time == 30.0 and queue_delay(s.jobs[1]) == 20.0


def test_submit_at_pass_time_starts_in_that_pass():
    s = BatchScheduler(flat_profile())
    s.submit(job(1, 1, 100, submit=60.0))
    s.advance(1000)
    assert s.jobs[1].start_time == 60.0


def test_runtime_shorter_than_walltime_completes():
    s = BatchScheduler(flat_profile())
    s.submit(job(1, 1, 100, runtime=40))
    s.advance(1000)
    j = s.jobs[1]
    assert j.state is JobState.COMPLETED and j.end_time == 40.0


def test_walltime_kills_exactly():
    s = BatchScheduler(flat_profile())
    s.submit(job(1, 1, 100, runtime=400))
    s.advance(1000)
    j = s.jobs[1]
    assert j.state is JobState.TIMEOUT and j.end_time == 100.0


def test_unsatisfiable_request_cancelled_with_reason():
    s = BatchScheduler(flat_profile(2))
    s.submit(job(1, 3, 100))
    assert s.jobs[1].state is JobState.CANCELLED
    assert "unsatisfiable" in s.jobs[1].reason


def test_fixed_delays_bypass_queue():
    c = ContentionModel("FIXED_DELAYS", fixed_delays=(5.0, 0.0, 123.5))
    s = BatchScheduler(flat_profile(1), c)
    for i in range(3):
        s.submit(job(i + 1, 1, 1000, submit=10.0 * i))
    s.submit(job(4, 1, 1000, submit=40.0))
    s.advance(100_000)
    assert [s.jobs[i].start_time for i in (1, 2, 3)] == [5.0, 10.0, 143.5]
    assert s.jobs[4].state is JobState.CANCELLED and "no fixed delay" in s.jobs[4].reason


def test_illegal_transition_rejected():
    j = job(1, 1, 10)
    j._move(JobState.RUNNING)
    j._move(JobState.COMPLETED)
    with pytest.raises(SchedulerError):
        j._move(JobState.RUNNING)


def test_queue_delay_requires_start():
    with pytest.raises(SchedulerError):
        queue_delay(job(1, 1, 10))


def test_finish_pending_job_cancels():
    s = BatchScheduler(flat_profile(1))
    s.submit(job(1, 1, 100))
    s.submit(job(2, 1, 100))
    s.advance(0)
    s.finish_job(2)
    assert s.jobs[2].state is JobState.CANCELLED


def test_background_holds_nodes_and_releases():
    c = ContentionModel("STOCHASTIC", busy_fraction=0.0, release_rate=6.0, initial_busy_fraction=1.0, seed=3)
    s = BatchScheduler(flat_profile(4), c)
    assert s.free_nodes("n") == 0
    s.submit(job(1, 4, 100))
    s.advance(30)
    assert s.jobs[1].state is JobState.PENDING
    s.advance(20_000)
    assert s.jobs[1].start_time > 0 and s.jobs[1].start_time % 30 == 0


def test_stationary_busy_fraction():
    prof = ClusterProfile("big", (NodeClass("n", 64, 8, 400),), 10)
    c = ContentionModel("STOCHASTIC", busy_fraction=0.3, release_rate=10.0, seed=11)
    stream = contention_stream(c, prof, until=20 * 3600)
    busy = stream[0][3]
    samples = []
    next_sample = 3600.0
    for t, _, _, b in stream[1:]:
        while t > next_sample:
            samples.append(busy)
            next_sample += 600.0
        busy += 1 if b else -1
    assert abs(np.mean(samples) / 400 - 0.3) < 0.03


def test_contention_stream_deterministic_and_seed_sensitive():
    prof = builtin_profile("beluga-like", 10)
    c = ContentionModel("STOCHASTIC", busy_fraction=0.5, release_rate=4.0, seed=1)
    a = stream_digest(contention_stream(c, prof, 7200))
    assert a == stream_digest(contention_stream(c, prof, 7200))
    assert a != stream_digest(contention_stream(c.with_seed(2), prof, 7200))


def test_contention_model_dict_round_trip_and_unknown_field():
    c = ContentionModel("STOCHASTIC", busy_fraction=0.2, release_rate=3.0, seed=9)
    assert ContentionModel.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        ContentionModel.from_dict({"kind": "NONE", "busyness": 1})


@pytest.mark.parametrize("kwargs", [
    dict(kind="FIXED_DELAYS"),
    dict(kind="STOCHASTIC", busy_fraction=0.5),
    dict(kind="STOCHASTIC", busy_fraction=1.5, release_rate=1.0),
    dict(kind="STOCHASTIC", busy_fraction=0.5, release_rate=0.0),
    dict(kind="FIXED_DELAYS", fixed_delays=(-1.0,)),
])
def test_contention_model_validation(kwargs):
    with pytest.raises(ValueError):
        ContentionModel(**kwargs)


def test_event_log_deterministic(tmp_path):
    def run(path):
        c = ContentionModel("STOCHASTIC", busy_fraction=0.4, release_rate=6.0, seed=5)
        s = BatchScheduler(builtin_profile("cedar-like", 100), c)
        for i in range(12):
            s.submit(job(i + 1, 2, 900, submit=17.0 * i, runtime=500))
        s.advance(20_000)
        write_event_log(path, s.log, "seed=5")
        return path.read_bytes()

    assert run(tmp_path / "a.csv") == run(tmp_path / "b.csv")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_scenarios_hold_invariants(seed):
    findings = check_scenario(random_scenario(np.random.default_rng(seed)))
    assert findings.violations == []


def test_reservation_infinite_when_background_blocks():
    c = ContentionModel("STOCHASTIC", busy_fraction=0.0, release_rate=1.0, initial_busy_fraction=1.0, seed=0)
    s = BatchScheduler(flat_profile(2), c)
    assert math.isinf(s.reservation(job(99, 1, 10)))
