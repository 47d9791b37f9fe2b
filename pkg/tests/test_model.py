import math

import pytest
from hypothesis import given, strategies as st

from spasim.model import (
    ModelError,
    ModelInputs,
    average_workers,
    model_curve,
    model_makespan_divisible,
    model_makespan_paper,
    model_makespan_waves,
    speedup,
    trace_integral,
)
from spasim.workload import WorkerTrace, WorkloadSpec, total_cpu_time


def trace(*points):
    return WorkerTrace(list(points))


def test_average_workers_examples():
    assert average_workers(trace((0, 16)), 100) == 16
    assert average_workers(trace((0, 8), (50, 16)), 100) == 12
    assert average_workers(trace((0, 0), (25, 16)), 100) == 12
    with pytest.raises(ModelError):
        average_workers(trace((0, 1)), 0)


def test_average_workers_uses_trace_origin():
    assert average_workers(trace((1000, 0), (1025, 16)), 100) == 12


def test_trace_integral_exact():
    assert trace_integral(trace((0, 2), (10, 5), (15, 0)), 5, 20) == 2 * 5 + 5 * 5
    with pytest.raises(ModelError):
        trace_integral(trace((0, 1)), 2, 1)


def test_divisible_examples():
    assert model_makespan_divisible(81250, 16) == 5078.125
    assert math.isclose(model_makespan_divisible(81250, 12), 6770.833333333333)
    assert model_makespan_divisible(0, 3) == 0
    with pytest.raises(ModelError):
        model_makespan_divisible(1, 0)


def test_closed_form_examples():
    assert model_makespan_paper(45, 16) == 5078.125
    assert model_makespan_paper(180, 64) == 3906.25
    assert model_makespan_paper(0, 5, inc=0) == 0
    with pytest.raises(ModelError):
        model_makespan_paper(45, -1)


def test_wave_examples():
    assert model_makespan_waves(125, 650, 16) == 5200
    assert model_makespan_waves(125, 650, 125) == 650
    assert model_makespan_waves(125, 650, 1) == 81250
    with pytest.raises(ModelError):
        model_makespan_waves(125, 650, 0)


def test_speedup():
    assert speedup(100, 100) == 1.0
    assert speedup(150, 100) == 1.5
    with pytest.raises(ModelError):
        speedup(1, 0)


def test_model_inputs_positive():
    ModelInputs(81250, 16, 125, 650, 10, 16)
    with pytest.raises(ModelError):
        ModelInputs(81250, 0, 125, 650, 10, 16)


def test_model_curve_rows():
    rows = model_curve(81250, 125, 650, 15, 17)
    assert rows[1] == (16, 5078.125, 5200)
    with pytest.raises(ModelError):
        model_curve(1, 1, 1, 3, 2)


@given(st.integers(1, 300), st.floats(0.1, 1000), st.integers(1, 300))
def test_waves_dominate_divisible(chunks, per_task, workers):
    waves = model_makespan_waves(chunks, per_task, workers)
    fluid = model_makespan_divisible(chunks * per_task, workers)
    assert waves >= fluid * (1 - 1e-12)
    if chunks % workers == 0:
        assert math.isclose(waves, fluid, rel_tol=1e-12)
    else:
        assert waves > fluid


@given(st.floats(0, 500), st.floats(0.1, 200), st.floats(0, 50), st.integers(1, 200), st.integers(1, 20))
def test_closed_form_matches_divisible(d, W, inc, chunks, iters):
    spec = WorkloadSpec(chunks=chunks, iterations=iters, task_delay_s=d, increment_duration_s=inc)
    assert math.isclose(model_makespan_paper(d, W, chunks, inc, iters),
                        model_makespan_divisible(total_cpu_time(spec), W), rel_tol=1e-12)
