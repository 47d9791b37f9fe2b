"""Analytical makespan model for divisible and wave-structured loads.

With total CPU time ``C`` and time-averaged worker count ``W`` over the run,
a divisible load finishes in ``C / W``; queueing is folded into ``W`` because
the worker count is zero while allocations wait. Comparing two deployments of
the same application, the makespan ratio is the inverse ratio of their
average worker counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .workload import WorkerTrace


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelInputs:
    total_cpu_time_s: float
    avg_workers: float
    chunks: int
    per_task_s: float
    iterations: int
    requested_workers: int

    def __post_init__(self) -> None:
        for name in ("total_cpu_time_s", "avg_workers", "chunks", "per_task_s", "iterations", "requested_workers"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")


def trace_integral(trace: "WorkerTrace", start: float, end: float) -> float:
    """Exact integral of the worker step function over ``[start, end]``."""
    if end < start:
        raise ModelError("integration bounds reversed")
    points = trace.breakpoints
    total = 0.0
    for i, (t, n) in enumerate(points):
        seg_end = points[i + 1][0] if i + 1 < len(points) else math.inf
        lo, hi = max(t, start), min(seg_end, end)
        if hi > lo:
            total += n * (hi - lo)
    return total


def average_workers(trace: "WorkerTrace", makespan_s: float) -> float:
    if not makespan_s > 0:
        raise ModelError("makespan must be positive to average workers")
    origin = trace.breakpoints[0][0] if trace.breakpoints else 0.0
    return trace_integral(trace, origin, origin + makespan_s) / makespan_s


def model_makespan_divisible(total_cpu_time_s: float, avg_workers: float) -> float:
    if not avg_workers > 0:
        raise ModelError("average workers must be positive")
    return total_cpu_time_s / avg_workers


def model_makespan_paper(d: float, W: float, chunks: int = 125, inc: float = 20.0, iters: int = 10) -> float:
    """Closed form for the incrementation workload: ``chunks * (d + inc) * iters / W``."""
    if not W > 0:
        raise ModelError("average workers must be positive")
    return chunks * (d + inc) * iters / W


def model_makespan_waves(chunks: int, per_task_s: float, workers: int) -> float:
    """Makespan of ``chunks`` equal tasks run in full waves on ``workers`` slots.

    This is the natural non-divisible extension for a fixed worker pool; it
    is exact for batch deployments where every worker is present from the
    start.
    """
    if workers < 1:
        raise ModelError("workers must be >= 1")
    return math.ceil(chunks / workers) * per_task_s


def speedup(M_batch: float, M_pilot: float) -> float:
    if not M_pilot > 0:
        raise ModelError("pilot makespan must be positive")
    return M_batch / M_pilot


def model_curve(total_cpu_time_s: float, chunks: int, per_task_s: float,
                workers_from: int, workers_to: int) -> list[tuple[int, float, float]]:
    """(workers, divisible-model makespan, wave-model makespan) over an integer worker range."""
    if workers_from < 1 or workers_to < workers_from:
        raise ModelError("worker range must satisfy 1 <= from <= to")
    return [
        (w, model_makespan_divisible(total_cpu_time_s, w), model_makespan_waves(chunks, per_task_s, w))
        for w in range(workers_from, workers_to + 1)
    ]
