"""Experiment matrix: configuration presets, repetitions, CSV outputs and reports."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from statistics import fmean

import numpy as np

from .cluster import ClusterProfile, ResourceRequest, builtin_profile
from .model import model_makespan_divisible, model_makespan_waves
from .orchestrator import DEFAULT_IDLE_TIMEOUT, SubmissionMode, SubmissionPlan
from .scheduler import ContentionModel, LogEvent
from .simulation import DEFAULT_HORIZON_S, RunSettings, Simulation
from .workload import RunResult, WorkloadSpec, calibrate_task_delay

WALLTIME_S = 9000.0  # 2h30
BATCH_MEMORY_GB = 112.0
BATCH_TASKS_PER_NODE = 16
SLEEP_MAKESPAN_S = 3600.0
MODES = ("batch", "pilot8", "pilot16")
PILOT_COUNTS = {"pilot8": 8, "pilot16": 16}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Configuration:
    label: str
    task_delay_s: float
    plans: dict[str, SubmissionPlan]


def preset(configuration: int, idle_timeout: float = DEFAULT_IDLE_TIMEOUT) -> Configuration:
    """Configuration 1-4: ``k`` batch nodes of 16 workers, or 8 / 16 one-node pilots of equal total size."""
    if configuration not in (1, 2, 3, 4):
        raise ConfigError(f"configuration must be 1-4, got {configuration!r}")
    k = configuration
    workers = BATCH_TASKS_PER_NODE * k
    plans = {
        "batch": SubmissionPlan(
            SubmissionMode.BATCH,
            ResourceRequest(k, BATCH_MEMORY_GB, 1, BATCH_TASKS_PER_NODE, WALLTIME_S),
            idle_timeout=idle_timeout,
        )
    }
    for mode, count in PILOT_COUNTS.items():
        tasks = workers // count
        plans[mode] = SubmissionPlan(
            SubmissionMode.PILOT,
            ResourceRequest(1, BATCH_MEMORY_GB * k / count, 1, tasks, WALLTIME_S),
            pilot_count=count,
            idle_timeout=idle_timeout,
        )
    delay = calibrate_task_delay(workers, 125, 10, SLEEP_MAKESPAN_S)
    return Configuration(str(k), delay, plans)


def custom_configuration(data: dict, idle_timeout: float) -> Configuration:
    """Parse ``{"label", "task_delay_s"?, "max_parallelism"?, "plans": {mode: {...}}}``."""
    allowed = {"label", "task_delay_s", "max_parallelism", "plans"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown custom configuration fields: {sorted(unknown)}")
    try:
        label = str(data["label"])
        raw_plans = data["plans"]
    except KeyError as exc:
        raise ConfigError(f"custom configuration needs {exc.args[0]!r}") from None
    plans = {}
    request_fields = {f.name for f in fields(ResourceRequest)}
    for mode, raw in raw_plans.items():
        raw = dict(raw)
        count = int(raw.pop("pilot_count", 1))
        kind = raw.pop("mode", "BATCH" if mode == "batch" else "PILOT")
        extra = set(raw) - request_fields
        if extra:
            raise ConfigError(f"unknown request fields in plan {mode!r}: {sorted(extra)}")
        plans[mode] = SubmissionPlan(kind, ResourceRequest(**raw), pilot_count=count, idle_timeout=idle_timeout)
    if "task_delay_s" in data:
        delay = float(data["task_delay_s"])
    else:
        parallelism = int(data.get("max_parallelism", 0)) or max(
            p.pilot_count * p.per_job_request.nodes * p.per_job_request.tasks_per_node for p in plans.values())
        delay = calibrate_task_delay(parallelism, 125, 10, SLEEP_MAKESPAN_S)
    return Configuration(label, delay, plans)


@dataclass
class ExperimentConfig:
    profile: str | dict = "beluga-like"
    node_divisor: int = 10
    configurations: list = field(default_factory=lambda: [1])
    modes: list[str] = field(default_factory=lambda: list(MODES))
    repetitions: int = 10
    seed: int = 0
    contention: dict = field(default_factory=lambda: {"kind": "NONE"})
    registration_delay: float = 0.0
    join_transfer_delay: float = 0.0
    executor_fail_prob: float = 0.0
    fluid: bool = False
    requeue_on_worker_loss: bool = False
    idle_timeout: float = DEFAULT_IDLE_TIMEOUT
    shared_cluster: bool = False
    time_scale: float = 1.0
    chunks: int = 125
    iterations: int = 10
    increment_duration_s: float = 20.0
    increment_jitter_s: float = 0.0
    read_write_overhead_s: float = 0.0
    horizon_s: float = DEFAULT_HORIZON_S
    output_dir: str = "results"

    def __post_init__(self) -> None:
        if isinstance(self.configurations, (int, str, dict)):
            self.configurations = [self.configurations]
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.time_scale <= 0:
            raise ConfigError("time_scale must be positive")
        if not self.modes:
            raise ConfigError("at least one mode is required")
        ContentionModel.from_dict(self.contention)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "configuration" in data:
            raise ConfigError("use 'configurations'")
        return cls(**data)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    # derived objects -------------------------------------------------------

    def cluster_profile(self) -> ClusterProfile:
        if isinstance(self.profile, dict):
            prof = ClusterProfile.from_dict(self.profile)
        else:
            prof = builtin_profile(self.profile, self.node_divisor)
        s = self.time_scale
        return replace(prof, backfill_reentry_delay=prof.backfill_reentry_delay * s,
                       scheduler_pass_interval=prof.scheduler_pass_interval * s)

    def resolved_configurations(self) -> list[Configuration]:
        out = []
        for c in self.configurations:
            if isinstance(c, dict):
                conf = custom_configuration(c, self.idle_timeout)
            else:
                conf = preset(int(c), self.idle_timeout)
            missing = [m for m in self.modes if m not in conf.plans]
            if missing:
                raise ConfigError(f"configuration {conf.label} has no plan for modes {missing}")
            out.append(self._scaled(conf))
        return out

    def _scaled(self, conf: Configuration) -> Configuration:
        s = self.time_scale
        if s == 1.0:
            return conf
        plans = {
            m: replace(p, per_job_request=replace(p.per_job_request, walltime=p.per_job_request.walltime * s),
                       idle_timeout=p.idle_timeout * s)
            for m, p in conf.plans.items()
        }
        return Configuration(conf.label, conf.task_delay_s * s, plans)

    def workload(self, conf: Configuration) -> WorkloadSpec:
        s = self.time_scale
        return WorkloadSpec(self.chunks, self.iterations, conf.task_delay_s, self.increment_duration_s * s,
                            self.increment_jitter_s * s, self.read_write_overhead_s * s)

    def settings(self) -> RunSettings:
        s = self.time_scale
        return RunSettings(self.registration_delay * s, self.join_transfer_delay * s, self.executor_fail_prob,
                           self.fluid, self.requeue_on_worker_loss, self.horizon_s * s)

    def contention_model(self) -> ContentionModel:
        model = ContentionModel.from_dict(self.contention)
        s = self.time_scale
        if s != 1.0:
            model = replace(model,
                            fixed_delays=None if model.fixed_delays is None else tuple(d * s for d in model.fixed_delays),
                            release_rate=None if model.release_rate is None else model.release_rate / s)
        return model


@dataclass
class MatrixRun:
    repetition: int
    launch_index: int
    configuration: str
    mode: str
    submit_rank: int
    contention_seed: int
    chunks: int
    per_task_s: float
    result: RunResult
    events: list[LogEvent] = field(default_factory=list)
    contention_events: list[tuple] = field(default_factory=list)


def _derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def run_matrix(config: ExperimentConfig) -> list[MatrixRun]:
    """Every (configuration, mode, repetition) of the experiment, in launch order.

    Modes of one (repetition, configuration) see the same background-load
    realization. With ``shared_cluster`` they also share one simulated
    cluster, submitted together in a random order.
    """
    profile = config.cluster_profile()
    confs = config.resolved_configurations()
    base_contention = config.contention_model()
    settings = config.settings()
    rng = np.random.default_rng(config.seed)
    runs: list[MatrixRun] = []
    launch = 0
    for rep in range(config.repetitions):
        for ci in rng.permutation(len(confs)):
            conf = confs[int(ci)]
            order = [config.modes[int(i)] for i in rng.permutation(len(config.modes))]
            cseed = _derived_seed(config.seed, rep, int(ci))
            contention = base_contention.with_seed(cseed)
            workload = config.workload(conf)
            if config.shared_cluster:
                groups = [order]
            else:
                groups = [[m] for m in order]
            for group in groups:
                sim = Simulation(profile, contention, settings, seed=cseed)
                for mode in group:
                    sim.add_application(mode, conf.plans[mode], workload)
                results = sim.run()
                for mode, result in zip(group, results):
                    runs.append(MatrixRun(
                        repetition=rep, launch_index=launch, configuration=conf.label, mode=mode,
                        submit_rank=order.index(mode), contention_seed=cseed, chunks=workload.chunks,
                        per_task_s=workload.per_task_s, result=result,
                        events=[e for e in sim.log if _event_app(e) in (None, mode)],
                        contention_events=list(sim.scheduler.contention_log),
                    ))
            launch += 1
    return runs


def _event_app(event: LogEvent) -> str | None:
    for token in event.detail.split():
        if token.startswith("app="):
            return token[4:]
    return None


# ---------------------------------------------------------------------------
# CSV output

RUN_COLUMNS = ["repetition", "launch_index", "configuration", "mode", "submit_rank", "makespan_s",
               "avg_workers", "total_cpu_time_s", "chunks", "per_task_s", "failed", "failure_reason",
               "queue_delays_s", "contention_seed"]


def _t(x: float) -> str:
    return f"{x:.3f}"


def _w(x: float) -> str:
    return f"{x:.6f}"


def _open_csv(path: Path, header: str):
    fh = open(path, "w", newline="")
    fh.write(f"# {header}\n")
    return fh, csv.writer(fh, lineterminator="\n")


def read_csv(path: str | os.PathLike) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Read one of our CSV files; returns (header key=value pairs, rows)."""
    meta: dict[str, str] = {}
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        k, v = token.split("=", 1)
                        meta[k] = v
            else:
                lines.append(line)
    return meta, list(csv.DictReader(lines))


def write_runs(runs: list[MatrixRun], out_dir: str | os.PathLike, seed: int) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = f"spasim seed={seed}"
    fh, w = _open_csv(out / "runs.csv", header)
    with fh:
        w.writerow(RUN_COLUMNS)
        for r in runs:
            res = r.result
            w.writerow([r.repetition, r.launch_index, r.configuration, r.mode, r.submit_rank,
                        _t(res.makespan_s), _w(res.avg_workers), _t(res.total_cpu_time_s), r.chunks,
                        _t(r.per_task_s), int(res.failed), res.failure_reason or "",
                        ";".join(_t(d) for d in res.per_job_queue_delay_s), r.contention_seed])
    fh, w = _open_csv(out / "traces.csv", header)
    with fh:
        w.writerow(["repetition", "configuration", "mode", "time_s", "live_workers"])
        for r in runs:
            for t, n in r.result.trace.breakpoints:
                w.writerow([r.repetition, r.configuration, r.mode, _t(t), n])
    fh, w = _open_csv(out / "tasks.csv", header)
    with fh:
        w.writerow(["repetition", "configuration", "mode", "chunk_id", "worker_id", "start_s", "end_s"])
        for r in runs:
            for task in r.result.tasks:
                if task.start is None:
                    continue
                w.writerow([r.repetition, r.configuration, r.mode, task.chunk_id, task.worker_id,
                            _t(task.start), "" if task.end is None else _t(task.end)])
    fh, w = _open_csv(out / "events.csv", header)
    with fh:
        w.writerow(["repetition", "configuration", "mode", "time_s", "event_kind", "job_id", "detail"])
        for r in runs:
            for e in r.events:
                w.writerow([r.repetition, r.configuration, r.mode, _t(e.time_s), e.event_kind,
                            "" if e.job_id is None else e.job_id, e.detail])
    return out / "runs.csv"


def _mode_sort_key(mode: str) -> tuple:
    return (MODES.index(mode) if mode in MODES else len(MODES), mode)


def report(rows: list[dict[str, str]], out_dir: str | os.PathLike, seed: str | int = "") -> list[Path]:
    """Write makespan, speedup, worker-difference and model-scatter CSVs from run rows."""
    if not rows:
        raise ConfigError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = f"spasim seed={seed}"
    rows = sorted(rows, key=lambda r: (r["configuration"], int(r["repetition"]), _mode_sort_key(r["mode"])))
    by_key = {(r["configuration"], int(r["repetition"]), r["mode"]): r for r in rows}
    configs = sorted({r["configuration"] for r in rows})
    pilot_modes = sorted({r["mode"] for r in rows if r["mode"] != "batch"}, key=_mode_sort_key)
    reps = sorted({int(r["repetition"]) for r in rows})
    paths = []

    path = out / "makespans.csv"
    fh, w = _open_csv(path, header)
    with fh:
        w.writerow(["configuration", "mode", "repetition", "makespan_s", "avg_workers", "failed", "failure_reason"])
        for r in rows:
            w.writerow([r["configuration"], r["mode"], r["repetition"], r["makespan_s"], r["avg_workers"],
                        r["failed"], r["failure_reason"]])
    paths.append(path)

    path = out / "speedups.csv"
    fh, w = _open_csv(path, header)
    with fh:
        w.writerow(["configuration", "pilot_mode", "mean_speedup", "n_pairs"])
        for conf in configs:
            for mode in pilot_modes:
                ratios = []
                for rep in reps:
                    b, p = by_key.get((conf, rep, "batch")), by_key.get((conf, rep, mode))
                    if b and p and b["failed"] == "0" and p["failed"] == "0" and float(p["makespan_s"]) > 0:
                        ratios.append(float(b["makespan_s"]) / float(p["makespan_s"]))
                w.writerow([conf, mode, f"{fmean(ratios):.6f}" if ratios else "", len(ratios)])
    paths.append(path)

    path = out / "worker_diff.csv"
    fh, w = _open_csv(path, header)
    with fh:
        w.writerow(["configuration", "pilot_mode", "repetition", "batch_avg_workers", "pilot_avg_workers",
                    "difference", "any_failed"])
        for conf in configs:
            for mode in pilot_modes:
                for rep in reps:
                    b, p = by_key.get((conf, rep, "batch")), by_key.get((conf, rep, mode))
                    if not (b and p):
                        continue
                    wb, wp = float(b["avg_workers"]), float(p["avg_workers"])
                    w.writerow([conf, mode, rep, b["avg_workers"], p["avg_workers"], _w(wb - wp),
                                int(b["failed"] == "1" or p["failed"] == "1")])
    paths.append(path)

    path = out / "model_scatter.csv"
    fh, w = _open_csv(path, header)
    with fh:
        w.writerow(["configuration", "mode", "repetition", "avg_workers", "makespan_s", "model_makespan_s",
                    "wave_model_makespan_s", "failed"])
        for r in rows:
            W = float(r["avg_workers"])
            model = wave = ""
            if W > 0:
                model = _t(model_makespan_divisible(float(r["total_cpu_time_s"]), W))
                wave = _t(model_makespan_waves(int(r["chunks"]), float(r["per_task_s"]), max(1, math.floor(W))))
            w.writerow([r["configuration"], r["mode"], r["repetition"], r["avg_workers"], r["makespan_s"],
                        model, wave, r["failed"]])
    paths.append(path)
    return paths


def report_dir(in_dir: str | os.PathLike, out_dir: str | os.PathLike) -> list[Path]:
    meta, rows = read_csv(Path(in_dir) / "runs.csv")
    return report(rows, out_dir, meta.get("seed", ""))


def execute(config: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> list[Path]:
    """Run the matrix, write raw CSVs, then derive the report from them."""
    out = Path(out_dir if out_dir is not None else config.output_dir)
    runs = run_matrix(config)
    runs_csv = write_runs(runs, out, config.seed)
    meta, rows = read_csv(runs_csv)
    return [runs_csv] + report(rows, out, config.seed)


def write_model_curve(configuration: int, workers_from: int, workers_to: int, path: str | os.PathLike) -> Path:
    from .model import model_curve
    from .workload import total_cpu_time

    conf = preset(configuration)
    spec = WorkloadSpec(task_delay_s=conf.task_delay_s)
    rows = model_curve(total_cpu_time(spec), spec.chunks, spec.per_task_s, workers_from, workers_to)
    path = Path(path)
    if path.parent:
        path.parent.mkdir(parents=True, exist_ok=True)
    fh, w = _open_csv(path, f"spasim configuration={configuration} task_delay_s={conf.task_delay_s:g} "
                            f"wave_model=ceil(chunks/workers)*per_task")
    with fh:
        w.writerow(["avg_workers", "model_makespan_s", "wave_model_makespan_s"])
        for workers, m, wave in rows:
            w.writerow([workers, _t(m), _t(wave)])
    return path


__all__ = [
    "ConfigError", "Configuration", "ExperimentConfig", "MatrixRun", "MODES", "WALLTIME_S",
    "execute", "preset", "read_csv", "report", "report_dir", "run_matrix", "write_model_curve", "write_runs",
]
