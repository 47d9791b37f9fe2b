"""Cluster topology types: node classes, profiles and resource requests.

All times are plain floats in seconds; :func:`check_time` is the single
validation point for them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields


class ProfileError(ValueError):
    """Unknown profile or malformed profile definition."""


class UnsatisfiableRequest(ValueError):
    """A resource request fits none of a profile's node classes."""


def check_time(value: float, name: str = "time") -> float:
    value = float(value)
    if math.isnan(value) or value < 0:
        raise ValueError(f"{name} must be a non-negative number of seconds, got {value!r}")
    return value


@dataclass(frozen=True)
class NodeClass:
    name: str
    memory_gb: float
    cores: int
    count: int

    def __post_init__(self) -> None:
        if self.memory_gb <= 0:
            raise ProfileError(f"node class {self.name!r}: memory_gb must be > 0")
        if self.cores < 1:
            raise ProfileError(f"node class {self.name!r}: cores must be >= 1")
        if self.count < 1:
            raise ProfileError(f"node class {self.name!r}: count must be >= 1")


@dataclass(frozen=True)
class ResourceRequest:
    """What one batch job asks for (the columns of a Slurm submission)."""

    nodes: int
    memory_per_node_gb: float
    cpus_per_task: int
    tasks_per_node: int
    walltime: float

    def __post_init__(self) -> None:
        for name in ("nodes", "cpus_per_task", "tasks_per_node"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.memory_per_node_gb <= 0:
            raise ValueError("memory_per_node_gb must be > 0")
        if check_time(self.walltime, "walltime") == 0:
            raise ValueError("walltime must be > 0")

    @property
    def cores_per_node(self) -> int:
        return self.cpus_per_task * self.tasks_per_node

    def fits(self, node_class: NodeClass) -> bool:
        return (node_class.memory_gb >= self.memory_per_node_gb
                and node_class.cores >= self.cores_per_node)


@dataclass(frozen=True)
class ClusterProfile:
    name: str
    node_classes: tuple[NodeClass, ...]
    backfill_user_cap: int
    backfill_reentry_delay: float = 180.0
    scheduler_pass_interval: float = 30.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "node_classes", tuple(self.node_classes))
        if not self.node_classes:
            raise ProfileError(f"profile {self.name!r} has no node classes")
        mems = [c.memory_gb for c in self.node_classes]
        if any(b <= a for a, b in zip(mems, mems[1:])):
            raise ProfileError(f"profile {self.name!r}: node classes must be strictly ascending by memory_gb")
        if len({c.name for c in self.node_classes}) != len(self.node_classes):
            raise ProfileError(f"profile {self.name!r}: duplicate node class names")
        if self.backfill_user_cap < 1:
            raise ProfileError("backfill_user_cap must be >= 1")
        check_time(self.backfill_reentry_delay, "backfill_reentry_delay")
        if check_time(self.scheduler_pass_interval, "scheduler_pass_interval") == 0:
            raise ProfileError("scheduler_pass_interval must be > 0")

    def node_class(self, name: str) -> NodeClass:
        for c in self.node_classes:
            if c.name == name:
                return c
        raise KeyError(name)

    def fitting_classes(self, request: ResourceRequest) -> list[NodeClass]:
        """Classes able to host one node of ``request``, smallest memory first."""
        return [c for c in self.node_classes if request.fits(c)]

    @property
    def total_nodes(self) -> int:
        return sum(c.count for c in self.node_classes)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "node_classes": [
                {f.name: getattr(c, f.name) for f in fields(NodeClass)} for c in self.node_classes
            ],
            "backfill_user_cap": self.backfill_user_cap,
            "backfill_reentry_delay": self.backfill_reentry_delay,
            "scheduler_pass_interval": self.scheduler_pass_interval,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClusterProfile":
        allowed = {f.name for f in fields(cls)}
        unknown = set(data) - allowed
        if unknown:
            raise ProfileError(f"unknown profile fields: {sorted(unknown)}")
        classes = []
        for raw in data.get("node_classes", []):
            extra = set(raw) - {f.name for f in fields(NodeClass)}
            if extra:
                raise ProfileError(f"unknown node class fields: {sorted(extra)}")
            classes.append(NodeClass(**raw))
        kwargs = {k: v for k, v in data.items() if k != "node_classes"}
        try:
            return cls(node_classes=tuple(classes), **kwargs)
        except TypeError as exc:
            raise ProfileError(str(exc)) from None


# beluga-like: two node classes, 40 cores each; 92 GB is the low end of the
# published memory range. cedar-like: one standard class that fits every
# experiment request.
_BUILTIN = {
    "beluga-like": dict(
        classes=[("low-mem", 92.0, 40, 172), ("mid-mem", 186.0, 40, 516)],
        backfill_user_cap=10,
    ),
    "cedar-like": dict(
        classes=[("standard", 128.0, 32, 1542)],
        backfill_user_cap=40,
    ),
}

BACKFILL_REENTRY_DELAY = 180.0
SCHEDULER_PASS_INTERVAL = 30.0


def profile_names() -> list[str]:
    return sorted(_BUILTIN)


def builtin_profile(name: str, node_divisor: int = 1) -> ClusterProfile:
    """Return one of the built-in cluster profiles.

    ``node_divisor`` shrinks every node count (ceiling division, at least one
    node per class) for desk-scale contention experiments.
    """
    try:
        spec = _BUILTIN[name]
    except KeyError:
        raise ProfileError(f"unknown profile {name!r}; valid names: {', '.join(profile_names())}") from None
    if node_divisor < 1:
        raise ProfileError("node_divisor must be >= 1")
    classes = tuple(
        NodeClass(cname, mem, cores, max(1, -(-count // node_divisor)))
        for cname, mem, cores, count in spec["classes"]
    )
    suffix = "" if node_divisor == 1 else f"/{node_divisor}"
    return ClusterProfile(
        name=name + suffix,
        node_classes=classes,
        backfill_user_cap=spec["backfill_user_cap"],
        backfill_reentry_delay=BACKFILL_REENTRY_DELAY,
        scheduler_pass_interval=SCHEDULER_PASS_INTERVAL,
    )


def smallest_fitting_class(profile: ClusterProfile, request: ResourceRequest) -> NodeClass:
    fitting = profile.fitting_classes(request)
    if not fitting:
        raise UnsatisfiableRequest(
            f"request unsatisfiable on profile {profile.name!r}: "
            f"{request.memory_per_node_gb} GB and {request.cores_per_node} cores per node"
        )
    return fitting[0]


def validate_request(profile: ClusterProfile, request: ResourceRequest) -> None:
    """Raise :class:`UnsatisfiableRequest` unless ``request`` can ever run on ``profile``."""
    fitting = profile.fitting_classes(request)
    if not fitting:
        smallest_fitting_class(profile, request)
    if sum(c.count for c in fitting) < request.nodes:
        raise UnsatisfiableRequest(
            f"request unsatisfiable on profile {profile.name!r}: {request.nodes} nodes requested, "
            f"{sum(c.count for c in fitting)} fitting nodes exist"
        )
