"""Shared vocabulary: telemetry records, adaptation actions, goals, invariants and utility."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Any, Iterable


class ActionKind(str, Enum):
    ADD_SERVER = "AddServer"
    REMOVE_SERVER = "RemoveServer"
    SET_DIMMER = "SetDimmer"
    NO_OP = "NoOp"


class Origin(str, Enum):
    FAST_CONTROLLER = "FastController"
    REASONER = "Reasoner"


@dataclass(frozen=True)
class MetricSample:
    timestamp: float
    response_time: float
    is_optional_served: bool
    is_late: bool

    def __post_init__(self) -> None:
        if self.response_time < 0:
            raise ValueError(f"negative response time {self.response_time}")


@dataclass(frozen=True)
class SystemState:
    """Actuator readings plus busy time accumulated over a window."""

    dimmer: float
    active_servers: int
    booting_servers: int = 0
    busy_time: float = 0.0


@dataclass(frozen=True)
class MetricSnapshot:
    window_start: float
    window_end: float
    avg_response_time: float
    p95_response_time: float
    server_utilization: float
    arrival_rate: float
    dimmer: float
    active_servers: int
    booting_servers: int
    request_count: int
    late_count: int
    optional_count: int
    # late requests that were also served optional content; needed so utility can
    # credit on-time optional requests exactly
    late_optional_count: int = 0

    def __post_init__(self) -> None:
        if not self.window_end > self.window_start:
            raise ValueError("window_end must exceed window_start")
        if not 0.0 <= self.server_utilization <= 1.0:
            raise ValueError(f"utilization {self.server_utilization} outside [0, 1]")
        if self.late_count > self.request_count or self.optional_count > self.request_count:
            raise ValueError("late/optional counts exceed request_count")
        if self.late_optional_count > min(self.late_count, self.optional_count):
            raise ValueError("late_optional_count exceeds late or optional count")
        if self.active_servers < 1:
            raise ValueError("snapshot needs at least one active server")

    @property
    def window_length(self) -> float:
        return self.window_end - self.window_start

    @property
    def total_servers(self) -> int:
        return self.active_servers + self.booting_servers

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MetricSnapshot:
        return cls(**data)


@dataclass(frozen=True)
class AdaptationAction:
    kind: ActionKind
    origin: Origin = Origin.REASONER
    dimmer_target: float | None = None
    issued_at: float = 0.0
    rationale: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ActionKind(self.kind))
        object.__setattr__(self, "origin", Origin(self.origin))

    @property
    def well_formed(self) -> bool:
        if self.kind is ActionKind.SET_DIMMER:
            return self.dimmer_target is not None and math.isfinite(self.dimmer_target)
        return self.dimmer_target is None

    @classmethod
    def no_op(cls, origin: Origin = Origin.REASONER, issued_at: float = 0.0, rationale: str = "") -> AdaptationAction:
        return cls(ActionKind.NO_OP, origin, None, issued_at, rationale)

    @classmethod
    def set_dimmer(cls, target: float, origin: Origin = Origin.REASONER, issued_at: float = 0.0, rationale: str = "") -> AdaptationAction:
        return cls(ActionKind.SET_DIMMER, origin, target, issued_at, rationale)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "origin": self.origin.value,
            "dimmer_target": self.dimmer_target,
            "issued_at": self.issued_at,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AdaptationAction:
        return cls(
            kind=ActionKind(data["kind"]),
            origin=Origin(data.get("origin", Origin.REASONER.value)),
            dimmer_target=data.get("dimmer_target"),
            issued_at=data.get("issued_at", 0.0),
            rationale=data.get("rationale", ""),
        )

    def label(self) -> str:
        if self.kind is ActionKind.SET_DIMMER:
            return f"SetDimmer({self.dimmer_target:.3f})"
        return self.kind.value


@dataclass(frozen=True)
class GoalSpec:
    response_time_goal: float = 0.5
    prefer_max_dimmer: bool = True
    minimize_servers: bool = True
    sla_bound: float = 0.75

    def __post_init__(self) -> None:
        if not 0 < self.response_time_goal <= self.sla_bound:
            raise ValueError("need 0 < response_time_goal <= sla_bound")


@dataclass(frozen=True)
class InvariantSet:
    max_servers: int = 3
    min_servers: int = 1
    dimmer_range: tuple[float, float] = (0.0, 1.0)
    action_cooldown: float = 60.0
    max_actions_per_cycle: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "dimmer_range", tuple(float(x) for x in self.dimmer_range))
        lo, hi = self.dimmer_range
        if self.min_servers < 1 or self.min_servers > self.max_servers:
            raise ValueError("need 1 <= min_servers <= max_servers")
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad dimmer range {self.dimmer_range}")
        if self.action_cooldown < 0:
            raise ValueError("action_cooldown must be non-negative")
        if self.max_actions_per_cycle < 1:
            raise ValueError("max_actions_per_cycle must be >= 1")


@dataclass(frozen=True)
class UtilityConfig:
    optional_revenue: float = 1.5
    mandatory_revenue: float = 1.0
    late_penalty: float = 1.0
    server_cost: float = 0.5

    def __post_init__(self) -> None:
        if not self.optional_revenue >= self.mandatory_revenue >= 0:
            raise ValueError("need optional_revenue >= mandatory_revenue >= 0")
        if self.late_penalty < 0 or self.server_cost < 0:
            raise ValueError("late_penalty and server_cost must be non-negative")


def nearest_rank(sorted_values: list[float], pct: float) -> float:
    if not sorted_values:
        return 0.0
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


def aggregate(
    samples: Iterable[MetricSample],
    window: tuple[float, float],
    system_state: SystemState,
    sla_bound: float | None = None,
) -> MetricSnapshot:
    """Fold the samples of one window into a snapshot.

    When ``sla_bound`` is given lateness is re-derived from it (strictly greater
    than the bound); otherwise each sample's own ``is_late`` flag is used.
    """
    start, end = window
    length = end - start
    if length <= 0:
        raise ValueError("window length must be positive")
    if system_state.active_servers < 1:
        raise ValueError("aggregate needs at least one active server")

    samples = list(samples)
    rts = sorted(s.response_time for s in samples)
    n = len(rts)
    if sla_bound is None:
        late = [s.is_late for s in samples]
    else:
        late = [s.response_time > sla_bound for s in samples]
    late_count = sum(late)
    optional_count = sum(s.is_optional_served for s in samples)
    late_optional = sum(1 for s, lt in zip(samples, late) if lt and s.is_optional_served)

    util = system_state.busy_time / (length * system_state.active_servers)
    return MetricSnapshot(
        window_start=start,
        window_end=end,
        avg_response_time=math.fsum(rts) / n if n else 0.0,
        p95_response_time=nearest_rank(rts, 95.0),
        server_utilization=min(1.0, max(0.0, util)),
        arrival_rate=n / length,
        dimmer=system_state.dimmer,
        active_servers=system_state.active_servers,
        booting_servers=system_state.booting_servers,
        request_count=n,
        late_count=late_count,
        optional_count=optional_count,
        late_optional_count=late_optional,
    )


def interval_utility(snapshot: MetricSnapshot, cfg: UtilityConfig, sla_bound: float | None = None) -> float:
    """Revenue of on-time requests minus late penalties minus server cost for one window.

    ``sla_bound`` is accepted for interface symmetry; lateness was already fixed
    when the snapshot was aggregated.
    """
    ontime = snapshot.request_count - snapshot.late_count
    ontime_optional = snapshot.optional_count - snapshot.late_optional_count
    ontime_mandatory = ontime - ontime_optional
    revenue = ontime_optional * cfg.optional_revenue + ontime_mandatory * cfg.mandatory_revenue
    penalty = snapshot.late_count * cfg.late_penalty
    cost = cfg.server_cost * snapshot.active_servers * snapshot.window_length
    return revenue - penalty - cost


__all__ = [
    "ActionKind",
    "AdaptationAction",
    "GoalSpec",
    "InvariantSet",
    "MetricSample",
    "MetricSnapshot",
    "Origin",
    "SystemState",
    "UtilityConfig",
    "aggregate",
    "interval_utility",
    "nearest_rank",
]
