"""Fixed low-latency policy used on the stabilization path."""

from __future__ import annotations

from dataclasses import dataclass

from .domain import ActionKind, AdaptationAction, InvariantSet, MetricSnapshot, Origin


@dataclass(frozen=True)
class ReactivePolicy:
    dimmer_step: float = 0.15
    min_dimmer: float = 0.1

    def __post_init__(self) -> None:
        if not 0 < self.dimmer_step <= 1:
            raise ValueError("dimmer_step must lie in (0, 1]")
        if not 0 <= self.min_dimmer < 1:
            raise ValueError("min_dimmer must lie in [0, 1)")


def react(snapshot: MetricSnapshot, invariants: InvariantSet, policy: ReactivePolicy) -> AdaptationAction:
    """Scale out while a slot is free, otherwise step the dimmer down; NoOp once both are exhausted."""
    now = snapshot.window_end
    if snapshot.total_servers < invariants.max_servers:
        return AdaptationAction(
            ActionKind.ADD_SERVER,
            Origin.FAST_CONTROLLER,
            issued_at=now,
            rationale=f"critical state with {snapshot.total_servers}/{invariants.max_servers} servers: scale out",
        )
    floor = max(policy.min_dimmer, invariants.dimmer_range[0])
    ceiling = invariants.dimmer_range[1]
    current = min(snapshot.dimmer, ceiling)
    if current <= floor:
        return AdaptationAction.no_op(Origin.FAST_CONTROLLER, now, "actuators exhausted: servers at max, dimmer at floor")
    target = round(max(current - policy.dimmer_step, floor), 10)
    return AdaptationAction.set_dimmer(
        target, Origin.FAST_CONTROLLER, now, f"servers at max: dimmer {snapshot.dimmer:.3f} -> {target:.3f}"
    )
