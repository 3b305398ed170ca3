"""Static invariant checker gating every directive before execution."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterable

from .domain import ActionKind, AdaptationAction, InvariantSet, Origin


class Decision(str, Enum):
    ACCEPT = "Accept"
    REJECT = "Reject"


@dataclass(frozen=True)
class ActuatorView:
    active_servers: int
    booting_servers: int
    dimmer: float

    @property
    def total_servers(self) -> int:
        return self.active_servers + self.booting_servers


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    violated: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if (self.decision is Decision.REJECT) != bool(self.violated):
            raise ValueError("Reject needs violations and Accept must have none")

    @property
    def accepted(self) -> bool:
        return self.decision is Decision.ACCEPT

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.violated)

    def to_dict(self) -> dict:
        return {"decision": self.decision.value, "violated": [list(v) for v in self.violated]}


ACCEPT = Verdict(Decision.ACCEPT)


def verify(
    action: AdaptationAction,
    invariants: InvariantSet,
    actuators: ActuatorView,
    recent_actions: Iterable[tuple[ActionKind, float]] = (),
    now: float = 0.0,
) -> Verdict:
    """Run every check in a fixed order and report all violations."""
    if action.kind is ActionKind.NO_OP:
        return ACCEPT

    violated: list[tuple[str, str]] = []
    if not action.well_formed:
        violated.append(("well_formed", f"{action.kind.value} with dimmer_target={action.dimmer_target!r}"))

    if action.kind is ActionKind.ADD_SERVER and actuators.total_servers + 1 > invariants.max_servers:
        violated.append(
            ("max_servers", f"{actuators.total_servers} of {invariants.max_servers} servers already active or booting")
        )

    # a booting server cannot take over, so the floor is judged on active servers
    if action.kind is ActionKind.REMOVE_SERVER and actuators.active_servers - 1 < invariants.min_servers:
        violated.append(
            ("min_servers", f"removing leaves {actuators.active_servers - 1} active, floor is {invariants.min_servers}")
        )

    if action.kind is ActionKind.SET_DIMMER and action.dimmer_target is not None:
        lo, hi = invariants.dimmer_range
        if not lo <= action.dimmer_target <= hi:
            violated.append(("dimmer_range", f"target {action.dimmer_target} outside [{lo}, {hi}]"))

    if action.origin is not Origin.FAST_CONTROLLER:
        for kind, issued_at in recent_actions:
            if ActionKind(kind) is action.kind and now - issued_at < invariants.action_cooldown:
                violated.append(
                    ("cooldown", f"{action.kind.value} issued {now - issued_at:g}s ago, cooldown {invariants.action_cooldown:g}s")
                )
                break

    if violated:
        return Verdict(Decision.REJECT, tuple(violated))
    return ACCEPT
