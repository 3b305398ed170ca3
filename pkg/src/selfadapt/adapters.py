"""Metric Collector and Execution Adapter: the bridge between the bus and the managed system."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

from .bus import ACKS, DIRECTIVES, TELEMETRY, MessageBus
from .domain import AdaptationAction, MetricSample, MetricSnapshot, SystemState, aggregate
from .kb import EpisodeKind, KnowledgeBase
from .sim import SimulationError, Simulator
from .verifier import Verdict

log = logging.getLogger(__name__)


def sample_payload(s: MetricSample) -> dict[str, Any]:
    return {"timestamp": s.timestamp, "response_time": s.response_time, "optional": s.is_optional_served, "late": s.is_late}


def payload_sample(p: dict[str, Any]) -> MetricSample:
    return MetricSample(p["timestamp"], p["response_time"], p["optional"], p["late"])


def publish_samples(bus: MessageBus, samples: Iterable[MetricSample]) -> int:
    n = 0
    for s in samples:
        bus.publish(TELEMETRY, sample_payload(s), published_at=s.timestamp)
        n += 1
    return n


class MetricCollector:
    """Buffers telemetry from the bus and closes it into contiguous windows.

    Windows are half-open on the left, (start, end], except the very first
    which also takes samples stamped exactly at its start.
    """

    def __init__(
        self,
        bus: MessageBus,
        probe: Callable[[float, float], SystemState],
        sla_bound: float | None = None,
        start: float = 0.0,
    ):
        self._sub = bus.subscribe(TELEMETRY)
        self._probe = probe
        self.sla_bound = sla_bound
        self.window_end = start
        self._first = True
        self._buffer: list[MetricSample] = []
        self.collected = 0
        self.stale = 0

    def collect(self, window_length: float, end: float | None = None) -> MetricSnapshot:
        start = self.window_end
        end = start + window_length if end is None else end
        self._buffer.extend(payload_sample(m.payload) for m in self._sub.drain())
        inside, later = [], []
        for s in self._buffer:
            if s.timestamp > end:
                later.append(s)
            elif s.timestamp > start or (self._first and s.timestamp >= start):
                inside.append(s)
            else:
                # cannot happen with an in-order publisher; counted so conservation checks catch it
                self.stale += 1
                log.warning("dropping stale sample at %.3f (window starts %.3f)", s.timestamp, start)
        self._buffer = later
        state = self._probe(start, end)
        snap = aggregate(inside, (start, end), state, self.sla_bound)
        self.window_end = end
        self._first = False
        self.collected += len(inside)
        return snap


def simulator_probe(sim: Simulator) -> Callable[[float, float], SystemState]:
    def probe(start: float, end: float) -> SystemState:
        return sim.system_state(busy_time=sim.busy_time(start, end))

    return probe


@dataclass(frozen=True)
class Ack:
    ok: bool
    action: AdaptationAction
    at: float
    dimmer: float
    active_servers: int
    booting_servers: int
    error: str = ""
    episode_id: str = ""
    violations: tuple[str, ...] = field(default=())

    def to_dict(self) -> dict[str, Any]:
        return {
            "ok": self.ok,
            "action": self.action.to_dict(),
            "at": self.at,
            "dimmer": self.dimmer,
            "active_servers": self.active_servers,
            "booting_servers": self.booting_servers,
            "error": self.error,
            "violations": list(self.violations),
        }


class ExecutionAdapter:
    """Turns verified directives into simulator commands, acks them on the bus and logs them to the KB."""

    def __init__(self, sim: Simulator, bus: MessageBus, kb: KnowledgeBase):
        self.sim = sim
        self.bus = bus
        self.kb = kb
        self.executed = 0
        self.failed = 0

    def _ack(self, ok: bool, action: AdaptationAction, now: float, error: str = "", violations=()) -> Ack:
        st = self.sim.state
        return Ack(ok, action, now, st.dimmer, st.active_servers, st.booting_servers, error, "", tuple(violations))

    def execute(self, directive: AdaptationAction, now: float) -> Ack:
        self.bus.publish(DIRECTIVES, directive.to_dict(), published_at=now)
        try:
            self.sim.apply_action(directive)
            ack = self._ack(True, directive, now)
        except SimulationError as exc:
            log.warning("simulator refused %s: %s", directive.label(), exc)
            self.failed += 1
            ack = self._ack(False, directive, now, error=f"{type(exc).__name__}: {exc}")
        self.executed += 1
        tags = {"action", directive.kind.value.lower(), directive.origin.value.lower()}
        if not ack.ok:
            tags.add("failed")
        ep = self.kb.add(EpisodeKind.ACTION_EXECUTED, now, ack.to_dict(), tags)
        ack = Ack(**{**ack.__dict__, "episode_id": ep})
        self.bus.publish(ACKS, ack.to_dict(), published_at=now)
        return ack

    def reject(self, directive: AdaptationAction, verdict: Verdict, now: float) -> Ack:
        """Publish a failure ack for a directive the verifier refused and record it."""
        ack = self._ack(False, directive, now, error="rejected by verifier", violations=verdict.names)
        payload = ack.to_dict() | {"verdict": verdict.to_dict()}
        tags = {"rejected", directive.kind.value.lower(), directive.origin.value.lower(), *verdict.names}
        ep = self.kb.add(EpisodeKind.ACTION_REJECTED, now, payload, tags)
        ack = Ack(**{**ack.__dict__, "episode_id": ep})
        self.bus.publish(ACKS, ack.to_dict(), published_at=now)
        return ack
