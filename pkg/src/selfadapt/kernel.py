"""Central orchestrator: monitoring cadence, triage and dispatch to the two control paths."""

from __future__ import annotations

import logging
import math
import threading
import time
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Mapping

from .adapters import Ack, ExecutionAdapter, MetricCollector, publish_samples, simulator_probe
from .bus import MessageBus
from .domain import ActionKind, AdaptationAction, GoalSpec, InvariantSet, MetricSnapshot, UtilityConfig, interval_utility
from .fast import ReactivePolicy, react
from .kb import EpisodeKind, ExperienceTuple, KnowledgeBase, snapshot_tags
from .reasoner.prompt import KB_TOOL, WM_TOOL, PromptConfig, ReasoningContext
from .reasoner.rules import standard_queries
from .reasoner.tools import InjectedTools, Toolbox
from .sim import Simulator
from .verifier import ACCEPT, ActuatorView, Verdict, verify
from .world_model import WorldModel

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdConfig:
    critical_response_time: float = 0.75
    # 1.0 can never be strictly exceeded, so utilization alone never triggers by default
    critical_utilization: float = 1.0
    monitor_interval: float = 10.0
    reasoner_interval: float = 60.0

    def __post_init__(self) -> None:
        for name in ("critical_response_time", "critical_utilization", "monitor_interval", "reasoner_interval"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.reasoner_interval < self.monitor_interval:
            raise ConfigurationError("reasoner_interval must be >= monitor_interval")


class Path(str, Enum):
    STABILIZATION = "Stabilization"
    STRATEGIC = "Strategic"
    IDLE = "Idle"


@dataclass(frozen=True)
class DispatchDecision:
    path: Path
    triggering_metric: tuple[str, float, float] | None = None

    def __post_init__(self) -> None:
        if self.path is Path.STABILIZATION and self.triggering_metric is None:
            raise ValueError("a Stabilization dispatch needs its triggering metric")


def reasoner_due(t: float, thresholds: ThresholdConfig) -> bool:
    k = t / thresholds.reasoner_interval
    return t > 0 and abs(k - round(k)) < 1e-9


def triage(snapshot: MetricSnapshot, thresholds: ThresholdConfig, due: bool | None = None) -> DispatchDecision:
    """Stabilization iff a critical metric strictly exceeds its threshold, else Strategic when a reasoner cycle is due."""
    checks = (
        ("avg_response_time", snapshot.avg_response_time, thresholds.critical_response_time),
        ("server_utilization", snapshot.server_utilization, thresholds.critical_utilization),
    )
    for name, value, limit in checks:
        if value > limit:
            return DispatchDecision(Path.STABILIZATION, (name, value, limit))
    if due is None:
        due = reasoner_due(snapshot.window_end, thresholds)
    return DispatchDecision(Path.STRATEGIC if due else Path.IDLE)


def build_context(
    goals: GoalSpec,
    invariants: InvariantSet,
    registry: Mapping[str, Any],
    snapshot: MetricSnapshot,
    evidence: Mapping[str, Any] | None = None,
) -> ReasoningContext:
    for name in (KB_TOOL.name, WM_TOOL.name):
        if registry.get(name) is None:
            raise ConfigurationError(f"tool registry has no {name!r} handle")
    tools = () if evidence is not None else (KB_TOOL, WM_TOOL)
    return ReasoningContext(goals, invariants, snapshot, tools, evidence)


# -- live configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ConfigView:
    prompt: PromptConfig
    thresholds: ThresholdConfig
    policy: ReactivePolicy
    invariants: InvariantSet
    goals: GoalSpec


class LiveConfig:
    """Current strategy objects. Readers take one ``view()`` per cycle; writers ``swap`` under ``lock``."""

    def __init__(
        self,
        prompt: PromptConfig | None = None,
        thresholds: ThresholdConfig | None = None,
        policy: ReactivePolicy | None = None,
        invariants: InvariantSet | None = None,
        goals: GoalSpec | None = None,
        wm: WorldModel | None = None,
    ):
        self.lock = threading.RLock()
        self._view = ConfigView(
            prompt or PromptConfig(),
            thresholds or ThresholdConfig(),
            policy or ReactivePolicy(),
            invariants or InvariantSet(),
            goals or GoalSpec(),
        )
        self.wm = wm or WorldModel()

    def view(self) -> ConfigView:
        with self.lock:
            return self._view

    def swap(self, **parts: Any) -> ConfigView:
        with self.lock:
            self._view = replace(self._view, **parts)
            return self._view


# -- run log ----------------------------------------------------------------------


@dataclass
class CycleRecord:
    cycle: int
    time: float
    snapshot: MetricSnapshot
    path: Path
    trigger: tuple[str, float, float] | None = None
    action: AdaptationAction | None = None
    verdict: Verdict | None = None
    ack_ok: bool | None = None
    flag: str = ""
    prompt_version: int = 0
    utility: float = 0.0
    meta: bool = False
    error: str = ""
    # wall-clock ms from snapshot closure to execution of a reactive action
    reaction_ms: float | None = None
    late_strategic: AdaptationAction | None = None
    discarded: bool = False

    def to_dict(self) -> dict[str, Any]:
        return {
            "cycle": self.cycle,
            "time": self.time,
            "path": self.path.value,
            "trigger": list(self.trigger) if self.trigger else None,
            "action": self.action.to_dict() if self.action else None,
            "verdict": self.verdict.to_dict() if self.verdict else None,
            "ack_ok": self.ack_ok,
            "flag": self.flag,
            "prompt_version": self.prompt_version,
            "utility": self.utility,
            "meta": self.meta,
            "error": self.error,
            "discarded": self.discarded,
        }


@dataclass
class ReasoningSample:
    """Timings of one Strategic decision; wall-clock milliseconds."""

    time: float
    end_to_end_ms: float
    tool_calls: list[tuple[str, float]] = field(default_factory=list)
    # time spent inside the KB / WM themselves
    operations: list[tuple[str, float]] = field(default_factory=list)
    llm_ms: list[float] = field(default_factory=list)
    flag: str = ""


@dataclass
class RunLog:
    records: list[CycleRecord] = field(default_factory=list)
    reasoning: list[ReasoningSample] = field(default_factory=list)
    meta_reports: list[Any] = field(default_factory=list)
    discarded: int = 0
    errors: int = 0

    def by_path(self, path: Path) -> list[CycleRecord]:
        return [r for r in self.records if r.path is path]


@dataclass
class _Pending:
    context: MetricSnapshot
    action: AdaptationAction
    verdict: Verdict
    ok: bool


class Kernel:
    """Wires the managed simulator to the reactive, proactive and meta loops.

    ``reasoner`` may be None for a Fast-Controller-only baseline; ``fast_enabled``
    False routes every tick through triage without the reactive path.
    ``tools_mode`` is "agent" (the engine calls the tools) or "injected"
    (standard evidence is computed up front and no calls are agent-initiated).
    """

    def __init__(
        self,
        sim: Simulator,
        bus: MessageBus,
        kb: KnowledgeBase,
        live: LiveConfig,
        reasoner: Any = None,
        meta: Any = None,
        utility: UtilityConfig | None = None,
        fast_enabled: bool = True,
        tools_mode: str = "agent",
        meta_period: int = 10,
        async_reasoner: bool = False,
        time_scale: float = 0.0,
    ):
        if tools_mode not in ("agent", "injected"):
            raise ConfigurationError(f"unknown tools mode {tools_mode!r}")
        self.sim = sim
        self.bus = bus
        self.kb = kb
        self.live = live
        self.reasoner = reasoner
        self.meta = meta
        self.utility = utility or UtilityConfig()
        self.fast_enabled = fast_enabled
        self.tools_mode = tools_mode
        self.meta_period = meta_period
        self.async_reasoner = async_reasoner
        self.time_scale = time_scale
        self.sla_bound = live.view().goals.sla_bound
        self.collector = MetricCollector(bus, simulator_probe(sim), sla_bound=self.sla_bound)
        self.adapter = ExecutionAdapter(sim, bus, kb)
        self.toolbox = Toolbox(kb, live.wm)
        self.registry: dict[str, Any] = {KB_TOOL.name: kb, WM_TOOL.name: live.wm}
        self.recent_actions: list[tuple[ActionKind, float]] = []
        self.log = RunLog()
        self.interval = live.view().thresholds.monitor_interval
        self._cycle = 0
        self._reasoner_cycles = 0
        self._prev: MetricSnapshot | None = None
        self._last_action: AdaptationAction | None = None
        self._pending: _Pending | None = None
        self._executor: ThreadPoolExecutor | None = None
        self._inflight: Future | None = None
        self._preempted = False

    # -- public ------------------------------------------------------------------

    def run_loop(self, cycles: int | None = None, until: float | None = None, stop: Callable[[RunLog], bool] | None = None) -> RunLog:
        if cycles is None and until is None and stop is None:
            raise ConfigurationError("run_loop needs a stop condition")
        if until is not None:
            n = math.ceil(until / self.interval - 1e-9)
            cycles = n - self._cycle if cycles is None else min(cycles, n - self._cycle)
        try:
            done = 0
            while cycles is None or done < cycles:
                self.tick()
                done += 1
                if stop is not None and stop(self.log):
                    break
                if self.time_scale > 0:
                    time.sleep(self.interval * self.time_scale)
        finally:
            self._drain()
        return self.log

    def tick(self) -> CycleRecord:
        self._cycle += 1
        end = self._cycle * self.interval
        view = self.live.view()
        try:
            snap = self._observe(end)
        except Exception as exc:
            log.exception("monitoring failed at t=%.1f; cycle skipped", end)
            self.log.errors += 1
            empty = MetricSnapshot(end - self.interval, end, 0.0, 0.0, 0.0, 0.0, self.sim.state.dimmer, max(self.sim.state.active_servers, 1), 0, 0, 0, 0)
            rec = CycleRecord(self._cycle, end, empty, Path.IDLE, error=f"{type(exc).__name__}: {exc}")
            self.log.records.append(rec)
            return rec

        due = reasoner_due(end, view.thresholds)
        decision = triage(snap, view.thresholds, due)
        path = decision.path
        if path is Path.STABILIZATION and not self.fast_enabled:
            path = Path.STRATEGIC if due else Path.IDLE
        if path is Path.STRATEGIC and self.reasoner is None:
            path = Path.IDLE
        rec = CycleRecord(self._cycle, end, snap, path, decision.triggering_metric, prompt_version=view.prompt.version)
        rec.utility = interval_utility(snap, self.utility, self.sla_bound)

        try:
            self._collect_async(rec, view)
            if path is Path.STABILIZATION:
                self._stabilize(rec, view)
            elif path is Path.STRATEGIC:
                self._strategic(rec, view)
        except Exception as exc:
            log.exception("dispatch failed at t=%.1f; cycle skipped", end)
            self.log.errors += 1
            rec.error = f"{type(exc).__name__}: {exc}"

        if self.meta is not None and due:
            self._reasoner_cycles += 1
            if self._reasoner_cycles % self.meta_period == 0:
                try:
                    self.log.meta_reports.append(self.meta.run(end))
                    rec.meta = True
                except Exception as exc:
                    log.exception("meta-learning failed at t=%.1f", end)
                    self.log.errors += 1
                    rec.error = rec.error or f"meta {type(exc).__name__}: {exc}"

        self.log.records.append(rec)
        return rec

    # -- stages ------------------------------------------------------------------

    def _observe(self, end: float) -> MetricSnapshot:
        samples = self.sim.step(end)
        publish_samples(self.bus, samples)
        snap = self.collector.collect(self.interval, end=end)
        self.kb.add(EpisodeKind.SNAPSHOT_RECORDED, end, {"snapshot": snap.to_dict()}, snapshot_tags(snap))
        if self._prev is not None:
            action = self._last_action or AdaptationAction.no_op(issued_at=self._prev.window_end)
            try:
                self.live.wm.update(self._prev, action, snap)
            except Exception:
                log.exception("world-model update failed")
        if self._pending is not None:
            p = self._pending
            self.kb.record_experience(
                ExperienceTuple(
                    p.context,
                    p.action,
                    p.verdict.accepted,
                    snap,
                    interval_utility(snap, self.utility, self.sla_bound),
                    p.verdict.names,
                    p.ok,
                )
            )
            self._pending = None
        self._prev = snap
        self._last_action = None
        return snap

    def _actuators(self) -> ActuatorView:
        st = self.sim.state
        return ActuatorView(st.active_servers, st.booting_servers, st.dimmer)

    def _gate(self, action: AdaptationAction, view: ConfigView, now: float, context: MetricSnapshot) -> tuple[Verdict, Ack | None]:
        if action.kind is ActionKind.NO_OP:
            self._pending = _Pending(context, action, ACCEPT, True)
            return ACCEPT, None
        verdict = verify(action, view.invariants, self._actuators(), self.recent_actions, now)
        if verdict.accepted:
            ack = self.adapter.execute(action, now)
            if ack.ok:
                self.recent_actions.append((action.kind, now))
                horizon = now - max(view.invariants.action_cooldown, self.interval) * 2
                self.recent_actions = [(k, t) for k, t in self.recent_actions if t >= horizon]
                self._last_action = action
        else:
            ack = self.adapter.reject(action, verdict, now)
        self._pending = _Pending(context, action, verdict, ack.ok)
        return verdict, ack

    def _stabilize(self, rec: CycleRecord, view: ConfigView) -> None:
        t0 = time.perf_counter()
        snap = rec.snapshot
        action = react(snap, view.invariants, view.policy)
        name, value, limit = rec.trigger
        self.kb.add(
            EpisodeKind.REACTIVE_TRIGGER,
            snap.window_end,
            {"metric": name, "value": value, "threshold": limit, "snapshot": snap.to_dict(), "action": action.to_dict()},
            {"crisis", "reactive", name, action.kind.value.lower()},
        )
        if self._inflight is not None:
            self._preempted = True
        verdict, ack = self._gate(action, view, snap.window_end, snap)
        rec.action, rec.verdict = action, verdict
        rec.ack_ok = ack.ok if ack else None
        if action.kind is ActionKind.NO_OP:
            rec.flag = "exhausted"
        rec.reaction_ms = (time.perf_counter() - t0) * 1e3

    def _context(self, view: ConfigView, snap: MetricSnapshot) -> tuple[ReasoningContext, Any]:
        if self.tools_mode == "injected":
            ctx0 = build_context(view.goals, view.invariants, self.registry, snap)
            kq, wq = standard_queries(ctx0, view.prompt)
            tools = InjectedTools.precompute(self.kb, self.live.wm, kq, wq)
            return build_context(view.goals, view.invariants, self.registry, snap, tools.evidence()), tools
        return build_context(view.goals, view.invariants, self.registry, snap), self.toolbox

    def _decide(self, ctx: ReasoningContext, view: ConfigView, tools: Any):
        llm_before = len(getattr(self.reasoner, "llm_calls", ()))
        decision = self.reasoner.decide(ctx, view.prompt, tools)
        sample = ReasoningSample(
            ctx.now,
            decision.latency_ms,
            [(c.name, c.latency_ms) for c in decision.tool_trace],
            [(c.name, c.inner_ms) for c in getattr(tools, "trace", ())],
            list(getattr(self.reasoner, "llm_calls", ())[llm_before:]),
            decision.flag,
        )
        return decision, sample

    def _record_decision(self, decision: Any, now: float, discarded: bool = False) -> None:
        payload = decision.to_dict() | {"discarded": discarded}
        tags = {"reasoner", decision.action.kind.value.lower()}
        if decision.flag:
            tags.add(decision.flag)
        if discarded:
            tags.add("discarded")
        self.kb.add(EpisodeKind.REASONER_DECISION, now, payload, tags)

    def _strategic(self, rec: CycleRecord, view: ConfigView) -> None:
        snap = rec.snapshot
        ctx, tools = self._context(view, snap)
        if self.async_reasoner:
            if self._inflight is None:
                self._executor = self._executor or ThreadPoolExecutor(max_workers=1, thread_name_prefix="reasoner")
                self._preempted = False
                self._inflight = self._executor.submit(self._decide, ctx, view, tools)
            return
        decision, sample = self._decide(ctx, view, tools)
        self.log.reasoning.append(sample)
        self._record_decision(decision, snap.window_end)
        rec.flag = decision.flag
        verdict, ack = self._gate(decision.action, view, snap.window_end, snap)
        rec.action, rec.verdict = decision.action, verdict
        rec.ack_ok = ack.ok if ack else None

    def _collect_async(self, rec: CycleRecord, view: ConfigView) -> None:
        """Pick up a finished asynchronous decision; discard it if a reactive dispatch preempted it."""
        fut = self._inflight
        if fut is None or not fut.done():
            return
        self._inflight = None
        decision, sample = fut.result()
        self.log.reasoning.append(sample)
        now = rec.snapshot.window_end
        if self._preempted or rec.path is Path.STABILIZATION:
            log.info("discarding reasoner decision %s preempted by stabilization", decision.action.label())
            self._record_decision(decision, now, discarded=True)
            self.log.discarded += 1
            rec.discarded = True
            self._preempted = False
            return
        self._record_decision(decision, now)
        action = replace(decision.action, issued_at=now)
        self._gate(action, view, now, rec.snapshot)
        rec.late_strategic = action

    def _drain(self) -> None:
        if self._inflight is not None:
            try:
                decision, sample = self._inflight.result()
                self.log.reasoning.append(sample)
                self._record_decision(decision, self.sim.state.clock, discarded=True)
                self.log.discarded += 1
            except Exception:
                log.exception("in-flight reasoner failed during shutdown")
            self._inflight = None
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None
