"""Experiment runner: wire every component around the simulator, run a trace, summarize."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Any

from .bus import MessageBus
from .config import RunConfig
from .domain import Origin
from .kb import EpisodeKind, KnowledgeBase
from .kernel import Kernel, LiveConfig, Path as DispatchPath, RunLog
from .meta import MetaLearner
from .reasoner import ExternalEngine, PromptConfig, RulesEngine
from .sim import ArrivalTrace, Simulator, load_trace
from .world_model import WorldModel

log = logging.getLogger(__name__)

BUNDLED_TRACES = ("constant", "bursty")

OVERHEAD_STAGES = ("End-to-End Reasoning", "LLM Call", "Tool Call", "KB Query", "WM Operation")


def bundled_trace(name: str) -> ArrivalTrace:
    if name not in BUNDLED_TRACES:
        raise ValueError(f"no bundled trace {name!r}; choose from {BUNDLED_TRACES}")
    return load_trace(resources.files("selfadapt").joinpath(f"data/{name}.trace").read_text())


def resolve_trace(spec: str) -> ArrivalTrace:
    """A bundled trace name or a path to a gap file."""
    if spec in BUNDLED_TRACES:
        return bundled_trace(spec)
    return load_trace(Path(spec).read_bytes())


@dataclass(frozen=True)
class Ablation:
    meta: bool = True
    tools: bool = True
    fast: bool = True
    reasoner: bool = True
    freeze_meta: bool = False

    @property
    def label(self) -> str:
        if not self.reasoner:
            return "reactive-baseline"
        parts = [name for name, on in (("meta", self.meta), ("tools", self.tools), ("fast", self.fast)) if not on]
        label = "full" if not parts else "".join(f"-{p}" for p in parts)
        return label + ("+frozen-meta" if self.freeze_meta and self.meta else "")


FULL = Ablation()
NO_META = Ablation(meta=False)
NO_TOOLS = Ablation(tools=False)
NO_FAST = Ablation(fast=False)
REACTIVE = Ablation(meta=False, reasoner=False)


@dataclass
class RunResult:
    config: RunConfig
    ablation: Ablation
    trace: ArrivalTrace
    kernel: Kernel
    log: RunLog
    report: RunReport


def build_kernel(cfg: RunConfig, trace: ArrivalTrace, ablation: Ablation = FULL, engine: Any = None, record_to: IO[str] | None = None) -> Kernel:
    sim = Simulator(cfg.sim, trace)
    bus = MessageBus(record_to=record_to)
    kb = KnowledgeBase(cfg.kb_retention)
    wm = WorldModel(
        mandatory_service_time=cfg.sim.mandatory_service_time,
        optional_service_time=cfg.sim.optional_service_time,
        boot_delay=cfg.sim.boot_delay,
        max_servers=cfg.sim.max_servers,
        rt_cap=cfg.world_model.rt_cap,
        smoothing=cfg.world_model.smoothing,
        recalibrate=cfg.world_model.recalibrate,
    )
    live = LiveConfig(PromptConfig(directives=cfg.directives), cfg.thresholds, cfg.policy, cfg.invariants, cfg.goals, wm)
    reasoner = None
    if ablation.reasoner:
        if engine is not None:
            reasoner = engine
        elif cfg.reasoner.engine == "external":
            reasoner = ExternalEngine(cfg.reasoner.endpoint)
        else:
            reasoner = RulesEngine()
    meta = MetaLearner(kb, live, cfg.meta, frozen=ablation.freeze_meta) if (ablation.meta and ablation.reasoner) else None
    return Kernel(
        sim,
        bus,
        kb,
        live,
        reasoner=reasoner,
        meta=meta,
        utility=cfg.utility,
        fast_enabled=ablation.fast,
        tools_mode="agent" if ablation.tools else "injected",
        meta_period=cfg.meta.meta_period,
    )


def run(
    cfg: RunConfig,
    trace: ArrivalTrace,
    ablation: Ablation = FULL,
    seed: int | None = None,
    engine: Any = None,
    record_to: IO[str] | None = None,
    cycles: int | None = None,
) -> RunResult:
    """Run the whole trace (or ``cycles`` ticks) and build the report."""
    if seed is not None:
        cfg = cfg.with_seed(seed)
    kernel = build_kernel(cfg, trace, ablation, engine, record_to)
    interval = cfg.thresholds.monitor_interval
    if cycles is None:
        cycles = max(1, math.ceil(trace.end / interval))
    run_log = kernel.run_loop(cycles=cycles)
    rep = report(run_log, kernel, cfg, ablation, trace)
    return RunResult(cfg, ablation, trace, kernel, run_log, rep)


# -- reporting ------------------------------------------------------------------


def _stats(values: list[float]) -> dict[str, float]:
    if not values:
        return {"count": 0, "mean_ms": 0.0, "p50_ms": 0.0, "p95_ms": 0.0, "max_ms": 0.0}
    ordered = sorted(values)
    q = statistics.quantiles(ordered, n=20, method="inclusive") if len(ordered) > 1 else [ordered[0]] * 19
    return {
        "count": len(ordered),
        "mean_ms": statistics.fmean(ordered),
        "p50_ms": statistics.median(ordered),
        "p95_ms": q[18],
        "max_ms": ordered[-1],
    }


def trace_digest(trace: ArrivalTrace) -> str:
    return hashlib.sha256(trace.to_text().encode()).hexdigest()


@dataclass
class RunReport:
    label: str
    seed: int
    cycles: int
    request_count: int
    optional_count: int
    late_count: int
    optional_pct: float
    late_pct: float
    avg_servers: float
    total_utility: float
    reactive_triggers: int
    strategic_cycles: int
    executed_actions: int
    rejected_actions: int
    meta_updates: int
    discarded_decisions: int
    errors: int
    final_prompt_version: int
    final_directives: dict[str, float]
    consumed: int
    fingerprint: str
    kb_fingerprint: str
    empty: bool = False
    intervals: list[dict[str, Any]] = field(default_factory=list)
    actions: list[dict[str, Any]] = field(default_factory=list)
    overheads: list[dict[str, Any]] = field(default_factory=list)
    meta_rows: list[dict[str, Any]] = field(default_factory=list)

    SUMMARY_FIELDS = (
        "label", "seed", "cycles", "request_count", "optional_count", "late_count", "optional_pct", "late_pct",
        "avg_servers", "total_utility", "reactive_triggers", "strategic_cycles", "executed_actions",
        "rejected_actions", "meta_updates", "discarded_decisions", "errors", "final_prompt_version",
        "consumed", "fingerprint", "kb_fingerprint", "empty",
    )  # fmt: skip

    def summary_row(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.SUMMARY_FIELDS}


def report(run_log: RunLog, kernel: Kernel, cfg: RunConfig, ablation: Ablation = FULL, trace: ArrivalTrace | None = None) -> RunReport:
    recs = run_log.records
    fp_src = {"config": cfg.to_dict(), "ablation": ablation.label, "trace": trace_digest(trace) if trace else ""}
    fingerprint = hashlib.sha256(json.dumps(fp_src, sort_keys=True).encode()).hexdigest()
    requests = sum(r.snapshot.request_count for r in recs)
    optional = sum(r.snapshot.optional_count for r in recs)
    late = sum(r.snapshot.late_count for r in recs)
    span = sum(r.snapshot.window_length for r in recs)
    servers = sum(r.snapshot.active_servers * r.snapshot.window_length for r in recs)
    total_utility = 0.0
    intervals = []
    actions = []
    for r in recs:
        total_utility += r.utility
        row = {"cycle": r.cycle, "time": r.time, "path": r.path.value}
        row.update(r.snapshot.to_dict())
        row.update(utility=r.utility, prompt_version=r.prompt_version, action=r.action.label() if r.action else "", error=r.error)
        intervals.append(row)
        for act, extra in ((r.action, {}), (r.late_strategic, {"flag": "late"})):
            if act is None:
                continue
            verdict = r.verdict if act is r.action else None
            actions.append(
                {
                    "cycle": r.cycle,
                    "time": r.time,
                    "path": r.path.value,
                    "origin": act.origin.value,
                    "kind": act.kind.value,
                    "dimmer_target": "" if act.dimmer_target is None else act.dimmer_target,
                    "accepted": "" if verdict is None else verdict.accepted,
                    "violations": "" if verdict is None else ";".join(verdict.names),
                    "ack_ok": "" if r.ack_ok is None or act is not r.action else r.ack_ok,
                    "flag": extra.get("flag", r.flag),
                    "rationale": act.rationale,
                }
            )

    overheads = []
    samples = run_log.reasoning
    by_stage: dict[str, list[float]] = {s: [] for s in OVERHEAD_STAGES}
    for s in samples:
        by_stage["End-to-End Reasoning"].append(s.end_to_end_ms)
        by_stage["LLM Call"].extend(s.llm_ms)
        by_stage["Tool Call"].extend(ms for _, ms in s.tool_calls)
        for name, ms in s.operations:
            by_stage["KB Query" if name == "kb_query" else "WM Operation"].append(ms)
    for stage in OVERHEAD_STAGES:
        overheads.append({"stage": stage, **_stats(by_stage[stage])})

    meta_rows = []
    for m in run_log.meta_reports:
        meta_rows.append(
            {
                "time": kernel.kb.get(m.episode_id).timestamp if m.episode_id else "",
                "prompt_version": m.prompt_version,
                "changes": ";".join(f"{c.key}:{c.old}->{c.new}" for c in m.applied),
                "heuristics": ";".join(m.update.heuristic_additions),
                "clamped": ";".join(m.clamped),
                "justification": m.update.justification,
            }
        )

    view = kernel.live.view()
    return RunReport(
        label=ablation.label,
        seed=cfg.sim.rng_seed,
        cycles=len(recs),
        request_count=requests,
        optional_count=optional,
        late_count=late,
        optional_pct=100.0 * optional / requests if requests else 0.0,
        late_pct=100.0 * late / requests if requests else 0.0,
        avg_servers=servers / span if span else 0.0,
        total_utility=total_utility,
        reactive_triggers=len(run_log.by_path(DispatchPath.STABILIZATION)),
        strategic_cycles=len(run_log.by_path(DispatchPath.STRATEGIC)),
        executed_actions=sum(1 for r in recs if r.ack_ok),
        rejected_actions=sum(1 for r in recs if r.verdict is not None and not r.verdict.accepted),
        meta_updates=sum(1 for m in run_log.meta_reports if m.applied or m.update.heuristic_additions),
        discarded_decisions=run_log.discarded,
        errors=run_log.errors,
        final_prompt_version=view.prompt.version,
        final_directives=dict(view.prompt.directives),
        consumed=kernel.sim.consumed,
        fingerprint=fingerprint,
        kb_fingerprint=kernel.kb.fingerprint(),
        empty=not recs,
        intervals=intervals,
        actions=actions,
        overheads=overheads,
        meta_rows=meta_rows,
    )


def _csv(rows: list[dict[str, Any]], fieldnames: list[str] | tuple[str, ...]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()


INTERVAL_FIELDS = (
    "cycle", "time", "path", "window_start", "window_end", "avg_response_time", "p95_response_time",
    "server_utilization", "arrival_rate", "dimmer", "active_servers", "booting_servers", "request_count",
    "late_count", "optional_count", "late_optional_count", "utility", "prompt_version", "action", "error",
)  # fmt: skip
ACTION_FIELDS = ("cycle", "time", "path", "origin", "kind", "dimmer_target", "accepted", "violations", "ack_ok", "flag", "rationale")
OVERHEAD_FIELDS = ("stage", "count", "mean_ms", "p50_ms", "p95_ms", "max_ms")
META_FIELDS = ("time", "prompt_version", "changes", "heuristics", "clamped", "justification")


def render_csvs(rep: RunReport) -> dict[str, str]:
    return {
        "summary.csv": _csv([rep.summary_row()], rep.SUMMARY_FIELDS),
        "intervals.csv": _csv(rep.intervals, INTERVAL_FIELDS),
        "actions.csv": _csv(rep.actions, ACTION_FIELDS),
        "overheads.csv": _csv(rep.overheads, OVERHEAD_FIELDS),
        "meta_updates.csv": _csv(rep.meta_rows, META_FIELDS),
    }


def write_report(rep: RunReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in render_csvs(rep).items():
        p = out / name
        p.write_text(text)
        written.append(p)
    return written


def reactive_trigger_count(result: RunResult) -> int:
    return sum(1 for e in result.kernel.kb.episodes() if e.kind is EpisodeKind.REACTIVE_TRIGGER)


def fast_actions(result: RunResult) -> list[Any]:
    return [r for r in result.log.records if r.action is not None and r.action.origin is Origin.FAST_CONTROLLER]


def ablation_suite(cfg: RunConfig, trace: ArrivalTrace, seed: int, ablations: tuple[Ablation, ...] = (FULL, NO_META, NO_TOOLS, NO_FAST)) -> dict[str, RunResult]:
    return {a.label: run(cfg, trace, a, seed=seed) for a in ablations}
