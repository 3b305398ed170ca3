"""Outer loop: mine recorded episodes for recurring patterns and rewrite strategy parameters."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from statistics import fmean
from typing import Any, Iterable

from .kb import Episode, EpisodeKind, KnowledgeBase
from .kernel import LiveConfig
from .reasoner.prompt import DIRECTIVE_RANGES

log = logging.getLogger(__name__)


class PatternKind(str, Enum):
    REACTIVE_PRECURSOR = "ReactivePrecursor"
    OSCILLATION_LOOP = "OscillationLoop"
    PERSISTENT_LATENESS = "PersistentLateness"
    OVER_PROVISIONING = "OverProvisioning"


class Target(str, Enum):
    PROMPT = "PromptConfig.directives"
    THRESHOLDS = "ThresholdConfig"
    POLICY = "ReactivePolicy"
    INVARIANTS = "InvariantSet"
    WORLD_MODEL = "WorldModel"


class UpdateRejected(ValueError):
    pass


GRADUAL_HEURISTIC = "Prefer gradual changes"
SCALE_IN_HEURISTIC = "Explore removing a server when utilization stays low"

PARAM_RANGES: dict[Target, dict[str, tuple[float, float]]] = {
    Target.PROMPT: dict(DIRECTIVE_RANGES),
    Target.THRESHOLDS: {"critical_response_time": (0.05, 10.0), "critical_utilization": (0.05, 1.0)},
    Target.POLICY: {"dimmer_step": (0.01, 1.0), "min_dimmer": (0.0, 0.9)},
    Target.INVARIANTS: {"action_cooldown": (0.0, 3600.0)},
    Target.WORLD_MODEL: {"smoothing": (0.01, 1.0), "rt_cap": (0.5, 60.0)},
}

DEFAULT_ROUTING: dict[str, Target] = {key: target for target, keys in PARAM_RANGES.items() for key in keys}


@dataclass(frozen=True)
class Pattern:
    kind: PatternKind
    support: int
    window: float
    evidence: tuple[str, ...]
    statistic: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind.value,
            "support": self.support,
            "window": self.window,
            "evidence": list(self.evidence),
            "statistic": self.statistic,
        }


@dataclass(frozen=True)
class ParameterChange:
    target: Target
    key: str
    old: float
    new: float

    def to_dict(self) -> dict[str, Any]:
        return {"target": self.target.value, "key": self.key, "old": self.old, "new": self.new}


@dataclass(frozen=True)
class StrategyUpdate:
    parameter_changes: tuple[ParameterChange, ...] = ()
    heuristic_additions: tuple[str, ...] = ()
    justification: str = ""

    @property
    def empty(self) -> bool:
        return not self.parameter_changes and not self.heuristic_additions

    def to_dict(self) -> dict[str, Any]:
        return {
            "parameter_changes": [c.to_dict() for c in self.parameter_changes],
            "heuristic_additions": list(self.heuristic_additions),
            "justification": self.justification,
            "empty": self.empty,
        }


@dataclass(frozen=True)
class MetaConfig:
    reflection_rules: tuple[str, ...] = ("extract trends", "correlate patterns", "summarize insights")
    evolution_mappings: dict[PatternKind, str] = field(
        default_factory=lambda: {
            PatternKind.REACTIVE_PRECURSOR: "lower server_util_danger toward the precursor utilization",
            PatternKind.PERSISTENT_LATENESS: "lower target_util and shrink dim_step",
            PatternKind.OSCILLATION_LOOP: "add gradual-change heuristic and lengthen cooldown",
            PatternKind.OVER_PROVISIONING: "add scale-in heuristic",
        }
    )
    update_routing: dict[str, Target] = field(default_factory=lambda: dict(DEFAULT_ROUTING))
    min_support: int = 3
    damping: float = 1.0
    meta_period: int = 10
    precursor_floor: float = 0.6
    oscillation_span: float = 300.0
    persistence_windows: int = 3
    overprovision_floor: float = 0.3
    lookback: float | None = None
    statistic_decimals: int = 2

    def __post_init__(self) -> None:
        if self.min_support < 2:
            raise ValueError("min_support must be >= 2")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.meta_period < 1:
            raise ValueError("meta_period must be >= 1")
        missing = set(DEFAULT_ROUTING) - set(self.update_routing)
        if missing:
            raise ValueError(f"routing must cover every writable key; missing {sorted(missing)}")


# -- reflection -------------------------------------------------------------------


def _runs(flags: list[bool]) -> list[tuple[int, int]]:
    """Maximal [start, end) index ranges where ``flags`` is true."""
    out, start = [], None
    for i, f in enumerate(flags + [False]):
        if f and start is None:
            start = i
        elif not f and start is not None:
            out.append((start, i))
            start = None
    return out


def reflect(episodes: Iterable[Episode], conf: MetaConfig, min_servers: int = 1) -> list[Pattern]:
    """Detect recurring patterns; anything below ``min_support`` is dropped."""
    eps = sorted(episodes, key=lambda e: e.timestamp)
    snaps = [e for e in eps if e.kind is EpisodeKind.SNAPSHOT_RECORDED]
    executed = [e for e in eps if e.kind is EpisodeKind.ACTION_EXECUTED and e.payload.get("ok")]
    triggers = [e for e in eps if e.kind is EpisodeKind.REACTIVE_TRIGGER]
    span = (eps[-1].timestamp - eps[0].timestamp) if eps else 0.0
    window = snaps[0].payload["snapshot"]["window_end"] - snaps[0].payload["snapshot"]["window_start"] if snaps else 0.0
    patterns: list[Pattern] = []

    # extract trends: utilization of the window just before each crisis onset that ended in a scale-out
    snap_times = [s.timestamp for s in snaps]
    trigger_times = {t.timestamp for t in triggers}
    pre_utils, pre_ids = [], []
    for trig in triggers:
        if trig.payload.get("action", {}).get("kind") != "AddServer":
            continue
        if any(t < trig.timestamp and trig.timestamp - t <= window + 1e-9 for t in trigger_times):
            continue  # continuation of a crisis already under way
        followed = any(
            a.payload["action"]["kind"] == "AddServer" and trig.timestamp <= a.timestamp <= trig.timestamp + window
            for a in executed
        )
        if not followed:
            continue
        prior = [s for s, t in zip(snaps, snap_times) if t < trig.timestamp]
        if not prior:
            continue
        util = prior[-1].payload["snapshot"]["server_utilization"]
        if util >= conf.precursor_floor:
            pre_utils.append(util)
            pre_ids.append(trig.id)
    if pre_utils:
        patterns.append(
            Pattern(
                PatternKind.REACTIVE_PRECURSOR,
                len(pre_utils),
                span,
                tuple(pre_ids),
                round(fmean(pre_utils), conf.statistic_decimals),
            )
        )

    # alternating scale-out / scale-in within a short span
    server_moves = [a for a in executed if a.payload["action"]["kind"] in ("AddServer", "RemoveServer")]
    flips, flip_ids = 0, []
    for a, b in zip(server_moves, server_moves[1:]):
        if a.payload["action"]["kind"] != b.payload["action"]["kind"] and b.timestamp - a.timestamp <= conf.oscillation_span:
            flips += 1
            flip_ids.extend(x.id for x in (a, b) if x.id not in flip_ids)
    if flips:
        patterns.append(Pattern(PatternKind.OSCILLATION_LOOP, flips, span, tuple(flip_ids), float(flips)))

    # late windows in a row despite actions being taken
    k = conf.persistence_windows
    late_runs, late_ids, late_fracs = 0, [], []
    for lo, hi in _runs([s.payload["snapshot"]["late_count"] > 0 for s in snaps]):
        if hi - lo < k:
            continue
        t0, t1 = snaps[lo].timestamp, snaps[hi - 1].timestamp
        if not any(t0 <= a.timestamp <= t1 for a in executed):
            continue
        late_runs += 1
        late_ids.append(snaps[lo].id)
        for s in snaps[lo:hi]:
            snap = s.payload["snapshot"]
            late_fracs.append(snap["late_count"] / max(snap["request_count"], 1))
    if late_runs:
        patterns.append(
            Pattern(PatternKind.PERSISTENT_LATENESS, late_runs, span, tuple(late_ids), round(fmean(late_fracs), conf.statistic_decimals))
        )

    # idle capacity held for k windows
    idle = [
        s.payload["snapshot"]["server_utilization"] < conf.overprovision_floor
        and s.payload["snapshot"]["active_servers"] > min_servers
        for s in snaps
    ]
    idle_runs = [(lo, hi) for lo, hi in _runs(idle) if hi - lo >= k]
    if idle_runs:
        utils = [s.payload["snapshot"]["server_utilization"] for lo, hi in idle_runs for s in snaps[lo:hi]]
        patterns.append(
            Pattern(
                PatternKind.OVER_PROVISIONING,
                len(idle_runs),
                span,
                tuple(snaps[lo].id for lo, _ in idle_runs),
                round(fmean(utils), conf.statistic_decimals),
            )
        )

    return [p for p in patterns if p.support >= conf.min_support]


# -- evolution --------------------------------------------------------------------


def current_values(live: LiveConfig) -> dict[Target, dict[str, float]]:
    view = live.view()
    return {
        Target.PROMPT: dict(view.prompt.directives),
        Target.THRESHOLDS: {
            "critical_response_time": view.thresholds.critical_response_time,
            "critical_utilization": view.thresholds.critical_utilization,
        },
        Target.POLICY: {"dimmer_step": view.policy.dimmer_step, "min_dimmer": view.policy.min_dimmer},
        Target.INVARIANTS: {"action_cooldown": view.invariants.action_cooldown},
        Target.WORLD_MODEL: {"smoothing": live.wm.smoothing, "rt_cap": live.wm.rt_cap},
    }


def _r(x: float) -> float:
    return round(x, 6)


def evolve(patterns: list[Pattern], current: dict[Target, dict[str, float]], heuristics: Iterable[str], conf: MetaConfig) -> StrategyUpdate:
    """Map detected patterns to parameter and heuristic changes; no patterns gives an empty update."""
    changes: list[ParameterChange] = []
    added: list[str] = []
    notes: list[str] = []
    known = set(heuristics)
    prompt = current[Target.PROMPT]
    d = conf.damping

    def change(target: Target, key: str, new: float) -> None:
        old = current[target][key]
        new = _r(new)
        if new != old:
            changes.append(ParameterChange(target, key, old, new))

    def heuristic(text: str) -> None:
        if text not in known and text not in added:
            added.append(text)

    for p in patterns:
        if p.kind is PatternKind.REACTIVE_PRECURSOR:
            old = prompt["server_util_danger"]
            if p.statistic < old:
                change(Target.PROMPT, "server_util_danger", old - d * (old - p.statistic))
                notes.append(f"reactive triggers follow utilization ~{p.statistic:.2f} (support {p.support})")
        elif p.kind is PatternKind.PERSISTENT_LATENESS:
            factor = 1 - d / 10
            change(Target.PROMPT, "target_util", prompt["target_util"] * factor)
            change(Target.PROMPT, "dim_step", prompt["dim_step"] * factor)
            notes.append(f"late windows persist despite actions ({p.support} streaks)")
        elif p.kind is PatternKind.OSCILLATION_LOOP:
            heuristic(GRADUAL_HEURISTIC)
            cooldown = current[Target.INVARIANTS]["action_cooldown"]
            change(Target.INVARIANTS, "action_cooldown", max(cooldown, 1.0) * (1 + d / 2))
            notes.append(f"scale-out/scale-in oscillation ({p.support} flips)")
        elif p.kind is PatternKind.OVER_PROVISIONING:
            heuristic(SCALE_IN_HEURISTIC)
            notes.append(f"idle capacity held in {p.support} streaks")

    return StrategyUpdate(tuple(changes), tuple(added), "; ".join(notes))


# -- dissemination ----------------------------------------------------------------


@dataclass(frozen=True)
class AppliedReport:
    update: StrategyUpdate
    applied: tuple[ParameterChange, ...]
    clamped: tuple[str, ...]
    prompt_version: int
    episode_id: str


def apply_update(update: StrategyUpdate, live: LiveConfig, kb: KnowledgeBase | None, now: float, routing: dict[str, Target] | None = None) -> AppliedReport:
    """Write every change to its routed component in one step; any unknown key rejects the whole update."""
    routing = routing or DEFAULT_ROUTING
    for c in update.parameter_changes:
        if c.key not in routing or routing[c.key] is not Target(c.target):
            raise UpdateRejected(f"no route for {c.target}.{c.key}")

    applied: list[ParameterChange] = []
    clamped: list[str] = []
    with live.lock:
        view = live.view()
        directives = dict(view.prompt.directives)
        th, pol, inv = {}, {}, {}
        wm_changes = {}
        for c in update.parameter_changes:
            lo, hi = PARAM_RANGES[c.target][c.key]
            value = min(max(c.new, lo), hi)
            if value != c.new:
                clamped.append(c.key)
            if isinstance(view.prompt.directives.get(c.key), int) and c.target is Target.PROMPT:
                value = int(round(value))
            bucket = {
                Target.PROMPT: directives,
                Target.THRESHOLDS: th,
                Target.POLICY: pol,
                Target.INVARIANTS: inv,
                Target.WORLD_MODEL: wm_changes,
            }[c.target]
            bucket[c.key] = value
            applied.append(replace(c, new=value))

        prompt = view.prompt
        if update.heuristic_additions or any(c.target is Target.PROMPT for c in update.parameter_changes):
            prompt = prompt.evolve(
                directives=directives,
                learned_heuristics=prompt.learned_heuristics + tuple(update.heuristic_additions),
            )
        new_thresholds = replace(view.thresholds, **th) if th else view.thresholds
        new_policy = replace(view.policy, **pol) if pol else view.policy
        new_invariants = replace(view.invariants, **inv) if inv else view.invariants
        live.swap(prompt=prompt, thresholds=new_thresholds, policy=new_policy, invariants=new_invariants)
        for key, value in wm_changes.items():
            setattr(live.wm, key, value)

    payload = {
        "update": update.to_dict(),
        "applied": [c.to_dict() for c in applied],
        "clamped": clamped,
        "prompt_version": prompt.version,
    }
    ep = ""
    if kb is not None:
        tags = {"meta", "empty" if update.empty else "changed", *(c.key for c in applied)}
        ep = kb.add(EpisodeKind.META_UPDATE, now, payload, tags)
    if clamped:
        log.warning("meta update clamped %s", clamped)
    return AppliedReport(update, tuple(applied), tuple(clamped), prompt.version, ep)


class MetaLearner:
    """Rule-based reflect/evolve/apply cycle over the knowledge base.

    Evidence behind an applied change is consumed: a pattern only drives a
    further update once ``min_support`` new pieces of evidence have accrued,
    so multiplicative mappings do not compound on the same history.
    """

    def __init__(self, kb: KnowledgeBase, live: LiveConfig, conf: MetaConfig | None = None, frozen: bool = False, engine: Any = None):
        self.kb = kb
        self.live = live
        self.conf = conf or MetaConfig()
        self.frozen = frozen
        self.engine = engine
        self.reports: list[AppliedReport] = []
        self.last_patterns: list[Pattern] = []
        self.consumed: dict[PatternKind, set[str]] = {k: set() for k in PatternKind}

    def fresh(self, patterns: list[Pattern]) -> list[Pattern]:
        return [p for p in patterns if len(set(p.evidence) - self.consumed[p.kind]) >= self.conf.min_support]

    def episodes(self, now: float) -> list[Episode]:
        eps = self.kb.episodes()
        if self.conf.lookback is not None:
            eps = [e for e in eps if e.timestamp > now - self.conf.lookback]
        return eps

    def run(self, now: float) -> AppliedReport:
        view = self.live.view()
        patterns = self.fresh(reflect(self.episodes(now), self.conf, min_servers=view.invariants.min_servers))
        self.last_patterns = patterns
        if self.frozen:
            update = StrategyUpdate(justification="evolution frozen")
        elif self.engine is not None:
            update = self.engine.propose(patterns, current_values(self.live), view.prompt, self.kb.summarize(now, now))
        else:
            update = evolve(patterns, current_values(self.live), view.prompt.learned_heuristics, self.conf)
        try:
            report = apply_update(update, self.live, self.kb, now, self.conf.update_routing)
        except UpdateRejected as exc:
            log.warning("meta update rejected: %s", exc)
            report = apply_update(StrategyUpdate(justification=f"rejected: {exc}"), self.live, self.kb, now, self.conf.update_routing)
        if report.applied or report.update.heuristic_additions:
            for p in patterns:
                self.consumed[p.kind].update(p.evidence)
        self.reports.append(report)
        return report
