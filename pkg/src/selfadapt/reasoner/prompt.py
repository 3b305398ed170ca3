"""Prompt configuration, reasoning context and deterministic prompt rendering."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field, replace
from typing import Any, Mapping

from ..domain import ActionKind, GoalSpec, InvariantSet, MetricSnapshot


class RenderError(ValueError):
    pass


class PromptConfigError(ValueError):
    pass


# (low, high) inclusive physical range of every operational directive
DIRECTIVE_RANGES: dict[str, tuple[float, float]] = {
    "server_util_danger": (0.05, 1.0),
    "response_time_goal": (0.01, 10.0),
    "target_util": (0.05, 1.0),
    "dim_step": (0.01, 1.0),
    "restore_margin": (0.1, 1.0),
    "restore_risk_cap": (0.0, 1.0),
    "scale_in_windows": (1, 100),
    "prediction_horizon": (1.0, 3600.0),
}

DEFAULT_DIRECTIVES: dict[str, float] = {
    "server_util_danger": 0.90,
    "response_time_goal": 0.5,
    "target_util": 0.70,
    "dim_step": 0.15,
    "restore_margin": 0.8,
    "restore_risk_cap": 0.1,
    "scale_in_windows": 3,
    "prediction_horizon": 120.0,
}

DEFAULT_WORKFLOW: tuple[str, ...] = (
    "Analyze trends in the current window and query the knowledge base for recent crises.",
    "Gather info if needed.",
    "Simulate candidate actions with the world model before acting.",
    "Act: adjust the dimmer first (step ${dim_step}); scale servers only if utilization stays above ${server_util_danger}.",
)

OUTPUT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["action", "rationale"],
    "additionalProperties": False,
    "properties": {
        "action": {"enum": [k.value for k in ActionKind]},
        "dimmer_target": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "rationale": {"type": "string"},
    },
    "if": {"properties": {"action": {"const": "SetDimmer"}}},
    "then": {"required": ["dimmer_target"]},
    "else": {"not": {"required": ["dimmer_target"]}},
}

DEFAULT_TEMPLATE = """\
# Role
Proactive controller for a web cluster. Keep response time below the SLA bound of ${sla_bound} s using the dimmer and server scaling.

# Goals
- response_time_goal: ${goal_response_time} s
- prefer_max_dimmer: ${prefer_max_dimmer}
- minimize_servers: ${minimize_servers}

# Invariants (never violate)
${invariants}

# Directives
${directives}

# Current state (window ${window_start} s to ${window_end} s)
${snapshot}

# Tools
${tools}

# Workflow
${workflow}

# Learned heuristics
${heuristics}

# Output
Stable actions only: exactly one action per reply, respect cooldowns.
Reply with one JSON object matching this schema:
${output_schema}
"""


def fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return f"{v:.2f}" if round(v, 2) == v else f"{v:g}"
    return str(v)


@dataclass(frozen=True)
class PromptConfig:
    directives: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_DIRECTIVES))
    reasoning_workflow: tuple[str, ...] = DEFAULT_WORKFLOW
    output_schema: Mapping[str, Any] = field(default_factory=lambda: dict(OUTPUT_SCHEMA))
    learned_heuristics: tuple[str, ...] = ()
    template: str = DEFAULT_TEMPLATE
    version: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "directives", dict(self.directives))
        object.__setattr__(self, "reasoning_workflow", tuple(self.reasoning_workflow))
        object.__setattr__(self, "learned_heuristics", tuple(self.learned_heuristics))
        for key, value in self.directives.items():
            if key not in DIRECTIVE_RANGES:
                raise PromptConfigError(f"unknown directive {key!r}")
            lo, hi = DIRECTIVE_RANGES[key]
            if not lo <= value <= hi:
                raise PromptConfigError(f"directive {key}={value} outside [{lo}, {hi}]")

    def __getitem__(self, key: str) -> float:
        return self.directives[key]

    def evolve(self, **changes: Any) -> PromptConfig:
        """Copy with changes applied and the version bumped."""
        return replace(self, version=self.version + 1, **changes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "directives": dict(self.directives),
            "reasoning_workflow": list(self.reasoning_workflow),
            "learned_heuristics": list(self.learned_heuristics),
            "version": self.version,
        }


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    description: str
    parameters: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "description": self.description, "parameters": dict(self.parameters)}


KB_TOOL = ToolDescriptor(
    "kb_query",
    "Query episodic memory. Returns matching episodes newest-first.",
    {
        "semantic_filter": "list of keywords; an episode matches if any keyword is among its tags",
        "kinds": "optional list of episode kinds",
        "time_range": "optional [from, to] in simulated seconds",
        "constraints": "list of {path, op, value} numeric predicates over payload fields",
        "limit": "maximum number of episodes",
    },
)

WM_TOOL = ToolDescriptor(
    "wm_simulate",
    "Predict the next system state if an action is applied now. Returns mean/std of response time and utilization.",
    {
        "action": "{kind, dimmer_target?}",
        "horizon": "seconds ahead (server boots only count when horizon >= boot delay)",
        "state": "optional snapshot; defaults to the current one",
    },
)


@dataclass(frozen=True)
class ReasoningContext:
    goals: GoalSpec
    invariants: InvariantSet
    snapshot: MetricSnapshot
    tools: tuple[ToolDescriptor, ...] = (KB_TOOL, WM_TOOL)
    # pre-computed tool answers when agent-initiated tool use is disabled
    evidence: Mapping[str, Any] | None = None

    @property
    def now(self) -> float:
        return self.snapshot.window_end


def _invariants_text(inv: InvariantSet) -> str:
    lo, hi = inv.dimmer_range
    return "\n".join(
        [
            f"- max_servers: {inv.max_servers}",
            f"- min_servers: {inv.min_servers}",
            f"- dimmer_range: [{fmt_value(lo)}, {fmt_value(hi)}]",
            f"- action_cooldown: {fmt_value(inv.action_cooldown)} s",
            f"- max_actions_per_cycle: {inv.max_actions_per_cycle}",
        ]
    )


def _snapshot_text(s: MetricSnapshot) -> str:
    return "\n".join(
        [
            f"- avg_response_time: {s.avg_response_time:.4f} s",
            f"- p95_response_time: {s.p95_response_time:.4f} s",
            f"- server_utilization: {s.server_utilization:.4f}",
            f"- arrival_rate: {s.arrival_rate:.4f} req/s",
            f"- dimmer: {s.dimmer:.4f}",
            f"- active_servers: {s.active_servers}",
            f"- booting_servers: {s.booting_servers}",
            f"- requests: {s.request_count} (late {s.late_count}, optional {s.optional_count})",
        ]
    )


def _tools_text(ctx: ReasoningContext) -> str:
    if ctx.evidence is not None:
        return "No tools available. Pre-computed evidence:\n" + json.dumps(ctx.evidence, sort_keys=True, indent=2)
    if not ctx.tools:
        return "none"
    return "\n".join(json.dumps(t.to_dict(), sort_keys=True) for t in ctx.tools)


def render_prompt(conf: PromptConfig, ctx: ReasoningContext) -> str:
    """Expand the prompt template; identical inputs always give identical text."""
    variables: dict[str, str] = {k: fmt_value(v) for k, v in conf.directives.items()}
    variables.update(
        sla_bound=fmt_value(ctx.goals.sla_bound),
        goal_response_time=fmt_value(ctx.goals.response_time_goal),
        prefer_max_dimmer=fmt_value(ctx.goals.prefer_max_dimmer),
        minimize_servers=fmt_value(ctx.goals.minimize_servers),
        max_servers=str(ctx.invariants.max_servers),
        window_start=fmt_value(float(ctx.snapshot.window_start)),
        window_end=fmt_value(float(ctx.snapshot.window_end)),
    )

    def expand(text: str, mapping: Mapping[str, str]) -> str:
        try:
            return string.Template(text).substitute(mapping)
        except KeyError as exc:
            raise RenderError(f"unresolved template variable {exc.args[0]!r}") from None
        except ValueError as exc:
            raise RenderError(str(exc)) from None

    workflow = "\n".join(f"{i}. {expand(step, variables)}" for i, step in enumerate(conf.reasoning_workflow, 1))
    sections = dict(variables)
    sections.update(
        invariants=_invariants_text(ctx.invariants),
        directives="\n".join(f"- {k}: {fmt_value(v)}" for k, v in sorted(conf.directives.items())),
        snapshot=_snapshot_text(ctx.snapshot),
        tools=_tools_text(ctx),
        workflow=workflow,
        heuristics="\n".join(f"- {h}" for h in conf.learned_heuristics) or "- (none yet)",
        output_schema=json.dumps(conf.output_schema, sort_keys=True, indent=2),
    )
    return expand(conf.template, sections)
