"""Deterministic reasoning engine: ordered rules, first match wins, every consultation traced."""

from __future__ import annotations

import time
from dataclasses import replace

from ..domain import ActionKind, AdaptationAction, Origin
from ..kb import EpisodeKind, FieldConstraint, KBQuery
from ..world_model import WMQuery
from .base import Decision, Engine
from .prompt import PromptConfig, ReasoningContext
from .tools import ToolError, Tools


def crisis_query(ctx: ReasoningContext, conf: PromptConfig) -> KBQuery:
    now = ctx.now
    return KBQuery(
        semantic_filter=("crisis",),
        kinds=frozenset({EpisodeKind.REACTIVE_TRIGGER}),
        time_range=(max(0.0, now - conf["prediction_horizon"]), now),
        limit=5,
    )


def low_util_query(ctx: ReasoningContext, conf: PromptConfig) -> KBQuery:
    k = int(conf["scale_in_windows"])
    w = ctx.snapshot.window_length
    now = ctx.now
    return KBQuery(
        kinds=frozenset({EpisodeKind.SNAPSHOT_RECORDED}),
        time_range=(now - (k - 0.5) * w, now),
        constraints=(FieldConstraint("snapshot.server_utilization", "<", conf["target_util"]),),
        limit=k,
    )


def _wm(ctx: ReasoningContext, conf: PromptConfig, action: AdaptationAction, restore_dimmer: float | None = None) -> WMQuery:
    state = ctx.snapshot if restore_dimmer is None else replace(ctx.snapshot, dimmer=restore_dimmer)
    return WMQuery(action, state, conf["prediction_horizon"])


def _act(kind: ActionKind, ctx: ReasoningContext, target: float | None = None, why: str = "") -> AdaptationAction:
    return AdaptationAction(kind, Origin.REASONER, target, ctx.now, why)


def _raise_target(ctx: ReasoningContext, conf: PromptConfig) -> float:
    return round(min(ctx.snapshot.dimmer + conf["dim_step"], ctx.invariants.dimmer_range[1]), 10)


def _lower_target(ctx: ReasoningContext, conf: PromptConfig) -> float:
    return round(max(ctx.snapshot.dimmer - conf["dim_step"], ctx.invariants.dimmer_range[0]), 10)


def standard_queries(ctx: ReasoningContext, conf: PromptConfig) -> tuple[list[KBQuery], list[WMQuery]]:
    """Every query the rules engine may issue for this context."""
    hi = ctx.invariants.dimmer_range[1]
    wm = [
        _wm(ctx, conf, _act(ActionKind.NO_OP, ctx)),
        _wm(ctx, conf, _act(ActionKind.ADD_SERVER, ctx)),
        _wm(ctx, conf, _act(ActionKind.ADD_SERVER, ctx), restore_dimmer=hi),
        _wm(ctx, conf, _act(ActionKind.SET_DIMMER, ctx, _raise_target(ctx, conf))),
        _wm(ctx, conf, _act(ActionKind.REMOVE_SERVER, ctx)),
    ]
    return [crisis_query(ctx, conf), low_util_query(ctx, conf)], wm


class RulesEngine:
    engine = Engine.RULES

    def decide(self, ctx: ReasoningContext, conf: PromptConfig, tools: Tools) -> Decision:
        t0 = time.perf_counter()
        if hasattr(tools, "begin"):
            tools.begin()
        try:
            action, why = self._evaluate(ctx, conf, tools)
            flag = ""
        except ToolError as exc:
            action, why, flag = AdaptationAction.no_op(Origin.REASONER, ctx.now), f"tool failure, holding: {exc}", "tool_error"
        action = replace(action, rationale=why)
        trace = tuple(getattr(tools, "trace", ()))
        return Decision(action, why, Engine.RULES, trace, flag, (time.perf_counter() - t0) * 1e3)

    def _evaluate(self, ctx: ReasoningContext, conf: PromptConfig, tools: Tools) -> tuple[AdaptationAction, str]:
        snap = ctx.snapshot
        inv = ctx.invariants
        lo, hi = inv.dimmer_range
        goal = conf["response_time_goal"]
        sla = ctx.goals.sla_bound
        risk_cap = conf["restore_risk_cap"]

        crises = tools.kb_query(crisis_query(ctx, conf))
        history = f"{len(crises)} reactive trigger(s) in the last {conf['prediction_horizon']:g}s"

        # 1. sustained high utilization: scale out if the model says it helps
        if snap.server_utilization > conf["server_util_danger"] and snap.total_servers < inv.max_servers:
            base = tools.wm_simulate(_wm(ctx, conf, _act(ActionKind.NO_OP, ctx)))
            added = tools.wm_simulate(_wm(ctx, conf, _act(ActionKind.ADD_SERVER, ctx)))
            if added.mean_response_time < base.mean_response_time:
                why = (
                    f"utilization {snap.server_utilization:.2f} > danger {conf['server_util_danger']:.2f}; "
                    f"{history}; add_server predicts rt {added.mean_response_time:.3f}s vs {base.mean_response_time:.3f}s"
                )
                if snap.dimmer < hi:
                    restored = tools.wm_simulate(_wm(ctx, conf, _act(ActionKind.ADD_SERVER, ctx), restore_dimmer=hi))
                    why += f"; with dimmer restored to {hi:g} rt {restored.mean_response_time:.3f}s"
                return _act(ActionKind.ADD_SERVER, ctx), why

        # 2. above the response-time goal: degrade gracefully first
        if snap.avg_response_time > goal and snap.dimmer > lo:
            target = _lower_target(ctx, conf)
            return (
                _act(ActionKind.SET_DIMMER, ctx, target),
                f"avg rt {snap.avg_response_time:.3f}s > goal {goal:g}s; {history}; dimmer -> {target:g}",
            )

        # 3. comfortably fast with content switched off: restore fidelity if safe
        if snap.avg_response_time < goal * conf["restore_margin"] and snap.dimmer < hi:
            target = _raise_target(ctx, conf)
            pred = tools.wm_simulate(_wm(ctx, conf, _act(ActionKind.SET_DIMMER, ctx, target)))
            risk = pred.prob_rt_exceeds(sla)
            if risk < risk_cap:
                return (
                    _act(ActionKind.SET_DIMMER, ctx, target),
                    f"avg rt {snap.avg_response_time:.3f}s well under goal; {history}; dimmer {target:g} predicts "
                    f"rt {pred.mean_response_time:.3f}s, P(rt>{sla:g}s)={risk:.3f}",
                )

        # 4. persistently idle capacity: scale in if the model says it stays safe
        if snap.active_servers > inv.min_servers and snap.booting_servers == 0:
            k = int(conf["scale_in_windows"])
            low = tools.kb_query(low_util_query(ctx, conf))
            if len(low) >= k:
                pred = tools.wm_simulate(_wm(ctx, conf, _act(ActionKind.REMOVE_SERVER, ctx)))
                if (
                    pred.mean_utilization <= conf["target_util"]
                    and pred.mean_response_time < goal
                    and pred.prob_rt_exceeds(sla) < risk_cap
                ):
                    return (
                        _act(ActionKind.REMOVE_SERVER, ctx),
                        f"utilization below {conf['target_util']:g} for {k} windows; remove_server predicts "
                        f"util {pred.mean_utilization:.2f}, rt {pred.mean_response_time:.3f}s",
                    )

        return AdaptationAction.no_op(Origin.REASONER, ctx.now), f"nominal; {history}"
