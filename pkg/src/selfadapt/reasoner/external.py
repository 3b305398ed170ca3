"""Client for an external reasoning endpoint speaking a small JSON tool-call protocol.

Each turn the framework POSTs::

    {"protocol": "selfadapt.reasoner/1",
     "messages": [{"role": "user", "content": <prompt>}, ...],
     "tools": [<descriptor>, ...],
     "output_schema": {...}}

and the endpoint answers with exactly one envelope::

    {"type": "tool_call", "name": "kb_query" | "wm_simulate", "arguments": {...}}
    {"type": "final", "output": {"action": ..., "dimmer_target": ..., "rationale": ...}}

Tool results go back as ``{"role": "tool", "name": ..., "content": <json text>}``;
schema problems as ``{"role": "system", "content": "invalid output: ..."}``.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, replace
from typing import Any, Callable

import httpx
import jsonschema

from ..domain import ActionKind, AdaptationAction, Origin
from ..kb import KBQuery
from ..world_model import WMQuery
from .base import Decision, Engine
from .prompt import PromptConfig, ReasoningContext, render_prompt
from .tools import ToolCall, ToolError, Tools

log = logging.getLogger(__name__)

PROTOCOL = "selfadapt.reasoner/1"
URL_ENV = "SELFADAPT_REASONER_URL"


@dataclass(frozen=True)
class EndpointConfig:
    url: str = "http://127.0.0.1:8765/decide"
    timeout: float = 30.0
    max_retries: int = 2
    max_tool_calls: int = 6

    @classmethod
    def from_env(cls, base: EndpointConfig | None = None) -> EndpointConfig:
        base = base or cls()
        url = os.environ.get(URL_ENV)
        return replace(base, url=url) if url else base


class TransportError(RuntimeError):
    pass


def http_transport(cfg: EndpointConfig, client: httpx.Client | None = None) -> Callable[[dict], str]:
    """POST one request body, return the raw response text."""
    client = client or httpx.Client(timeout=cfg.timeout)

    def send(body: dict) -> str:
        try:
            resp = client.post(cfg.url, json=body)
            resp.raise_for_status()
        except httpx.TimeoutException as exc:
            raise TransportError(f"timeout: {exc}") from exc
        except httpx.HTTPError as exc:
            raise TransportError(f"transport: {exc}") from exc
        return resp.text

    return send


def _serialize_result(result: Any) -> Any:
    if isinstance(result, list):
        return [e.to_dict() for e in result]
    return result.to_dict()


def run_tool(tools: Tools, ctx: ReasoningContext, name: str, arguments: dict) -> Any:
    if name == "kb_query":
        return tools.kb_query(KBQuery.from_dict(arguments))
    if name == "wm_simulate":
        args = dict(arguments)
        args.setdefault("state", ctx.snapshot.to_dict())
        args.setdefault("horizon", 120.0)
        action = args.get("action") or {}
        args["action"] = {"origin": Origin.REASONER.value, "issued_at": ctx.now, **action}
        return tools.wm_simulate(WMQuery.from_dict(args))
    raise ToolError(f"unknown tool {name!r}")


class ExternalEngine:
    engine = Engine.EXTERNAL

    def __init__(self, endpoint: EndpointConfig | None = None, transport: Callable[[dict], str] | None = None):
        self.endpoint = EndpointConfig.from_env(endpoint)
        self._send = transport or http_transport(self.endpoint)
        self.llm_calls: list[float] = []  # per-request latency, ms
        self.exchanges: list[dict] = []

    def _fail(self, ctx: ReasoningContext, flag: str, why: str, trace: list[ToolCall], t0: float) -> Decision:
        log.warning("external reasoner fell back to NoOp (%s): %s", flag, why)
        action = AdaptationAction.no_op(Origin.REASONER, ctx.now, f"{flag}: {why}")
        return Decision(action, action.rationale, Engine.EXTERNAL, tuple(trace), flag, (time.perf_counter() - t0) * 1e3)

    def decide(self, ctx: ReasoningContext, conf: PromptConfig, tools: Tools) -> Decision:
        t0 = time.perf_counter()
        trace: list[ToolCall] = []
        if hasattr(tools, "begin"):
            tools.begin()
        try:
            prompt = render_prompt(conf, ctx)
        except Exception as exc:
            return self._fail(ctx, "render_error", str(exc), trace, t0)
        messages: list[dict] = [{"role": "user", "content": prompt}]
        descriptors = [] if ctx.evidence is not None else [t.to_dict() for t in ctx.tools]
        invalid = 0
        calls = 0
        while True:
            body = {"protocol": PROTOCOL, "messages": messages, "tools": descriptors, "output_schema": conf.output_schema}
            s = time.perf_counter()
            try:
                raw = self._send(body)
            except TransportError as exc:
                return self._fail(ctx, "transport_error", str(exc), trace, t0)
            except Exception as exc:  # any client-side failure is still fail-safe
                return self._fail(ctx, "transport_error", repr(exc), trace, t0)
            finally:
                self.llm_calls.append((time.perf_counter() - s) * 1e3)
            self.exchanges.append({"request_messages": len(messages), "reply": raw[:2000]})

            try:
                reply = json.loads(raw)
                if not isinstance(reply, dict):
                    raise ValueError("reply is not a JSON object")
                kind = reply.get("type")
            except ValueError as exc:
                invalid += 1
                if invalid > self.endpoint.max_retries:
                    return self._fail(ctx, "invalid_output", f"unparseable reply after {invalid} attempts", trace, t0)
                messages.append({"role": "system", "content": f"invalid output: {exc}"})
                continue

            if kind == "tool_call":
                if calls >= self.endpoint.max_tool_calls:
                    return self._fail(ctx, "budget_exhausted", f"more than {self.endpoint.max_tool_calls} tool calls", trace, t0)
                calls += 1
                name = str(reply.get("name"))
                args = reply.get("arguments") or {}
                ts = time.perf_counter()
                try:
                    if not isinstance(args, dict):
                        raise ToolError("arguments must be an object")
                    result = _serialize_result(run_tool(tools, ctx, name, args))
                    err = ""
                except Exception as exc:
                    result, err = {"error": str(exc)}, str(exc)
                content = json.dumps(result, sort_keys=True)
                trace.append(ToolCall(name, args, result, (time.perf_counter() - ts) * 1e3, error=err))
                messages.append({"role": "tool", "name": name, "content": content})
                continue

            if kind == "final":
                output = reply.get("output")
                try:
                    jsonschema.validate(output, conf.output_schema)
                except jsonschema.ValidationError as exc:
                    invalid += 1
                    if invalid > self.endpoint.max_retries:
                        return self._fail(ctx, "invalid_output", f"schema violation: {exc.message}", trace, t0)
                    messages.append({"role": "system", "content": f"invalid output: {exc.message}"})
                    continue
                action = AdaptationAction(
                    ActionKind(output["action"]), Origin.REASONER, output.get("dimmer_target"), ctx.now, output["rationale"]
                )
                return Decision(action, output["rationale"], Engine.EXTERNAL, tuple(trace), "", (time.perf_counter() - t0) * 1e3)

            invalid += 1
            if invalid > self.endpoint.max_retries:
                return self._fail(ctx, "invalid_output", f"unknown envelope type {kind!r}", trace, t0)
            messages.append({"role": "system", "content": f"invalid output: unknown type {kind!r}"})
