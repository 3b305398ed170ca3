"""Tool access for reasoning engines, with per-call latency tracing."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from typing import Any, Protocol

from ..kb import Episode, KBQuery, KnowledgeBase
from ..world_model import StateDistribution, WMQuery, WorldModel


class ToolError(RuntimeError):
    pass


@dataclass(frozen=True)
class ToolCall:
    name: str
    arguments: dict[str, Any]
    result: Any
    latency_ms: float
    # time spent inside the tool itself, excluding dispatch and serialization
    inner_ms: float = 0.0
    error: str = ""

    def summary(self) -> dict[str, Any]:
        """Deterministic view without timings."""
        return {"name": self.name, "arguments": self.arguments, "error": self.error}


class Tools(Protocol):
    def kb_query(self, q: KBQuery) -> list[Episode]: ...

    def wm_simulate(self, q: WMQuery) -> StateDistribution: ...


def query_key(name: str, q: KBQuery | WMQuery) -> str:
    return name + ":" + json.dumps(q.to_dict(), sort_keys=True)


class Toolbox:
    """Agent-initiated access to the knowledge base and world model.

    Every call lands in ``trace`` with its latency; ``begin()`` starts a fresh
    trace for a new decision.
    """

    def __init__(self, kb: KnowledgeBase, wm: WorldModel):
        self.kb = kb
        self.wm = wm
        self.trace: list[ToolCall] = []
        self.calls = {"kb_query": 0, "wm_simulate": 0}

    def begin(self) -> None:
        self.trace = []

    def kb_query(self, q: KBQuery) -> list[Episode]:
        t0 = time.perf_counter()
        self.calls["kb_query"] += 1
        try:
            result = self.kb.query(q)
        except Exception as exc:
            self._log("kb_query", q.to_dict(), None, t0, t0, str(exc))
            raise ToolError(f"kb_query failed: {exc}") from exc
        t1 = time.perf_counter()
        self._log("kb_query", q.to_dict(), [e.id for e in result], t0, t1)
        return result

    def wm_simulate(self, q: WMQuery) -> StateDistribution:
        t0 = time.perf_counter()
        self.calls["wm_simulate"] += 1
        try:
            result = self.wm.simulate(q)
        except Exception as exc:
            self._log("wm_simulate", q.to_dict(), None, t0, t0, str(exc))
            raise ToolError(f"wm_simulate failed: {exc}") from exc
        t1 = time.perf_counter()
        self._log("wm_simulate", q.to_dict(), result.to_dict(), t0, t1)
        return result

    def _log(self, name: str, args: dict, result: Any, t0: float, t1: float, error: str = "") -> None:
        done = time.perf_counter()
        self.trace.append(ToolCall(name, args, result, (done - t0) * 1e3, (t1 - t0) * 1e3, error))


class InjectedTools:
    """Answers a fixed, pre-computed set of queries; nothing is agent-initiated.

    Used for the no-tools ablation: the framework evaluates the standard evidence
    queries up front and hands the answers over, so ``trace`` stays empty.
    Queries outside the pre-computed set raise ``ToolError``.
    """

    def __init__(self, answers: dict[str, Any]):
        self._answers = answers
        self.trace: list[ToolCall] = []
        self.served = 0

    @classmethod
    def precompute(cls, kb: KnowledgeBase, wm: WorldModel, kb_queries: list[KBQuery], wm_queries: list[WMQuery]) -> InjectedTools:
        answers: dict[str, Any] = {}
        for q in kb_queries:
            answers[query_key("kb_query", q)] = kb.query(q)
        for q in wm_queries:
            answers[query_key("wm_simulate", q)] = wm.simulate(q)
        return cls(answers)

    def begin(self) -> None:
        self.trace = []

    def evidence(self) -> dict[str, Any]:
        out = {}
        for key, value in sorted(self._answers.items()):
            if isinstance(value, list):
                out[key] = [e.to_dict() for e in value]
            else:
                out[key] = value.to_dict()
        return out

    def _lookup(self, name: str, q: KBQuery | WMQuery) -> Any:
        key = query_key(name, q)
        if key not in self._answers:
            raise ToolError(f"{name} query not in the provided evidence")
        self.served += 1
        return self._answers[key]

    def kb_query(self, q: KBQuery) -> list[Episode]:
        return self._lookup("kb_query", q)

    def wm_simulate(self, q: WMQuery) -> StateDistribution:
        return self._lookup("wm_simulate", q)
