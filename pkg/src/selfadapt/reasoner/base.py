from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from ..domain import AdaptationAction
from .tools import ToolCall


class Engine(str, Enum):
    RULES = "Rules"
    EXTERNAL = "External"


@dataclass(frozen=True)
class Decision:
    action: AdaptationAction
    rationale: str
    engine: Engine
    tool_trace: tuple[ToolCall, ...] = ()
    # failure marker for fail-safe NoOps: "", "tool_error", "invalid_output", "budget_exhausted", "transport_error", ...
    flag: str = ""
    latency_ms: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict[str, Any]:
        """Deterministic view (timings excluded)."""
        return {
            "action": self.action.to_dict(),
            "rationale": self.rationale,
            "engine": self.engine.value,
            "tools": [c.summary() for c in self.tool_trace],
            "flag": self.flag,
        }
