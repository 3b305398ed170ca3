"""Deliberative planner: prompt configuration plus interchangeable decision engines."""

from .base import Decision, Engine
from .external import EndpointConfig, ExternalEngine
from .prompt import (
    DEFAULT_DIRECTIVES,
    DIRECTIVE_RANGES,
    KB_TOOL,
    WM_TOOL,
    PromptConfig,
    ReasoningContext,
    RenderError,
    ToolDescriptor,
    render_prompt,
)
from .rules import RulesEngine, standard_queries
from .tools import InjectedTools, ToolCall, ToolError, Toolbox

__all__ = [
    "DEFAULT_DIRECTIVES",
    "DIRECTIVE_RANGES",
    "Decision",
    "EndpointConfig",
    "Engine",
    "ExternalEngine",
    "InjectedTools",
    "KB_TOOL",
    "PromptConfig",
    "ReasoningContext",
    "RenderError",
    "RulesEngine",
    "ToolCall",
    "ToolDescriptor",
    "ToolError",
    "Toolbox",
    "WM_TOOL",
    "render_prompt",
    "standard_queries",
]
