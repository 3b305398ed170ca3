"""Three-loop self-adaptation over a simulated web cluster.

A reactive fast controller handles crises, a proactive reasoner plans with a
knowledge base and a queueing world model, and a meta-learner rewrites the
reasoner's strategy from recorded experience.
"""

from .domain import (
    ActionKind,
    AdaptationAction,
    GoalSpec,
    InvariantSet,
    MetricSample,
    MetricSnapshot,
    Origin,
    SystemState,
    UtilityConfig,
    aggregate,
    interval_utility,
)
from .kernel import ConfigurationError, DispatchDecision, Kernel, LiveConfig, Path, ThresholdConfig, build_context, triage
from .sim import ArrivalTrace, SimConfig, Simulator, load_trace

__version__ = "0.1.0"

__all__ = [
    "ActionKind",
    "AdaptationAction",
    "ArrivalTrace",
    "ConfigurationError",
    "DispatchDecision",
    "GoalSpec",
    "InvariantSet",
    "Kernel",
    "LiveConfig",
    "MetricSample",
    "MetricSnapshot",
    "Origin",
    "Path",
    "SimConfig",
    "Simulator",
    "SystemState",
    "ThresholdConfig",
    "UtilityConfig",
    "aggregate",
    "build_context",
    "interval_utility",
    "load_trace",
    "triage",
]
