"""Run configuration: one YAML document with a section per component."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .domain import GoalSpec, InvariantSet, UtilityConfig
from .fast import ReactivePolicy
from .kb import DEFAULT_RETENTION
from .kernel import ConfigurationError, ThresholdConfig
from .meta import MetaConfig
from .reasoner.external import EndpointConfig
from .reasoner.prompt import DEFAULT_DIRECTIVES
from .sim import SimConfig


@dataclass(frozen=True)
class WorldModelConfig:
    rt_cap: float = 5.0
    smoothing: float = 0.1
    recalibrate: bool = False


@dataclass(frozen=True)
class ReasonerConfig:
    engine: str = "rules"
    endpoint: EndpointConfig = field(default_factory=EndpointConfig)

    def __post_init__(self) -> None:
        if self.engine not in ("rules", "external"):
            raise ConfigurationError(f"unknown reasoner engine {self.engine!r}")


@dataclass(frozen=True)
class RunConfig:
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    goals: GoalSpec = field(default_factory=GoalSpec)
    invariants: InvariantSet = field(default_factory=InvariantSet)
    utility: UtilityConfig = field(default_factory=UtilityConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    policy: ReactivePolicy = field(default_factory=ReactivePolicy)
    directives: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_DIRECTIVES))
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    reasoner: ReasonerConfig = field(default_factory=ReasonerConfig)
    kb_retention: int = DEFAULT_RETENTION

    def __post_init__(self) -> None:
        if self.invariants.max_servers != self.sim.max_servers:
            raise ConfigurationError(
                f"invariants.max_servers ({self.invariants.max_servers}) must match sim.max_servers ({self.sim.max_servers})"
            )
        if self.goals.sla_bound != self.sim.sla_bound:
            raise ConfigurationError("goals.sla_bound must match sim.sla_bound")
        unknown = set(self.directives) - set(DEFAULT_DIRECTIVES)
        if unknown:
            raise ConfigurationError(f"unknown directives {sorted(unknown)}")

    def with_seed(self, seed: int) -> RunConfig:
        return replace(self, sim=replace(self.sim, rng_seed=seed))

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["meta"] = {
            k: v for k, v in data["meta"].items() if k not in ("evolution_mappings", "update_routing", "reflection_rules")
        }
        data["invariants"]["dimmer_range"] = list(self.invariants.dimmer_range)
        return data

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _build(cls: type, data: Any, where: str) -> Any:
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"section {where!r} must be a mapping")
    known = {f.name for f in fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigurationError(f"unknown key(s) in {where!r}: {sorted(extra)}")
    kwargs = dict(data)
    if "dimmer_range" in kwargs:
        kwargs["dimmer_range"] = tuple(kwargs["dimmer_range"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid {where!r}: {exc}") from exc


def config_from_dict(data: dict[str, Any] | None) -> RunConfig:
    data = dict(data or {})
    sections = {
        "thresholds": ThresholdConfig,
        "goals": GoalSpec,
        "invariants": InvariantSet,
        "utility": UtilityConfig,
        "sim": SimConfig,
        "policy": ReactivePolicy,
        "world_model": WorldModelConfig,
        "meta": MetaConfig,
    }
    extra = set(data) - set(sections) - {"directives", "reasoner", "kb_retention"}
    if extra:
        raise ConfigurationError(f"unknown section(s): {sorted(extra)}")
    kwargs: dict[str, Any] = {name: _build(cls, data.get(name), name) for name, cls in sections.items()}
    directives = dict(DEFAULT_DIRECTIVES)
    directives.update(data.get("directives") or {})
    kwargs["directives"] = directives
    reasoner = dict(data.get("reasoner") or {})
    endpoint = _build(EndpointConfig, reasoner.pop("endpoint", None), "reasoner.endpoint")
    kwargs["reasoner"] = _build(ReasonerConfig, reasoner, "reasoner")
    kwargs["reasoner"] = replace(kwargs["reasoner"], endpoint=endpoint)
    if "kb_retention" in data:
        kwargs["kb_retention"] = int(data["kb_retention"])
    try:
        return RunConfig(**kwargs)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read a YAML run configuration; ``None`` loads the bundled defaults."""
    if path is None:
        text = resources.files("selfadapt").joinpath("data/default.yaml").read_text()
    else:
        text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"cannot parse config: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    return config_from_dict(data)
