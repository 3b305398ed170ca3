"""Episodic memory: append-only store with keyword-plus-predicate queries."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import operator
import threading
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import IO, Any, Callable, Iterable

from .domain import AdaptationAction, MetricSnapshot

# Bump whenever the auto-tagging rules below change meaning.
TAG_RULES_VERSION = 1

DEFAULT_RETENTION = 100_000


class EpisodeKind(str, Enum):
    SNAPSHOT_RECORDED = "SnapshotRecorded"
    ACTION_EXECUTED = "ActionExecuted"
    ACTION_REJECTED = "ActionRejected"
    REACTIVE_TRIGGER = "ReactiveTrigger"
    REASONER_DECISION = "ReasonerDecision"
    META_UPDATE = "MetaUpdate"
    EXPERIENCE = "Experience"


class KnowledgeBaseError(ValueError):
    pass


class DuplicateEpisodeError(KnowledgeBaseError):
    pass


@dataclass(frozen=True)
class Episode:
    id: str
    timestamp: float
    kind: EpisodeKind
    tags: frozenset[str]
    payload: dict[str, Any]

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EpisodeKind(self.kind))
        object.__setattr__(self, "tags", frozenset(t.lower() for t in self.tags))

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "timestamp": self.timestamp,
            "kind": self.kind.value,
            "tags": sorted(self.tags),
            "payload": self.payload,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Episode:
        return cls(data["id"], data["timestamp"], EpisodeKind(data["kind"]), frozenset(data["tags"]), data["payload"])


_OPS: dict[str, Callable[[float, float], bool]] = {
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
    "==": operator.eq,
    "!=": operator.ne,
}


@dataclass(frozen=True)
class FieldConstraint:
    """Numeric predicate over a dotted payload path, e.g. ``("snapshot.server_utilization", ">", 0.8)``."""

    path: str
    op: str
    value: float

    def __post_init__(self) -> None:
        if self.op not in _OPS:
            raise KnowledgeBaseError(f"unknown operator {self.op!r}")

    def holds(self, payload: dict[str, Any]) -> bool:
        node: Any = payload
        for part in self.path.split("."):
            if not isinstance(node, dict) or part not in node:
                return False
            node = node[part]
        if isinstance(node, bool) or not isinstance(node, (int, float)):
            return False
        return _OPS[self.op](node, self.value)

    def to_dict(self) -> dict[str, Any]:
        return {"path": self.path, "op": self.op, "value": self.value}


@dataclass(frozen=True)
class KBQuery:
    semantic_filter: tuple[str, ...] = ()
    kinds: frozenset[EpisodeKind] | None = None
    time_range: tuple[float, float] | None = None
    constraints: tuple[FieldConstraint, ...] = ()
    limit: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "semantic_filter", tuple(k.lower() for k in self.semantic_filter))
        if self.kinds is not None:
            object.__setattr__(self, "kinds", frozenset(EpisodeKind(k) for k in self.kinds))
        object.__setattr__(self, "constraints", tuple(self.constraints))
        if self.limit < 1:
            raise KnowledgeBaseError("limit must be >= 1")
        if self.time_range is not None and self.time_range[0] > self.time_range[1]:
            raise KnowledgeBaseError(f"time range {self.time_range} is not well ordered")

    def matches(self, ep: Episode) -> bool:
        if self.kinds is not None and ep.kind not in self.kinds:
            return False
        if self.time_range is not None and not self.time_range[0] <= ep.timestamp <= self.time_range[1]:
            return False
        if not all(c.holds(ep.payload) for c in self.constraints):
            return False
        if self.semantic_filter and not ep.tags.intersection(self.semantic_filter):
            return False
        return True

    def to_dict(self) -> dict[str, Any]:
        return {
            "semantic_filter": list(self.semantic_filter),
            "kinds": sorted(k.value for k in self.kinds) if self.kinds is not None else None,
            "time_range": list(self.time_range) if self.time_range is not None else None,
            "constraints": [c.to_dict() for c in self.constraints],
            "limit": self.limit,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> KBQuery:
        kinds = data.get("kinds")
        tr = data.get("time_range")
        return cls(
            semantic_filter=tuple(data.get("semantic_filter") or ()),
            kinds=frozenset(EpisodeKind(k) for k in kinds) if kinds is not None else None,
            time_range=(float(tr[0]), float(tr[1])) if tr is not None else None,
            constraints=tuple(FieldConstraint(c["path"], c["op"], float(c["value"])) for c in data.get("constraints") or ()),
            limit=int(data.get("limit", 10)),
        )


@dataclass(frozen=True)
class ExperienceTuple:
    """(context, decision, outcome) for one adaptation cycle."""

    context: MetricSnapshot
    action: AdaptationAction
    accepted: bool
    outcome: MetricSnapshot
    utility: float
    violations: tuple[str, ...] = ()
    executed_ok: bool = True

    def to_payload(self) -> dict[str, Any]:
        return {
            "context": self.context.to_dict(),
            "decision": {
                "action": self.action.to_dict(),
                "accepted": self.accepted,
                "violations": list(self.violations),
                "executed_ok": self.executed_ok,
            },
            "outcome": {"snapshot": self.outcome.to_dict(), "utility": self.utility},
        }


def snapshot_tags(snap: MetricSnapshot) -> set[str]:
    tags = {"snapshot"}
    if snap.late_count:
        tags.add("late")
    if snap.request_count == 0:
        tags.add("idle")
    return tags


def experience_tags(eps: ExperienceTuple) -> set[str]:
    tags = {
        "experience",
        eps.action.origin.value.lower(),
        eps.action.kind.value.lower(),
        "accepted" if eps.accepted else "rejected",
    }
    if eps.action.origin.value == "FastController":
        tags.add("crisis")
    if eps.outcome.late_count:
        tags.add("late")
    if eps.context.late_count and not eps.outcome.late_count:
        tags.add("recovered")
    if eps.outcome.avg_response_time < eps.context.avg_response_time:
        tags.add("improved")
    if not eps.executed_ok:
        tags.add("failed")
    return tags


@dataclass
class _Slot:
    seq: int
    episode: Episode


class KnowledgeBase:
    """In-memory ring buffer of episodes.

    One writer and any number of readers; readers work on a consistent copy of
    the store taken under the lock. Stored payloads are private deep copies.
    """

    def __init__(self, retention: int = DEFAULT_RETENTION):
        if retention < 1:
            raise KnowledgeBaseError("retention must be >= 1")
        self._slots: deque[_Slot] = deque(maxlen=retention)
        self._index: dict[str, _Slot] = {}
        self._seq = itertools.count()
        self._ids = itertools.count(1)
        self._lock = threading.RLock()
        self.query_count = 0

    def __len__(self) -> int:
        return len(self._slots)

    def record(self, episode: Episode) -> str:
        with self._lock:
            if episode.id in self._index:
                raise DuplicateEpisodeError(f"episode id {episode.id!r} already stored")
            stored = Episode(episode.id, float(episode.timestamp), episode.kind, episode.tags, copy.deepcopy(episode.payload))
            if len(self._slots) == self._slots.maxlen:
                evicted = self._slots[0]
                self._index.pop(evicted.episode.id, None)
            slot = _Slot(next(self._seq), stored)
            self._slots.append(slot)
            self._index[stored.id] = slot
            return stored.id

    def add(self, kind: EpisodeKind, timestamp: float, payload: dict[str, Any], tags: Iterable[str] = ()) -> str:
        """Record with an auto-assigned id."""
        with self._lock:
            ep_id = f"ep{next(self._ids):08d}"
            while ep_id in self._index:
                ep_id = f"ep{next(self._ids):08d}"
            tag_set = set(tags) or {EpisodeKind(kind).value.lower()}
            return self.record(Episode(ep_id, timestamp, kind, frozenset(tag_set), payload))

    def get(self, episode_id: str) -> Episode:
        with self._lock:
            try:
                return self._index[episode_id].episode
            except KeyError:
                raise KeyError(episode_id) from None

    def episodes(self) -> list[Episode]:
        """Oldest-first copy of the store."""
        with self._lock:
            return [s.episode for s in self._slots]

    def query(self, q: KBQuery) -> list[Episode]:
        with self._lock:
            slots = list(self._slots)
            self.query_count += 1
        hits = [s for s in slots if q.matches(s.episode)]
        hits.sort(key=lambda s: (s.episode.timestamp, s.seq), reverse=True)
        return [s.episode for s in hits[: q.limit]]

    def record_experience(self, eps: ExperienceTuple) -> str:
        if not eps.outcome.window_start >= eps.context.window_end:
            raise KnowledgeBaseError("experience outcome window must follow the context window")
        return self.add(EpisodeKind.EXPERIENCE, eps.outcome.window_end, eps.to_payload(), experience_tags(eps))

    def summarize(self, window: float, now: float) -> dict[str, Any]:
        """Counts and response-time statistics for episodes in (now - window, now]."""
        lo = now - window
        eps = [e for e in self.episodes() if lo < e.timestamp <= now]
        counts = {k.value: 0 for k in EpisodeKind}
        actions: dict[str, int] = {}
        rts: list[float] = []
        utils: list[float] = []
        late_windows = 0
        for e in eps:
            counts[e.kind.value] += 1
            if e.kind is EpisodeKind.SNAPSHOT_RECORDED:
                snap = e.payload["snapshot"]
                rts.append(snap["avg_response_time"])
                utils.append(snap["server_utilization"])
                late_windows += snap["late_count"] > 0
            elif e.kind is EpisodeKind.ACTION_EXECUTED:
                kind = e.payload["action"]["kind"]
                actions[kind] = actions.get(kind, 0) + 1
        return {
            "window": window,
            "now": now,
            "episode_counts": counts,
            "mean_response_time": sum(rts) / len(rts) if rts else 0.0,
            "max_response_time": max(rts) if rts else 0.0,
            "mean_utilization": sum(utils) / len(utils) if utils else 0.0,
            "late_windows": late_windows,
            "action_frequency": dict(sorted(actions.items())),
            "reactive_count": counts[EpisodeKind.REACTIVE_TRIGGER.value],
        }

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.episodes():
            h.update(json.dumps(e.to_dict(), sort_keys=True).encode())
        return h.hexdigest()

    def dump(self, fp: IO[str]) -> int:
        """Write the store as newline-delimited JSON; returns the number of lines."""
        n = 0
        for e in self.episodes():
            fp.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
            n += 1
        return n


def load_episodes(fp: IO[str]) -> list[Episode]:
    return [Episode.from_dict(json.loads(line)) for line in fp if line.strip()]

