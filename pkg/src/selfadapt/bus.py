"""In-process publish/subscribe bus with fixed topic names and JSON payloads."""

from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import dataclass
from typing import IO, Any, Iterator

log = logging.getLogger(__name__)

TELEMETRY = "telemetry.samples"
DIRECTIVES = "control.directives"
ACKS = "control.acks"
TOPICS = (TELEMETRY, DIRECTIVES, ACKS)


class BusClosedError(RuntimeError):
    pass


@dataclass(frozen=True)
class BusMessage:
    topic: str
    payload: dict[str, Any]
    published_at: float

    def __post_init__(self) -> None:
        if not self.topic:
            raise ValueError("topic must be non-empty")

    def to_json(self) -> str:
        return json.dumps(
            {"topic": self.topic, "published_at": self.published_at, "payload": self.payload},
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, text: str) -> BusMessage:
        data = json.loads(text)
        return cls(data["topic"], data["payload"], data["published_at"])


class Subscription:
    """Ordered stream of the messages published to one topic after subscribing."""

    def __init__(self, bus: MessageBus, topic: str):
        self._bus = bus
        self.topic = topic
        self._queue: queue.SimpleQueue[BusMessage] = queue.SimpleQueue()
        self.active = True

    def _deliver(self, message: BusMessage) -> None:
        self._queue.put(message)

    def get(self, timeout: float | None = None) -> BusMessage:
        """Block for the next message; raises ``queue.Empty`` on timeout."""
        return self._queue.get(timeout=timeout)

    def drain(self) -> list[BusMessage]:
        out = []
        while True:
            try:
                out.append(self._queue.get_nowait())
            except queue.Empty:
                return out

    def __iter__(self) -> Iterator[BusMessage]:
        return iter(self.drain())

    def close(self) -> None:
        self._bus._unsubscribe(self)


class MessageBus:
    """Thread-safe fan-out bus.

    Publication holds one lock while delivering to every subscriber, so all
    subscribers observe one global order and per-topic FIFO holds.
    """

    def __init__(self, record_to: IO[str] | None = None):
        self._subs: dict[str, list[Subscription]] = {}
        self._lock = threading.Lock()
        self._closed = False
        self._record = record_to
        self.published = 0

    def subscribe(self, topic: str) -> Subscription:
        if not topic:
            raise ValueError("topic must be non-empty")
        with self._lock:
            if self._closed:
                raise BusClosedError("bus is shut down")
            sub = Subscription(self, topic)
            self._subs.setdefault(topic, []).append(sub)
            return sub

    def _unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            subs = self._subs.get(sub.topic, [])
            if sub in subs:
                subs.remove(sub)
            sub.active = False

    def publish(self, topic: str, message: BusMessage | dict[str, Any], published_at: float = 0.0) -> BusMessage:
        if not isinstance(message, BusMessage):
            message = BusMessage(topic, message, published_at)
        elif message.topic != topic:
            raise ValueError(f"message topic {message.topic!r} does not match {topic!r}")
        with self._lock:
            if self._closed:
                raise BusClosedError("bus is shut down")
            for sub in self._subs.get(topic, ()):
                sub._deliver(message)
            self.published += 1
            if self._record is not None:
                self._record.write(message.to_json() + "\n")
        return message

    def close(self) -> None:
        with self._lock:
            self._closed = True

    @property
    def closed(self) -> bool:
        return self._closed


def replay(fp: IO[str]) -> Iterator[BusMessage]:
    """Read back a log written with ``record_to``."""
    for line in fp:
        if line.strip():
            yield BusMessage.from_json(line)
