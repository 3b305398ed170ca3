"""Trace-driven web-cluster simulator with a dimmer and delayed server provisioning.

Requests are dispatched on arrival to the server that frees up first and are
served FIFO on that server, which is equivalent to a single FCFS queue feeding
``c`` servers. Each request is stamped with its arrival time, so every request
belongs to exactly one monitoring window.
"""

from __future__ import annotations

import bisect
import io
import logging
import math
import random
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, TextIO

from .domain import ActionKind, AdaptationAction, MetricSample, SystemState

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class CapacityError(SimulationError):
    """AddServer requested with every slot already active or booting."""


class FloorError(SimulationError):
    """RemoveServer requested with a single active server."""


class TraceParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class SimConfig:
    mandatory_service_time: float = 0.04
    optional_service_time: float = 0.02
    boot_delay: float = 60.0
    initial_servers: int = 1
    max_servers: int = 3
    rng_seed: int = 0
    sla_bound: float = 0.75
    initial_dimmer: float = 1.0
    exponential_service: bool = False

    def __post_init__(self) -> None:
        if self.mandatory_service_time <= 0 or self.optional_service_time <= 0:
            raise ValueError("service times must be positive")
        if self.boot_delay < 0:
            raise ValueError("boot_delay must be non-negative")
        if not 1 <= self.initial_servers <= self.max_servers:
            raise ValueError("need 1 <= initial_servers <= max_servers")
        if not 0.0 <= self.initial_dimmer <= 1.0:
            raise ValueError("initial_dimmer outside [0, 1]")

    def service_demand(self, dimmer: float) -> float:
        return self.mandatory_service_time + dimmer * self.optional_service_time


@dataclass(frozen=True)
class ArrivalTrace:
    timestamps: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        ts = tuple(float(t) for t in self.timestamps)
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("arrival timestamps must be non-decreasing")
        object.__setattr__(self, "timestamps", ts)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def end(self) -> float:
        return self.timestamps[-1] if self.timestamps else 0.0

    def count_until(self, t: float) -> int:
        return bisect.bisect_right(self.timestamps, t)

    def to_text(self) -> str:
        """Serialize back to the inter-arrival gap format."""
        out = []
        prev = 0.0
        for t in self.timestamps:
            out.append(repr(t - prev))
            prev = t
        return "\n".join(out) + ("\n" if out else "")


def load_trace(source: bytes | str | BinaryIO | TextIO) -> ArrivalTrace:
    """Parse newline-delimited inter-arrival gaps (seconds); ``#`` lines are comments."""
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw

    timestamps: list[float] = []
    clock = 0.0
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            gap = float(line)
        except ValueError:
            raise TraceParseError(lineno, f"not a number: {line!r}") from None
        if not math.isfinite(gap):
            raise TraceParseError(lineno, f"non-finite gap {line!r}")
        if gap < 0:
            raise TraceParseError(lineno, f"negative gap {gap}")
        clock += gap
        timestamps.append(clock)
    return ArrivalTrace(tuple(timestamps))


@dataclass
class SimState:
    clock: float
    dimmer: float
    busy_until: list[float]
    pending_boots: list[float]
    rng: random.Random
    cursor: int = 0
    busy_intervals: list[tuple[float, float]] = field(default_factory=list)
    faults: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def active_servers(self) -> int:
        return len(self.busy_until)

    @property
    def booting_servers(self) -> int:
        return len(self.pending_boots)


class Simulator:
    """Discrete-event stand-in for the managed web application."""

    def __init__(self, config: SimConfig, trace: ArrivalTrace | None = None):
        self.config = config
        self.trace = trace if trace is not None else ArrivalTrace()
        self.state = SimState(
            clock=0.0,
            dimmer=config.initial_dimmer,
            busy_until=[0.0] * config.initial_servers,
            pending_boots=[],
            rng=random.Random(config.rng_seed),
        )
        self.consumed = 0

    # -- actuation ---------------------------------------------------------

    def apply_action(self, action: AdaptationAction) -> SimState:
        st = self.state
        kind = action.kind
        if kind is ActionKind.ADD_SERVER:
            if st.active_servers + st.booting_servers >= self.config.max_servers:
                raise CapacityError(
                    f"{st.active_servers} active + {st.booting_servers} booting already at max {self.config.max_servers}"
                )
            bisect.insort(st.pending_boots, st.clock + self.config.boot_delay)
            if self.config.boot_delay == 0:
                self._activate_boots(st.clock)
        elif kind is ActionKind.REMOVE_SERVER:
            if st.active_servers <= 1:
                raise FloorError("cannot remove the last active server")
            # retire the server that frees up first; its queued work still completes
            idx = min(range(len(st.busy_until)), key=lambda i: st.busy_until[i])
            st.busy_until.pop(idx)
        elif kind is ActionKind.SET_DIMMER:
            target = action.dimmer_target
            if target is None or not 0.0 <= target <= 1.0:
                raise SimulationError(f"dimmer target {target} outside [0, 1]")
            st.dimmer = float(target)
        return st

    def inject_latency(self, start: float, end: float, extra: float) -> None:
        """Add ``extra`` seconds to every request arriving in [start, end); a fault hook for tests and demos."""
        self.state.faults.append((start, end, extra))

    # -- time advance -------------------------------------------------------

    def _activate_boots(self, now: float) -> None:
        st = self.state
        while st.pending_boots and st.pending_boots[0] <= now:
            ready = st.pending_boots.pop(0)
            st.busy_until.append(ready)

    def _fault_delay(self, t: float) -> float:
        return sum(extra for lo, hi, extra in self.state.faults if lo <= t < hi)

    def step(self, until: float) -> list[MetricSample]:
        """Process every arrival with timestamp <= ``until``; returns one sample per request."""
        st = self.state
        if until <= st.clock:
            raise ValueError(f"step target {until} not after clock {st.clock}")
        cfg = self.config
        ts = self.trace.timestamps
        stop = bisect.bisect_right(ts, until, lo=st.cursor)
        samples: list[MetricSample] = []
        for i in range(st.cursor, stop):
            t = ts[i]
            self._activate_boots(t)
            optional = st.rng.random() < st.dimmer
            demand = cfg.mandatory_service_time + (cfg.optional_service_time if optional else 0.0)
            if cfg.exponential_service:
                demand *= st.rng.expovariate(1.0)
            else:
                st.rng.random()  # keep the stream aligned with exponential mode
            idx = min(range(len(st.busy_until)), key=lambda k: st.busy_until[k])
            begin = max(t, st.busy_until[idx])
            done = begin + demand
            st.busy_until[idx] = done
            st.busy_intervals.append((begin, done))
            rt = done - t + (self._fault_delay(t) if st.faults else 0.0)
            samples.append(MetricSample(t, rt, optional, rt > cfg.sla_bound))
        self.consumed += stop - st.cursor
        st.cursor = stop
        self._activate_boots(until)
        st.clock = until
        return samples

    def busy_time(self, start: float, end: float, prune: bool = True) -> float:
        """Server-seconds of work overlapping [start, end)."""
        total = 0.0
        keep = []
        for b, e in self.state.busy_intervals:
            lo, hi = max(b, start), min(e, end)
            if hi > lo:
                total += hi - lo
            if e > end or not prune:
                keep.append((b, e))
        self.state.busy_intervals = keep
        return total

    def system_state(self, busy_time: float = 0.0) -> SystemState:
        st = self.state
        return SystemState(st.dimmer, st.active_servers, st.booting_servers, busy_time)


# -- synthetic traces ----------------------------------------------------------


def constant_rate(rate: float, duration: float, start: float = 0.0) -> ArrivalTrace:
    """Evenly spaced arrivals at ``rate`` per second over (start, start + duration]."""
    if rate <= 0:
        return ArrivalTrace()
    n = int(math.floor(rate * duration + 1e-9))
    return ArrivalTrace(tuple(start + (k + 1) / rate for k in range(n)))


def poisson(rate: float, duration: float, seed: int, start: float = 0.0) -> ArrivalTrace:
    rng = random.Random(seed)
    out = []
    t = start
    end = start + duration
    if rate <= 0:
        return ArrivalTrace()
    while True:
        t += rng.expovariate(rate)
        if t > end:
            break
        out.append(t)
    return ArrivalTrace(tuple(out))


def piecewise(phases: Iterable[tuple[float, float]], seed: int | None = None) -> ArrivalTrace:
    """Concatenate (duration, rate) phases; Poisson arrivals when ``seed`` is given, evenly spaced otherwise."""
    rng = random.Random(seed) if seed is not None else None
    out: list[float] = []
    t0 = 0.0
    for duration, rate in phases:
        if rate > 0:
            if rng is None:
                out.extend(constant_rate(rate, duration, start=t0).timestamps)
            else:
                t = t0
                while True:
                    t += rng.expovariate(rate)
                    if t > t0 + duration:
                        break
                    out.append(t)
        t0 += duration
    return ArrivalTrace(tuple(out))


def two_phase_burst(
    base_rate: float,
    burst_rate: float,
    base_len: float,
    burst_len: float,
    cycles: int,
    seed: int | None = None,
    ramp_len: float = 0.0,
    ramp_steps: int = 4,
) -> ArrivalTrace:
    """Repeating base/burst load, optionally with a stepped ramp into each burst."""
    phases: list[tuple[float, float]] = []
    for _ in range(cycles):
        phases.append((base_len, base_rate))
        if ramp_len > 0:
            for k in range(1, ramp_steps + 1):
                phases.append((ramp_len / ramp_steps, base_rate + (burst_rate - base_rate) * k / (ramp_steps + 1)))
        phases.append((burst_len, burst_rate))
    return piecewise(phases, seed=seed)
