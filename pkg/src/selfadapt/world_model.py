"""What-if predictor: analytic M/M/c response time with online residual tracking."""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Any

from .domain import ActionKind, AdaptationAction, MetricSnapshot


class WorldModelError(ValueError):
    pass


def erlang_c(servers: int, offered_load: float) -> float:
    """Probability an arrival waits in an M/M/c queue (offered_load = lambda * mean service time)."""
    if offered_load <= 0:
        return 0.0
    if offered_load >= servers:
        return 1.0
    b = 1.0
    for k in range(1, servers + 1):
        b = offered_load * b / (k + offered_load * b)
    return servers * b / (servers - offered_load * (1.0 - b))


def mmc_response_time(arrival_rate: float, service_time: float, servers: int) -> float:
    """Mean sojourn time of a stable M/M/c queue; ``inf`` when unstable."""
    a = arrival_rate * service_time
    if a >= servers:
        return math.inf
    wait = erlang_c(servers, a) * service_time / (servers - a) if a > 0 else 0.0
    return service_time + wait


@dataclass(frozen=True)
class WMQuery:
    action: AdaptationAction
    state: MetricSnapshot
    horizon: float = 120.0
    arrival_rate: float | None = None  # overrides the snapshot's observed rate

    def __post_init__(self) -> None:
        if not self.horizon > 0:
            raise WorldModelError("horizon must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {
            "action": self.action.to_dict(),
            "state": self.state.to_dict(),
            "horizon": self.horizon,
            "arrival_rate": self.arrival_rate,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> WMQuery:
        return cls(
            AdaptationAction.from_dict(data["action"]),
            MetricSnapshot.from_dict(data["state"]),
            float(data.get("horizon", 120.0)),
            data.get("arrival_rate"),
        )


@dataclass(frozen=True)
class StateDistribution:
    mean_response_time: float
    std_response_time: float
    mean_utilization: float
    std_utilization: float
    servers: int
    dimmer: float
    arrival_rate: float
    saturated: bool = False

    def __post_init__(self) -> None:
        if self.std_response_time < 0 or self.std_utilization < 0:
            raise WorldModelError("standard deviations must be non-negative")
        if not 0.0 <= self.mean_utilization <= 1.0:
            raise WorldModelError("mean utilization outside [0, 1]")

    def prob_rt_exceeds(self, bound: float) -> float:
        if self.std_response_time == 0:
            return float(self.mean_response_time > bound)
        z = (bound - self.mean_response_time) / (self.std_response_time * math.sqrt(2.0))
        return 0.5 * math.erfc(z)

    def interval(self, z: float = 1.96) -> tuple[float, float]:
        return (self.mean_response_time - z * self.std_response_time, self.mean_response_time + z * self.std_response_time)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Calibration:
    rt_bias: float = 0.0
    rt_var: float = 0.0
    util_bias: float = 0.0
    util_var: float = 0.0
    service_scale: float = 1.0
    updates: int = 0


@dataclass
class WorldModel:
    mandatory_service_time: float = 0.04
    optional_service_time: float = 0.02
    boot_delay: float = 60.0
    max_servers: int = 3
    rt_cap: float = 5.0
    rt_floor: float = 0.005
    util_floor: float = 0.01
    smoothing: float = 0.1
    recalibrate: bool = False
    recalibration_gain: float = 0.1
    # residuals are clipped to this magnitude so a draining backlog cannot swamp the bias
    residual_clip: float = 0.25
    calibration: Calibration = field(default_factory=Calibration)

    def __post_init__(self) -> None:
        if not 0 < self.smoothing <= 1:
            raise WorldModelError("smoothing must lie in (0, 1]")
        if self.residual_clip <= 0:
            raise WorldModelError("residual_clip must be positive")
        self._lock = threading.Lock()
        self.simulations = 0

    # -- prediction -----------------------------------------------------------

    def _settings(self, q: WMQuery) -> tuple[int, float]:
        st = q.state
        servers = st.active_servers
        if q.horizon >= self.boot_delay:
            servers += st.booting_servers
        dimmer = st.dimmer
        kind = q.action.kind
        if kind is ActionKind.ADD_SERVER and q.horizon >= self.boot_delay:
            servers = min(servers + 1, self.max_servers)
        elif kind is ActionKind.REMOVE_SERVER:
            servers = max(servers - 1, 1)
        elif kind is ActionKind.SET_DIMMER and q.action.dimmer_target is not None:
            dimmer = min(1.0, max(0.0, q.action.dimmer_target))
        return servers, dimmer

    def service_demand(self, dimmer: float, scale: float = 1.0) -> float:
        return scale * (self.mandatory_service_time + dimmer * self.optional_service_time)

    def _analytic(self, q: WMQuery, cal: Calibration) -> tuple[float, float, int, float, float]:
        lam = q.state.arrival_rate if q.arrival_rate is None else q.arrival_rate
        if lam < 0:
            raise WorldModelError(f"negative arrival rate {lam}")
        servers, dimmer = self._settings(q)
        s = self.service_demand(dimmer, cal.service_scale)
        return mmc_response_time(lam, s, servers), lam * s / servers, servers, dimmer, lam

    def simulate(self, q: WMQuery) -> StateDistribution:
        with self._lock:
            cal = Calibration(**asdict(self.calibration))
            self.simulations += 1
        rt, rho, servers, dimmer, lam = self._analytic(q, cal)
        rt_std = max(math.sqrt(cal.rt_var), self.rt_floor)
        util_std = max(math.sqrt(cal.util_var), self.util_floor)
        if rho >= 1.0:
            return StateDistribution(self.rt_cap, 3 * rt_std, 1.0, 3 * util_std, servers, dimmer, lam, saturated=True)
        mean = min(max(rt + cal.rt_bias, 0.0), self.rt_cap)
        util = min(max(rho + cal.util_bias, 0.0), 1.0)
        return StateDistribution(mean, rt_std, util, util_std, servers, dimmer, lam)

    # -- learning ---------------------------------------------------------------

    def update(self, state: MetricSnapshot, action: AdaptationAction, observed: MetricSnapshot) -> float | None:
        """Fold the forecast residual of one transition into the running bias/variance.

        Returns the response-time residual, or None when the transition carries no
        usable signal (empty window, saturated forecast).
        """
        if not observed.window_start >= state.window_end:
            raise WorldModelError("transition windows must be ordered")
        if observed.request_count == 0:
            return None
        horizon = max(observed.window_end - state.window_end, 1e-9)
        q = WMQuery(action, state, horizon)
        with self._lock:
            cal = self.calibration
            rt, rho, *_ = self._analytic(q, cal)
            if rho >= 1.0:
                return None
            a = self.smoothing
            r = observed.avg_response_time - rt
            r = min(max(r, -self.residual_clip), self.residual_clip)
            d = r - cal.rt_bias
            cal.rt_bias += a * d
            cal.rt_var = (1 - a) * (cal.rt_var + a * d * d)
            ru = min(max(observed.server_utilization - rho, -self.residual_clip), self.residual_clip)
            du = ru - cal.util_bias
            cal.util_bias += a * du
            cal.util_var = (1 - a) * (cal.util_var + a * du * du)
            if self.recalibrate and rho > 0.05:
                ratio = observed.server_utilization / rho
                cal.service_scale = min(10.0, max(0.1, cal.service_scale * (1 + self.recalibration_gain * (ratio - 1))))
            cal.updates += 1
            return r

    # -- persistence ------------------------------------------------------------

    def dumps(self) -> str:
        data = {k: v for k, v in asdict(self).items() if k != "calibration"}
        data["calibration"] = asdict(self.calibration)
        return json.dumps(data, sort_keys=True, indent=2)

    @classmethod
    def loads(cls, text: str) -> WorldModel:
        data = json.loads(text)
        cal = Calibration(**data.pop("calibration"))
        return cls(**data, calibration=cal)
