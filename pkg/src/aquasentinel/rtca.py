"""Real-Time Cumulative Anomaly (RTCA) detector.

Per node, the relative one-step error e_rt is compared against an adaptive
threshold, and its windowed mean e_c against a second, stricter one. Both
thresholds come from an exponential moving mean/variance of e_rt. An
anomaly is confirmed once both are exceeded for ``t_persist`` consecutive
steps. Adaptation is frozen while the node is in dual exceedance, so the
thresholds do not absorb the anomaly they are tracking.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import asdict, dataclass, field


class Status(str, enum.Enum):
    WARMUP = "Warmup"
    NORMAL = "Normal"
    SUSPECT = "Suspect"
    CONFIRMED = "Confirmed"


@dataclass(frozen=True)
class RtcaConfig:
    W: int = 12
    t_persist: int = 3
    alpha_ema: float = 0.02
    k1: float = 2.5
    k2: float = 3.0
    epsilon: float = 1e-6
    warmup_steps: int = 288
    channel: str = "flow"

    def __post_init__(self):
        if self.W < 1:
            raise ValueError("W must be >= 1")
        if self.t_persist < 1:
            raise ValueError("t_persist must be >= 1")
        if not 0 < self.alpha_ema < 1:
            raise ValueError("alpha_ema must lie in (0, 1)")
        if not 0 < self.k1 <= self.k2:
            raise ValueError("need 0 < k1 <= k2")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.channel not in ("flow", "depth", "pressure"):
            raise ValueError(f"unknown channel {self.channel!r}")


@dataclass
class DetectorState:
    mu: float = 0.0
    sigma2: float = 0.0
    window: deque = field(default_factory=deque)
    persist_count: int = 0
    status: Status = Status.WARMUP
    frozen: bool = False
    last_t: int | None = None

    @classmethod
    def initial(cls, cfg: RtcaConfig) -> "DetectorState":
        return cls(window=deque(maxlen=cfg.W))

    def copy(self) -> "DetectorState":
        return DetectorState(self.mu, self.sigma2, deque(self.window, maxlen=self.window.maxlen),
                             self.persist_count, self.status, self.frozen, self.last_t)

    def thresholds(self, cfg: RtcaConfig) -> tuple[float, float]:
        sigma = math.sqrt(self.sigma2)
        return self.mu + cfg.k1 * sigma, self.mu + cfg.k2 * sigma


@dataclass(frozen=True)
class AnomalyEvent:
    node_id: str
    detected_at: int
    confidence: float
    e_rt: float
    e_c: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    """Everything the detector computed at one step (thresholds are pre-update)."""

    t: int
    e_rt: float
    e_c: float
    tau_rt: float
    tau_c: float
    mu: float
    sigma2: float
    status: Status
    event: AnomalyEvent | None = None


def rt_error(y: float, y_hat: float, epsilon: float = 1e-6) -> float:
    return abs(y - y_hat) / (y_hat + epsilon)


def cum_error(window) -> float:
    n = len(window)
    if n == 0:
        raise ValueError("cumulative error of an empty window")
    return sum(window) / n


def update_thresholds(state: DetectorState, e_rt: float, cfg: RtcaConfig) -> DetectorState:
    """EMA update of (mu, sigma2) in place; a frozen state is left untouched.

    The variance term uses the freshly updated mean.
    """
    if state.frozen:
        return state
    a = cfg.alpha_ema
    state.mu = (1 - a) * state.mu + a * e_rt
    state.sigma2 = (1 - a) * state.sigma2 + a * (e_rt - state.mu) ** 2
    return state


def confidence(e_c: float, tau_c: float, sigma: float, epsilon: float) -> float:
    """Map cumulative-threshold exceedance to [0, 1]: 1 - exp(-(e_c - tau_c)/(sigma + eps))."""
    value = 1.0 - math.exp(-(e_c - tau_c) / (sigma + epsilon))
    return min(1.0, max(0.0, value))


def step(
    state: DetectorState,
    y: float,
    y_hat: float,
    cfg: RtcaConfig,
    t: int,
    node_id: str = "",
) -> tuple[DetectorState, StepRecord]:
    """Advance one node's detector by one observation (mutates ``state``).

    Comparison happens at t > warmup_steps, so the earliest confirmation
    is at warmup_steps + t_persist.
    """
    if state.last_t is not None and t <= state.last_t:
        raise ValueError(f"non-monotonic timestep {t} after {state.last_t}")
    state.last_t = t

    e_rt = rt_error(y, y_hat, cfg.epsilon)
    state.window.append(e_rt)
    e_c = cum_error(state.window)
    tau_rt, tau_c = state.thresholds(cfg)
    mu, sigma2 = state.mu, state.sigma2
    event = None

    if t <= cfg.warmup_steps:
        state.status = Status.WARMUP
        state.persist_count = 0
        state.frozen = False
        update_thresholds(state, e_rt, cfg)
    elif e_rt > tau_rt and e_c > tau_c:
        state.frozen = True
        was_confirmed = state.status is Status.CONFIRMED
        state.persist_count = min(state.persist_count + 1, cfg.t_persist)
        if state.persist_count == cfg.t_persist:
            state.status = Status.CONFIRMED
            if not was_confirmed:
                conf = confidence(e_c, tau_c, math.sqrt(sigma2), cfg.epsilon)
                event = AnomalyEvent(node_id, t, conf, e_rt, e_c)
        else:
            state.status = Status.SUSPECT
    else:
        state.persist_count = 0
        state.frozen = False
        state.status = Status.NORMAL
        update_thresholds(state, e_rt, cfg)

    return state, StepRecord(t, e_rt, e_c, tau_rt, tau_c, mu, sigma2, state.status, event)


class NetworkDetector:
    """One :class:`DetectorState` per node, advanced together each step."""

    def __init__(self, node_ids, cfg: RtcaConfig = RtcaConfig()):
        self.cfg = cfg
        self.node_ids = tuple(node_ids)
        self.states = {v: DetectorState.initial(cfg) for v in self.node_ids}
        self.events: list[AnomalyEvent] = []

    def step(self, t: int, observed, predicted) -> list[StepRecord]:
        records = []
        for v, y, y_hat in zip(self.node_ids, observed, predicted):
            _, rec = step(self.states[v], float(y), float(y_hat), self.cfg, t, v)
            if rec.event is not None:
                self.events.append(rec.event)
            records.append(rec)
        return records

    @property
    def any_alert(self) -> bool:
        return any(s.status in (Status.SUSPECT, Status.CONFIRMED) for s in self.states.values())
