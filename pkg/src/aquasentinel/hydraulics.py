"""Quasi-static hydraulic simulator.

Every timestep is an independent steady-state solve on the network DAG:
flows are accumulated in topological order (mass conservation at every
junction), heads are accumulated upstream from the outfalls with the
Hazen-Williams loss law, and depths come from a per-conduit rating curve.
A leak on a conduit is an extra extraction at a virtual junction halfway
along that conduit.

State arrays have shape ``(..., n_nodes, 3)`` with channels ordered
``(flow m3/s, depth m, hydraulic grade m)``.
"""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from typing import Iterator, Mapping, NamedTuple, Sequence

import numpy as np

from .network import Network

FLOW, DEPTH, PRESSURE = 0, 1, 2
CHANNELS = ("flow", "depth", "pressure")
CSV_HEADER = ("step", "node_id", "flow_m3s", "depth_m", "pressure_m")

HW_FACTOR = 10.67
HW_FLOW_EXP = 1.852
HW_DIAM_EXP = 2.63
RATING_EXP = 0.6
RATING_SCALE = 0.3  # a = RATING_SCALE / D


class HydraulicsError(RuntimeError):
    pass


class DryPipeError(HydraulicsError):
    """A leak extracts more than the flow reaching it."""


def hazen_williams_headloss(q, length, c, d):
    """Friction head loss (m) over a pipe by Hazen-Williams, SI units.

    h_f = 10.67 * L * (Q / (C * D**2.63)) ** 1.852

    Accepts scalars or numpy arrays for ``q``.
    """
    if not (length > 0 and c > 0 and d > 0):
        raise ValueError("length, c and d must be strictly positive")
    q = np.asarray(q, dtype=float)
    if np.any(q < 0):
        raise ValueError("flow must be nonnegative")
    out = HW_FACTOR * length * (q / (c * d**HW_DIAM_EXP)) ** HW_FLOW_EXP
    return float(out) if out.ndim == 0 else out


def signed_headloss(q, length, c, d):
    """Odd extension of Hazen-Williams used where flows may go negative."""
    q = np.asarray(q, dtype=float)
    k = HW_FACTOR * length / (c * d**HW_DIAM_EXP) ** HW_FLOW_EXP
    return k * np.sign(q) * np.abs(q) ** HW_FLOW_EXP


def signed_headloss_slope(q, length, c, d):
    q = np.asarray(q, dtype=float)
    k = HW_FACTOR * length / (c * d**HW_DIAM_EXP) ** HW_FLOW_EXP
    return k * HW_FLOW_EXP * np.abs(q) ** (HW_FLOW_EXP - 1.0)


def rating_coefficients(net: Network) -> np.ndarray:
    """Per-node rating-curve coefficient ``a`` in h = a * Q**0.6.

    A node uses the widest of its outgoing conduits (incoming for outfalls).
    """
    a = np.empty(len(net.nodes))
    for i, node in enumerate(net.nodes):
        pipes = net.out_conduits(node.id) or net.in_conduits(node.id)
        diameter = max((c.diameter for c in pipes), default=1.0)
        a[i] = RATING_SCALE / diameter
    return a


# -- domain types ----------------------------------------------------------


class NodeState(NamedTuple):
    flow: float
    depth: float
    pressure: float


@dataclass(frozen=True)
class StateFrame:
    t: int
    node_ids: tuple[str, ...]
    values: np.ndarray  # (n, 3)

    def __getitem__(self, node_id: str) -> NodeState:
        i = self.node_ids.index(node_id)
        return NodeState(*map(float, self.values[i]))

    @property
    def flow(self) -> np.ndarray:
        return self.values[:, FLOW]

    def as_dict(self) -> dict[str, NodeState]:
        return {v: NodeState(*map(float, row)) for v, row in zip(self.node_ids, self.values)}


@dataclass(frozen=True)
class TimeSeries:
    """Contiguous per-step node states; ``data`` has shape (steps, n, 3)."""

    node_ids: tuple[str, ...]
    data: np.ndarray
    dt: float = 600.0
    # (steps, n_conduits) flow arriving at each conduit's downstream end
    conduit_outflow: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[1:] != (len(self.node_ids), 3):
            raise ValueError("data must have shape (steps, n_nodes, 3)")

    def __len__(self) -> int:
        return self.data.shape[0]

    def frame(self, t: int) -> StateFrame:
        return StateFrame(t, self.node_ids, self.data[t])

    @property
    def frames(self) -> Iterator[StateFrame]:
        return (self.frame(t) for t in range(len(self)))

    def channel(self, ch: int | str) -> np.ndarray:
        if isinstance(ch, str):
            ch = CHANNELS.index(ch)
        return self.data[:, :, ch]

    def to_csv(self, extra: Mapping[str, np.ndarray] | None = None) -> str:
        """Serialize as ``step,node_id,flow_m3s,depth_m,pressure_m[,extra...]``.

        ``extra`` columns are arrays of shape (steps, n).
        """
        extra = dict(extra or {})
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([*CSV_HEADER, *extra])
        for t in range(len(self)):
            for i, v in enumerate(self.node_ids):
                q, h, p = self.data[t, i]
                writer.writerow([t, v, repr(float(q)), repr(float(h)), repr(float(p)),
                                 *(col[t, i] for col in extra.values())])
        return buf.getvalue()


def read_states_csv(text: str, node_ids: Sequence[str] | None = None):
    """Parse a state CSV into ``{step: {node_id: NodeState}}`` (sparse ok)."""
    reader = csv.DictReader(io.StringIO(text))
    missing = set(CSV_HEADER) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"state CSV missing columns {sorted(missing)}")
    out: dict[int, dict[str, NodeState]] = {}
    known = set(node_ids) if node_ids is not None else None
    for row in reader:
        node = row["node_id"]
        if known is not None and node not in known:
            raise ValueError(f"state CSV references unknown node {node!r}")
        out.setdefault(int(row["step"]), {})[node] = NodeState(
            float(row["flow_m3s"]), float(row["depth_m"]), float(row["pressure_m"])
        )
    return out


def timeseries_from_csv(text: str, node_ids: Sequence[str], dt: float = 600.0) -> TimeSeries:
    rows = read_states_csv(text, node_ids)
    steps = sorted(rows)
    if steps != list(range(len(steps))):
        raise ValueError("time series steps must be contiguous from 0")
    data = np.empty((len(steps), len(node_ids), 3))
    for t in steps:
        frame = rows[t]
        for i, v in enumerate(node_ids):
            if v not in frame:
                raise ValueError(f"step {t}: no row for node {v!r}")
            data[t, i] = frame[v]
    return TimeSeries(tuple(node_ids), data, dt)


# -- demand and leak models --------------------------------------------------


@dataclass(frozen=True)
class DemandPattern:
    """Diurnal sinusoid plus seeded Gaussian noise, clamped at zero.

    ``noise_std`` is relative to ``base``.
    """

    base: float
    diurnal_amplitude: float = 0.0
    period: int = 144
    noise_std: float = 0.0
    seed: int = 0
    phase: float = 0.0

    def __post_init__(self):
        if self.base < 0:
            raise ValueError("base demand must be >= 0")
        if not 0 <= self.diurnal_amplitude < 1:
            raise ValueError("diurnal_amplitude must lie in [0, 1)")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def expected(self, steps: int, start: int = 0) -> np.ndarray:
        t = np.arange(start, start + steps)
        cycle = np.sin(2 * np.pi * t / self.period + self.phase)
        return self.base * (1.0 + self.diurnal_amplitude * cycle)

    def generate(self, steps: int, start: int = 0) -> np.ndarray:
        """``steps`` samples starting at absolute step ``start`` of the cycle."""
        values = self.expected(steps, start)
        if self.noise_std > 0:
            rng = np.random.default_rng(self.seed)
            values = values + self.base * self.noise_std * rng.standard_normal(steps)
        return np.maximum(values, 0.0)


class LeakKind(str, enum.Enum):
    CONSTANT_LT5 = "ConstantLt5"
    CONSTANT_5_TO_15 = "Constant5to15"
    CONSTANT_15_TO_25 = "Constant15to25"
    CONSTANT_GT25 = "ConstantGt25"
    DYNAMIC_RAMP = "DynamicRamp"

    @property
    def is_constant(self) -> bool:
        return self is not LeakKind.DYNAMIC_RAMP


# Sampling bands for magnitude fractions. The nominal "<5%" and ">25%"
# classes are open-ended; the lower and upper edges below bound them.
MAGNITUDE_BANDS = {
    LeakKind.CONSTANT_LT5: (0.01, 0.05),
    LeakKind.CONSTANT_5_TO_15: (0.05, 0.15),
    LeakKind.CONSTANT_15_TO_25: (0.15, 0.25),
    LeakKind.CONSTANT_GT25: (0.25, 0.35),
}
RAMP_START_BAND = (0.005, 0.01)
RAMP_END_MAX = 0.35


@dataclass(frozen=True)
class Ramp:
    start_fraction: float
    end_fraction: float
    ramp_steps: int

    def __post_init__(self):
        if not RAMP_START_BAND[0] <= self.start_fraction <= RAMP_START_BAND[1]:
            raise ValueError("ramp start_fraction must lie in [0.005, 0.01]")
        if not self.start_fraction <= self.end_fraction <= RAMP_END_MAX:
            raise ValueError("ramp end_fraction must lie in [start_fraction, 0.35]")
        if self.ramp_steps < 1:
            raise ValueError("ramp_steps must be >= 1")


@dataclass(frozen=True)
class LeakScenario:
    conduit_id: str
    kind: LeakKind
    magnitude_fraction: float
    start_step: int
    ramp: Ramp | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", LeakKind(self.kind))
        if self.start_step < 0:
            raise ValueError("start_step must be >= 0")
        if self.kind is LeakKind.DYNAMIC_RAMP:
            if self.ramp is None:
                raise ValueError("DynamicRamp scenarios need a ramp")
            if self.magnitude_fraction != self.ramp.end_fraction:
                raise ValueError("DynamicRamp magnitude_fraction must equal ramp.end_fraction")
        else:
            lo, hi = MAGNITUDE_BANDS[self.kind]
            # open-ended classes only enforce their defining edge
            ok = {
                LeakKind.CONSTANT_LT5: 0 <= self.magnitude_fraction < hi,
                LeakKind.CONSTANT_GT25: self.magnitude_fraction >= lo,
            }.get(self.kind, lo <= self.magnitude_fraction < hi)
            if not ok:
                raise ValueError(
                    f"{self.kind.value}: magnitude {self.magnitude_fraction} outside band"
                )

    def to_dict(self) -> dict:
        doc = {
            "conduit_id": self.conduit_id,
            "kind": self.kind.value,
            "magnitude_fraction": self.magnitude_fraction,
            "start_step": self.start_step,
        }
        if self.ramp is not None:
            doc["ramp"] = {
                "start_fraction": self.ramp.start_fraction,
                "end_fraction": self.ramp.end_fraction,
                "ramp_steps": self.ramp.ramp_steps,
            }
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LeakScenario":
        ramp = doc.get("ramp")
        return cls(
            conduit_id=str(doc["conduit_id"]),
            kind=LeakKind(doc["kind"]),
            magnitude_fraction=float(doc["magnitude_fraction"]),
            start_step=int(doc["start_step"]),
            ramp=Ramp(float(ramp["start_fraction"]), float(ramp["end_fraction"]),
                      int(ramp["ramp_steps"])) if ramp else None,
        )

    @classmethod
    def from_json(cls, text: str) -> "LeakScenario":
        return cls.from_dict(json.loads(text))


def leak_fraction(scenario: LeakScenario, t):
    """Leak size as a fraction of upstream-node flow at step(s) ``t``."""
    t = np.asarray(t, dtype=float)
    active = t >= scenario.start_step
    if scenario.kind is LeakKind.DYNAMIC_RAMP:
        r = scenario.ramp
        progress = np.clip((t - scenario.start_step) / r.ramp_steps, 0.0, 1.0)
        frac = r.start_fraction + (r.end_fraction - r.start_fraction) * progress
    else:
        frac = np.full_like(t, scenario.magnitude_fraction)
    out = np.where(active, frac, 0.0)
    return float(out) if out.ndim == 0 else out


def leak_flow(scenario: LeakScenario, upstream_flow, t):
    """Leak extraction (m3/s) given the flow at the conduit's upstream node."""
    out = leak_fraction(scenario, t) * np.asarray(upstream_flow, dtype=float)
    return float(out) if np.ndim(out) == 0 else out


# -- solver ----------------------------------------------------------------


def _solve(net: Network, demands: np.ndarray, leak_for) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized steady-state kernel over a batch of steps.

    ``demands`` is (steps, n) lateral inflow; ``leak_for(conduit, q_up)``
    returns the (steps,) extraction on that conduit or None.
    Returns node states (steps, n, 3) and conduit downstream-end flows.
    """
    if np.any(demands < 0):
        raise ValueError("demands must be nonnegative")
    steps, n = demands.shape
    q = np.zeros((steps, n))
    cidx = {c.id: k for k, c in enumerate(net.conduits)}
    up_flow = np.zeros((steps, len(net.conduits)))
    down_flow = np.zeros((steps, len(net.conduits)))
    leak = np.zeros((steps, len(net.conduits)))
    shares = net.split_fractions

    for v in net.topological_order:
        i = net.index(v)
        total = demands[:, i].copy()
        for c in net.in_conduits(v):
            total += down_flow[:, cidx[c.id]]
        q[:, i] = total
        for c in net.out_conduits(v):
            k = cidx[c.id]
            up = shares[c.id] * total
            extraction = leak_for(c, total)
            up_flow[:, k] = up
            if extraction is None:
                down_flow[:, k] = up
                continue
            extraction = np.broadcast_to(np.asarray(extraction, dtype=float), (steps,))
            if np.any(extraction > up * (1 + 1e-12) + 1e-15):
                raise DryPipeError(f"leak on conduit {c.id} exceeds the flow it carries")
            leak[:, k] = extraction
            down_flow[:, k] = up - extraction

    # heads: accumulate friction losses upstream from each outfall
    head = np.zeros((steps, n))
    for v in reversed(net.topological_order):
        i = net.index(v)
        outs = net.out_conduits(v)
        if not outs:
            head[:, i] = net.nodes[i].elevation
            continue
        candidates = []
        for c in outs:
            k = cidx[c.id]
            w = net.index(c.to_node)
            hf = hazen_williams_headloss(up_flow[:, k], c.length, c.hw_coefficient, c.diameter)
            leaking = leak[:, k] > 0
            if np.any(leaking):
                half = c.length / 2
                split = (hazen_williams_headloss(up_flow[:, k], half, c.hw_coefficient, c.diameter)
                         + hazen_williams_headloss(np.maximum(down_flow[:, k], 0.0), half,
                                                   c.hw_coefficient, c.diameter))
                hf = np.where(leaking, split, hf)
            candidates.append(head[:, w] + hf)
        head[:, i] = np.max(candidates, axis=0)

    depth = rating_coefficients(net)[None, :] * q**RATING_EXP
    return np.stack([q, depth, head], axis=-1), down_flow


def _demand_vector(net: Network, demands: Mapping[str, float]) -> np.ndarray:
    vec = np.zeros(len(net.nodes))
    for v, d in demands.items():
        vec[net.index(v)] = d
    return vec


def solve_steady_state(
    net: Network,
    demands: Mapping[str, float],
    leaks: Mapping[str, float] | None = None,
    t: int = 0,
) -> StateFrame:
    """Single steady-state solve.

    ``demands`` maps node id to lateral inflow (m3/s) entering the network
    at that node; ``leaks`` maps conduit id to an absolute extraction
    (m3/s) at the conduit midpoint.
    """
    leaks = dict(leaks or {})
    for cid in leaks:
        net.conduit(cid)
    vec = _demand_vector(net, demands)[None, :]

    def leak_for(c, q_up):
        return leaks.get(c.id)

    states, _ = _solve(net, vec, leak_for)
    return StateFrame(t, net.node_ids, states[0])


def conservation_residuals(
    net: Network,
    flows: np.ndarray,
    demands: np.ndarray,
    leaks: np.ndarray | None = None,
) -> np.ndarray:
    """Junction imbalance ``sum_in Q - sum_out Q + inflow`` per node.

    Works on (n,) or (steps, n) flow arrays; ``leaks`` are per-conduit
    extractions with matching leading shape. Conduit flows are rebuilt
    from node flows through the split fractions.
    """
    flows = np.asarray(flows, dtype=float)
    demands = np.broadcast_to(np.asarray(demands, dtype=float), flows.shape)
    res = demands - flows
    shares = net.split_fractions
    for k, c in enumerate(net.conduits):
        into = shares[c.id] * flows[..., net.index(c.from_node)]
        if leaks is not None:
            into = into - np.asarray(leaks)[..., k]
        res[..., net.index(c.to_node)] += into
    return res


def simulate(
    net: Network,
    patterns: Mapping[str, DemandPattern],
    steps: int,
    scenario: LeakScenario | None = None,
    dt: float = 600.0,
    start: int = 0,
) -> TimeSeries:
    """Generate a quasi-static time series, optionally with a leak.

    Nodes absent from ``patterns`` get a constant inflow equal to their
    ``base_demand``. ``start`` offsets the diurnal phase (absolute step of
    the first sample); leak timing is always relative to the first sample.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    demands = demand_matrix(net, patterns, steps, start)

    if scenario is None:
        leak_for = lambda c, q_up: None  # noqa: E731
    else:
        net.conduit(scenario.conduit_id)
        t = np.arange(steps)

        def leak_for(c, q_up):
            if c.id != scenario.conduit_id:
                return None
            return leak_flow(scenario, q_up, t)

    states, down = _solve(net, demands, leak_for)
    return TimeSeries(net.node_ids, states, dt, conduit_outflow=down)


def demand_matrix(
    net: Network, patterns: Mapping[str, DemandPattern], steps: int, start: int = 0
) -> np.ndarray:
    out = np.empty((steps, len(net.nodes)))
    for i, node in enumerate(net.nodes):
        pattern = patterns.get(node.id)
        if pattern is None:
            out[:, i] = node.base_demand
        else:
            out[:, i] = pattern.generate(steps, start)
    for v in patterns:
        net.index(v)
    return out


def leak_series(net: Network, series: TimeSeries, scenario: LeakScenario) -> np.ndarray:
    """Per-conduit extraction array (steps, n_conduits) for a simulated run."""
    c = net.conduit(scenario.conduit_id)
    k = net.conduit_ids.index(c.id)
    out = np.zeros((len(series), len(net.conduits)))
    q_up = series.data[:, net.index(c.from_node), FLOW]
    out[:, k] = leak_flow(scenario, q_up, np.arange(len(series)))
    return out
