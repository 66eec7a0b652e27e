"""Sensor placement: node scoring and spacing-constrained greedy selection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .hydraulics import FLOW, PRESSURE, TimeSeries
from .network import Network, betweenness, hop_distance


@dataclass(frozen=True)
class PlacementConfig:
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    k: int = 6
    d_min: int = 2

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("placement weights must be >= 0")
        if self.alpha + self.beta + self.gamma <= 0:
            raise ValueError("at least one placement weight must be positive")
        if self.k < 1:
            raise ValueError("sensor budget k must be >= 1")
        if self.d_min < 0:
            raise ValueError("d_min must be >= 0")

    @classmethod
    def for_network(cls, net: Network, coverage: float = 0.25, **kw) -> "PlacementConfig":
        return cls(k=max(1, math.ceil(coverage * len(net.nodes))), **kw)


@dataclass(frozen=True)
class NodeScore:
    node_id: str
    centrality: float
    hydraulic: float
    risk: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Placement:
    selected: tuple[str, ...]
    requested: int

    @property
    def short(self) -> bool:
        """True when spacing left fewer feasible nodes than the budget."""
        return len(self.selected) < self.requested


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi - lo <= 0:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def combine_scores(
    node_ids, centrality, hydraulic, risk, cfg: PlacementConfig
) -> list[NodeScore]:
    c = np.asarray(centrality, dtype=float)
    h = np.asarray(hydraulic, dtype=float)
    r = np.asarray(risk, dtype=float)
    total = cfg.alpha * _minmax(c) + cfg.beta * _minmax(h) + cfg.gamma * _minmax(r)
    return [
        NodeScore(v, float(ci), float(hi), float(ri), float(ti))
        for v, ci, hi, ri, ti in zip(node_ids, c, h, r, total)
    ]


def score_nodes(net: Network, baseline: TimeSeries, cfg: PlacementConfig) -> list[NodeScore]:
    """Weighted node importance from centrality, hydraulics and risk.

    The hydraulic term is mean flow times the range of hydraulic grade over
    ``baseline``. All three components are min-max normalized before the
    weights apply, so the weights are unit-free.
    """
    if len(baseline) == 0:
        raise ValueError("baseline series is empty")
    cb = betweenness(net)
    q_mean = baseline.data[:, :, FLOW].mean(axis=0)
    p = baseline.data[:, :, PRESSURE]
    hydraulic = q_mean * (p.max(axis=0) - p.min(axis=0))
    return combine_scores(
        net.node_ids,
        [cb[v] for v in net.node_ids],
        hydraulic,
        [n.risk for n in net.nodes],
        cfg,
    )


def ranked(scores: list[NodeScore]) -> list[NodeScore]:
    return sorted(scores, key=lambda s: (-s.total, s.node_id))


def select_sensors(scores: list[NodeScore], net: Network, cfg: PlacementConfig) -> Placement:
    if cfg.k > len(net.nodes):
        raise ValueError("sensor budget exceeds node count")
    chosen: list[str] = []
    for s in ranked(scores):
        if len(chosen) == cfg.k:
            break
        feasible = True
        for u in chosen:
            d = hop_distance(net, u, s.node_id)
            if d is not None and d < cfg.d_min:
                feasible = False
                break
        if feasible:
            chosen.append(s.node_id)
    return Placement(tuple(chosen), cfg.k)
