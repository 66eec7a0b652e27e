"""Causal upstream localization of confirmed anomalies."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .network import Network, upstream_set


@dataclass(frozen=True)
class LocalizationResult:
    sources: frozenset[str]
    segments: tuple[str, ...]
    anomaly_set: frozenset[str]
    # (conduit id, source node, parent flow) best candidate first
    ranked_candidates: tuple[tuple[str, str, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "sources": sorted(self.sources),
            "segments": list(self.segments),
            "anomaly_set": sorted(self.anomaly_set),
            "ranked_candidates": [
                {"conduit_id": c, "source": s, "parent_flow": f}
                for c, s, f in self.ranked_candidates
            ],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "LocalizationResult":
        ranked = tuple(
            (str(c["conduit_id"]), str(c["source"]), float(c["parent_flow"]))
            for c in doc.get("ranked_candidates", ())
        )
        return cls(
            sources=frozenset(doc.get("sources", ())),
            segments=tuple(doc.get("segments", ())),
            anomaly_set=frozenset(doc.get("anomaly_set", ())),
            ranked_candidates=ranked,
        )


def localize(
    net: Network,
    anomalous: Iterable[str],
    flows: Mapping[str, float] | None = None,
) -> LocalizationResult:
    """Blame the upstream-minimal anomalous nodes and their inflow conduits.

    A source is an anomalous node none of whose upstream nodes is
    anomalous. Its implicated segments are the conduits from its parents
    (all of which are normal by construction); a source with no parents
    implicates its outgoing conduits instead. Candidates are ranked by
    parent flow (``flows``), then conduit id.
    """
    anomalous = frozenset(anomalous)
    for v in anomalous:
        net.index(v)
    flows = flows or {}

    sources = frozenset(v for v in anomalous if not (upstream_set(net, v) & anomalous))
    candidates = []
    for v in sorted(sources):
        incoming = net.in_conduits(v)
        if incoming:
            for c in incoming:
                candidates.append((c.id, v, float(flows.get(c.from_node, 0.0))))
        else:
            for c in net.out_conduits(v):
                candidates.append((c.id, v, float(flows.get(v, 0.0))))
    candidates.sort(key=lambda x: (-x[2], x[0]))
    return LocalizationResult(
        sources=sources,
        segments=tuple(c for c, _, _ in candidates),
        anomaly_set=anomalous,
        ranked_candidates=tuple(candidates),
    )


def coanomalous(events, first_t: int, grace: int) -> set[str]:
    """Nodes confirmed in [first_t, first_t + grace]."""
    return {e.node_id for e in events if first_t <= e.detected_at <= first_t + grace}
