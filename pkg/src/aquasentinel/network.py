"""Directed pipeline graph and topology queries.

Nodes are junctions (manholes), conduits are directed edges oriented along
the nominal gravity-flow direction. The graph must be a DAG with at least
one outfall; parallel conduits and self-loops are rejected at load time.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping


class NetworkError(ValueError):
    """Raised for malformed or physically invalid network definitions."""


@dataclass(frozen=True)
class NodeSpec:
    id: str
    elevation: float = 0.0
    base_demand: float = 0.0
    risk: float = 0.0
    is_outfall: bool = False

    def __post_init__(self):
        if not self.id:
            raise NetworkError("node id must be a nonempty string")
        if self.base_demand < 0:
            raise NetworkError(f"node {self.id}: base_demand must be >= 0")
        if not 0.0 <= self.risk <= 1.0:
            raise NetworkError(f"node {self.id}: risk must lie in [0, 1]")


@dataclass(frozen=True)
class ConduitSpec:
    id: str
    from_node: str
    to_node: str
    length: float
    diameter: float
    hw_coefficient: float

    def __post_init__(self):
        if not self.id:
            raise NetworkError("conduit id must be a nonempty string")
        if self.from_node == self.to_node:
            raise NetworkError(f"conduit {self.id}: self-loop on {self.from_node}")
        for name in ("length", "diameter", "hw_coefficient"):
            if not getattr(self, name) > 0:
                raise NetworkError(f"conduit {self.id}: nonpositive {name}")

    @property
    def conveyance(self) -> float:
        """Hazen-Williams carrying-capacity factor C * D**2.63."""
        return self.hw_coefficient * self.diameter**2.63


@dataclass(frozen=True)
class Network:
    """Immutable, validated pipeline network.

    Node order is the file order and is used as the row order of every
    state array in the package.
    """

    nodes: tuple[NodeSpec, ...]
    conduits: tuple[ConduitSpec, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "conduits", tuple(self.conduits))
        index = {}
        for i, node in enumerate(self.nodes):
            if node.id in index:
                raise NetworkError(f"duplicate node id {node.id!r}")
            index[node.id] = i
        object.__setattr__(self, "_index", index)

        seen_ids = set()
        seen_pairs = set()
        for c in self.conduits:
            if c.id in seen_ids:
                raise NetworkError(f"duplicate conduit id {c.id!r}")
            seen_ids.add(c.id)
            for end in (c.from_node, c.to_node):
                if end not in index:
                    raise NetworkError(f"conduit {c.id}: dangling endpoint {end!r}")
            pair = (c.from_node, c.to_node)
            if pair in seen_pairs:
                raise NetworkError(f"conduit {c.id}: parallel conduit {pair[0]}->{pair[1]}")
            seen_pairs.add(pair)

        if not self.nodes:
            raise NetworkError("network has no nodes")
        for node in self.nodes:
            if node.is_outfall and self.out_conduits(node.id):
                raise NetworkError(f"outfall {node.id} has outgoing conduits")
        if not self.outfalls:
            raise NetworkError("network has no outfall (node with out-degree 0)")
        # raises on cycles
        self.topological_order  # noqa: B018

    # -- basic lookups -----------------------------------------------------

    @property
    def node_ids(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes)

    @property
    def conduit_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.conduits)

    def index(self, node_id: str) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise NetworkError(f"unknown node id {node_id!r}") from None

    def node(self, node_id: str) -> NodeSpec:
        return self.nodes[self.index(node_id)]

    @cached_property
    def _conduit_by_id(self) -> dict[str, ConduitSpec]:
        return {c.id: c for c in self.conduits}

    def conduit(self, conduit_id: str) -> ConduitSpec:
        try:
            return self._conduit_by_id[conduit_id]
        except KeyError:
            raise NetworkError(f"unknown conduit id {conduit_id!r}") from None

    @cached_property
    def _out(self) -> dict[str, tuple[ConduitSpec, ...]]:
        out = {n.id: [] for n in self.nodes}
        for c in self.conduits:
            out[c.from_node].append(c)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def _in(self) -> dict[str, tuple[ConduitSpec, ...]]:
        inc = {n.id: [] for n in self.nodes}
        for c in self.conduits:
            inc[c.to_node].append(c)
        return {k: tuple(v) for k, v in inc.items()}

    def out_conduits(self, node_id: str) -> tuple[ConduitSpec, ...]:
        self.index(node_id)
        return self._out[node_id]

    def in_conduits(self, node_id: str) -> tuple[ConduitSpec, ...]:
        self.index(node_id)
        return self._in[node_id]

    def parents(self, node_id: str) -> tuple[str, ...]:
        return tuple(c.from_node for c in self.in_conduits(node_id))

    def children(self, node_id: str) -> tuple[str, ...]:
        return tuple(c.to_node for c in self.out_conduits(node_id))

    @property
    def outfalls(self) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if not self._out[n.id])

    @property
    def sources(self) -> tuple[str, ...]:
        """Nodes with in-degree 0."""
        return tuple(n.id for n in self.nodes if not self._in[n.id])

    @cached_property
    def split_fractions(self) -> dict[str, float]:
        """Fraction of a node's throughput carried by each outgoing conduit.

        A diverging node splits its flow in proportion to the conduits'
        Hazen-Williams conveyance; on trees every fraction is exactly 1.
        """
        shares = {}
        for node in self.nodes:
            outs = self._out[node.id]
            if len(outs) == 1:
                shares[outs[0].id] = 1.0
                continue
            total = sum(c.conveyance for c in outs)
            for c in outs:
                shares[c.id] = c.conveyance / total
        return shares

    @cached_property
    def topological_order(self) -> tuple[str, ...]:
        """Kahn ordering, ties broken by node file order."""
        indeg = {n.id: len(self._in[n.id]) for n in self.nodes}
        ready = deque(n.id for n in self.nodes if indeg[n.id] == 0)
        order = []
        while ready:
            v = ready.popleft()
            order.append(v)
            for c in self._out[v]:
                indeg[c.to_node] -= 1
                if indeg[c.to_node] == 0:
                    ready.append(c.to_node)
        if len(order) != len(self.nodes):
            stuck = sorted(k for k, d in indeg.items() if d > 0)
            raise NetworkError(f"cycle detected among nodes {stuck}")
        return tuple(order)

    def to_dict(self) -> dict:
        return {
            "nodes": [
                {
                    "id": n.id,
                    "elevation_m": n.elevation,
                    "base_demand_m3s": n.base_demand,
                    "risk": n.risk,
                    "is_outfall": n.is_outfall,
                }
                for n in self.nodes
            ],
            "conduits": [
                {
                    "id": c.id,
                    "from": c.from_node,
                    "to": c.to_node,
                    "length_m": c.length,
                    "diameter_m": c.diameter,
                    "hazen_williams_c": c.hw_coefficient,
                }
                for c in self.conduits
            ],
        }


def _number(record: Mapping, key: str, where: str, default=None) -> float:
    if key not in record:
        if default is None:
            raise NetworkError(f"{where}: missing field {key!r}")
        return default
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise NetworkError(f"{where}: field {key!r} must be a number")
    return float(value)


def _ident(record: Mapping, key: str, where: str) -> str:
    value = record.get(key)
    if not isinstance(value, str) or not value:
        raise NetworkError(f"{where}: field {key!r} must be a nonempty string")
    return value


def network_from_dict(doc: Mapping) -> Network:
    if not isinstance(doc, Mapping):
        raise NetworkError("network document must be a JSON object")
    raw_nodes = doc.get("nodes")
    raw_conduits = doc.get("conduits")
    if not isinstance(raw_nodes, list) or not isinstance(raw_conduits, list):
        raise NetworkError("network document needs 'nodes' and 'conduits' arrays")

    nodes = []
    for i, rec in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        if not isinstance(rec, Mapping):
            raise NetworkError(f"{where}: expected an object")
        outfall = rec.get("is_outfall", False)
        if not isinstance(outfall, bool):
            raise NetworkError(f"{where}: is_outfall must be a boolean")
        nodes.append(
            NodeSpec(
                id=_ident(rec, "id", where),
                elevation=_number(rec, "elevation_m", where, 0.0),
                base_demand=_number(rec, "base_demand_m3s", where, 0.0),
                risk=_number(rec, "risk", where, 0.0),
                is_outfall=outfall,
            )
        )

    conduits = []
    for i, rec in enumerate(raw_conduits):
        where = f"conduits[{i}]"
        if not isinstance(rec, Mapping):
            raise NetworkError(f"{where}: expected an object")
        conduits.append(
            ConduitSpec(
                id=_ident(rec, "id", where),
                from_node=_ident(rec, "from", where),
                to_node=_ident(rec, "to", where),
                length=_number(rec, "length_m", where),
                diameter=_number(rec, "diameter_m", where),
                hw_coefficient=_number(rec, "hazen_williams_c", where),
            )
        )
    return Network(tuple(nodes), tuple(conduits))


def load_network(source: str | bytes) -> Network:
    """Parse and validate a network JSON document.

    ``source`` is the document text itself; use :func:`read_network` for
    a path.
    """
    try:
        doc = json.loads(source)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise NetworkError(f"parse error: {exc}") from exc
    return network_from_dict(doc)


def read_network(path: str | Path) -> Network:
    return load_network(Path(path).read_bytes())


def bundled_network_path() -> Path:
    return Path(__file__).parent / "data" / "campus23.json"


def bundled_network() -> Network:
    """The 23-node, 22-conduit synthetic campus sewer tree."""
    return read_network(bundled_network_path())


# -- topology queries ------------------------------------------------------


def upstream_set(net: Network, v: str) -> set[str]:
    """All nodes with a directed path to ``v`` (``v`` excluded)."""
    net.index(v)
    seen = set()
    stack = [v]
    while stack:
        w = stack.pop()
        for p in net.parents(w):
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def downstream_set(net: Network, v: str) -> set[str]:
    """All nodes reachable from ``v`` (``v`` excluded)."""
    net.index(v)
    seen = set()
    stack = [v]
    while stack:
        w = stack.pop()
        for c in net.children(w):
            if c not in seen:
                seen.add(c)
                stack.append(c)
    return seen


def betweenness(net: Network) -> dict[str, float]:
    """Directed, unweighted, unnormalized betweenness centrality.

    Brandes (2001) accumulation: one BFS per source, then dependencies are
    back-propagated in order of non-increasing distance. Each ordered pair
    (s, t) with s != t contributes sigma_st(v) / sigma_st to every interior
    node v on its shortest paths.
    """
    ids = net.node_ids
    score = dict.fromkeys(ids, 0.0)
    for s in ids:
        stack = []
        preds = {v: [] for v in ids}
        sigma = dict.fromkeys(ids, 0)
        dist = dict.fromkeys(ids, -1)
        sigma[s] = 1
        dist[s] = 0
        queue = deque([s])
        while queue:
            v = queue.popleft()
            stack.append(v)
            for w in net.children(v):
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    queue.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = dict.fromkeys(ids, 0.0)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w])
            if w != s:
                score[w] += delta[w]
    return score


def hop_distance(net: Network, u: str, v: str) -> int | None:
    """Shortest hop count on the undirected graph; ``None`` if unreachable."""
    net.index(u)
    net.index(v)
    if u == v:
        return 0
    dist = {u: 0}
    queue = deque([u])
    while queue:
        x = queue.popleft()
        for y in (*net.children(x), *net.parents(x)):
            if y in dist:
                continue
            dist[y] = dist[x] + 1
            if y == v:
                return dist[y]
            queue.append(y)
    return None


def hop_distances_from(net: Network, u: str) -> dict[str, int]:
    """Undirected BFS distances from ``u`` to every reachable node."""
    net.index(u)
    dist = {u: 0}
    queue = deque([u])
    while queue:
        x = queue.popleft()
        for y in (*net.children(x), *net.parents(x)):
            if y not in dist:
                dist[y] = dist[x] + 1
                queue.append(y)
    return dist


def build_network(
    edges: Iterable[tuple[str, str]],
    nodes: Iterable[str] = (),
    *,
    length: float = 100.0,
    diameter: float = 0.3,
    c: float = 130.0,
) -> Network:
    """Convenience constructor from an edge list with uniform pipe geometry."""
    edges = list(edges)
    ids = list(dict.fromkeys([*nodes, *(x for e in edges for x in e)]))
    has_out = {a for a, _ in edges}
    node_specs = [NodeSpec(id=i, is_outfall=i not in has_out) for i in ids]
    conduits = [
        ConduitSpec(f"{a}-{b}", a, b, length, diameter, c) for a, b in edges
    ]
    return Network(tuple(node_specs), tuple(conduits))
