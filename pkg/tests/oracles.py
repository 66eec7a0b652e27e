"""Independent reference implementations used as test oracles.

These are written from the definitions, deliberately naive, and share no
code with the package beyond the Network container.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def random_dag(rng: np.random.Generator, n: int, p: float = 0.4, prefix: str = "N"):
    """Edges of a random DAG on n nodes; edges only go from lower to higher index.

    Every node without an outgoing edge is an outfall, so any result is valid.
    """
    ids = [f"{prefix}{i}" for i in range(n)]
    edges = [(ids[i], ids[j]) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return ids, edges


def random_tree(rng: np.random.Generator, n: int, prefix: str = "T"):
    """In-tree towards node 0 (the outfall): every other node drains to a lower index."""
    ids = [f"{prefix}{i:02d}" for i in range(n)]
    edges = [(ids[i], ids[int(rng.integers(0, i))]) for i in range(1, n)]
    return ids, edges


def all_simple_paths(adj, s, t):
    out = []

    def walk(v, path):
        if v == t:
            out.append(list(path))
            return
        for w in adj.get(v, ()):
            if w not in path:
                path.append(w)
                walk(w, path)
                path.pop()

    walk(s, [s])
    return out


def brute_betweenness(ids, edges):
    """Enumerate every path between every ordered pair, keep the shortest ones."""
    adj = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    score = {v: 0.0 for v in ids}
    for s, t in itertools.permutations(ids, 2):
        paths = all_simple_paths(adj, s, t)
        if not paths:
            continue
        best = min(len(p) for p in paths)
        shortest = [p for p in paths if len(p) == best]
        for v in ids:
            if v in (s, t):
                continue
            through = sum(v in p for p in shortest)
            score[v] += through / len(shortest)
    return score


def reverse_reachable(edges, v):
    """Nodes with a directed path to v, via DFS on reversed edges."""
    radj = {}
    for a, b in edges:
        radj.setdefault(b, []).append(a)
    seen, stack = set(), [v]
    while stack:
        for u in radj.get(stack.pop(), ()):
            if u not in seen:
                seen.add(u)
                stack.append(u)
    seen.discard(v)
    return seen


def undirected_bfs(ids, edges, u):
    nbr = {v: set() for v in ids}
    for a, b in edges:
        nbr[a].add(b)
        nbr[b].add(a)
    dist = {u: 0}
    frontier = [u]
    while frontier:
        nxt = []
        for x in frontier:
            for y in nbr[x]:
                if y not in dist:
                    dist[y] = dist[x] + 1
                    nxt.append(y)
        frontier = nxt
    return dist


def hw_scalar(q, length, c, d):
    """Hazen-Williams head loss written out with the math module."""
    if q == 0:
        return 0.0
    return 10.67 * length * math.pow(q / (c * math.pow(d, 2.63)), 1.852)


def tree_accumulation(ids, edges, inflow):
    """Flow through each node of an in-tree: own inflow plus everything above it."""
    children_of = {}
    for a, b in edges:
        children_of.setdefault(b, []).append(a)

    def total(v):
        return inflow.get(v, 0.0) + sum(total(u) for u in children_of.get(v, ()))

    return {v: total(v) for v in ids}


def brute_sources(ids, edges, anomalous):
    return {v for v in anomalous if not (reverse_reachable(edges, v) & set(anomalous))}


def brute_placement(ids, edges, totals, k, d_min):
    """Best summed score over every feasible subset of size <= k."""
    dist = {u: undirected_bfs(ids, edges, u) for u in ids}
    best, best_set = -math.inf, ()
    for size in range(1, k + 1):
        for combo in itertools.combinations(ids, size):
            ok = all(
                dist[a].get(b) is None or dist[a][b] >= d_min
                for a, b in itertools.combinations(combo, 2)
            )
            if ok:
                s = sum(totals[v] for v in combo)
                if s > best:
                    best, best_set = s, combo
    return best, best_set


def rtca_batch(y, y_hat, W, t_persist, alpha, k1, k2, eps, warmup):
    """Recompute the detector trace over whole arrays in one pass.

    e_rt is vectorized, e_c is re-sliced from the e_rt array at every step,
    and (mu, s2) are reported before the step's own update.
    """
    T = len(y)
    e_rt = np.abs(np.asarray(y, float) - np.asarray(y_hat, float)) / (np.asarray(y_hat, float) + eps)
    e_c = np.empty(T)
    for t in range(T):
        window = e_rt[max(0, t - W + 1): t + 1].tolist()
        e_c[t] = sum(window) / len(window)

    mu_pre = np.empty(T)
    s2_pre = np.empty(T)
    status = []
    mu = s2 = 0.0
    run = 0
    for t in range(T):
        mu_pre[t], s2_pre[t] = mu, s2
        sd = math.sqrt(s2)
        dual = e_rt[t] > mu + k1 * sd and e_c[t] > mu + k2 * sd
        if t > warmup and dual:
            run += 1
            status.append("Confirmed" if run >= t_persist else "Suspect")
            continue
        run = 0
        status.append("Warmup" if t <= warmup else "Normal")
        mu = (1 - alpha) * mu + alpha * e_rt[t]
        s2 = (1 - alpha) * s2 + alpha * (e_rt[t] - mu) ** 2
    return e_rt, e_c, mu_pre, s2_pre, status
