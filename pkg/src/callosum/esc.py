"""Correlation-driven subgraph construction.

Pipeline: :func:`correlation_map` -> :func:`extract_backbone` -> :func:`segment`
-> :func:`repair_subgraph` per segment. :func:`build_partition` chains them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ValidationError
from .serialize import canonical_json, sha256_hex
from .stgraph import STGraph

VIRTUAL_TAGS = ("reconnection", "ganglion-stub", "k-ring")


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    """Lag-1 temporal correlation for every directed edge."""

    edges: np.ndarray      # (E, 2) node indices, row-major order
    values: np.ndarray     # (E,)
    window: int
    node_count: int

    def __getitem__(self, edge) -> float:
        u, v = edge
        hit = np.flatnonzero((self.edges[:, 0] == u) & (self.edges[:, 1] == v))
        if hit.size == 0:
            raise KeyError(edge)
        return float(self.values[hit[0]])

    def as_dict(self) -> dict:
        return {(int(u), int(v)): float(r) for (u, v), r in zip(self.edges, self.values)}

    @property
    def matrix(self) -> np.ndarray:
        m = np.zeros((self.node_count, self.node_count))
        if len(self.edges):
            m[self.edges[:, 0], self.edges[:, 1]] = self.values
        return m

    def total(self) -> float:
        return float(np.sum(self.values))


def _rowwise_pearson(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlation along the last axis; constant operands give 0."""
    flat_a = (np.ptp(a, axis=-1) == 0)
    flat_b = (np.ptp(b, axis=-1) == 0)
    ac = a - a.mean(axis=-1, keepdims=True)
    bc = b - b.mean(axis=-1, keepdims=True)
    num = np.sum(ac * bc, axis=-1)
    den = np.sqrt(np.sum(ac * ac, axis=-1) * np.sum(bc * bc, axis=-1))
    degenerate = flat_a | flat_b | (den == 0)
    out = np.where(degenerate, 0.0, num / np.where(degenerate, 1.0, den))
    return np.clip(out, -1.0, 1.0)


def correlation_map(graph: STGraph, w: int) -> CorrelationMap:
    """rho(u, v) = mean over t < w of corr(X[t, u], X[t+1, v]).

    With F >= 2 the correlation runs across feature channels; with F = 1 it
    runs across the length-``w`` windows starting at ``t`` and ``t + 1``
    (truncated at the end of the series).
    """
    T, _, F = graph.features.shape
    if not 1 <= w <= T - 1:
        raise ValidationError(f"window {w} outside [1, {T - 1}]")
    edges = graph.edges()
    if len(edges) == 0:
        return CorrelationMap(edges=edges.reshape(0, 2), values=np.zeros(0), window=w,
                              node_count=graph.node_count)
    u, v = edges[:, 0], edges[:, 1]
    X = graph.features
    acc = np.zeros(len(edges))
    for t in range(w):
        if F >= 2:
            a = X[t, u, :]
            b = X[t + 1, v, :]
        else:
            stop = min(t + w, T - 1)
            a = X[t:stop, u, 0].T
            b = X[t + 1:stop + 1, v, 0].T
        acc += _rowwise_pearson(a, b)
    return CorrelationMap(edges=edges, values=acc / w, window=w, node_count=graph.node_count)


def extract_backbone(graph: STGraph, corr: CorrelationMap,
                     nodes: Optional[Sequence[int]] = None, refine: bool = True) -> list[int]:
    """Greedy ordering of all nodes maximising summed rho between neighbours.

    Start at the node with the largest total outgoing rho, follow the
    unvisited out-neighbour with the largest rho, and jump to the unvisited
    node with the largest total outgoing rho when stuck. Ties go to the
    smaller index. With ``refine`` the greedy order is then polished by
    :func:`relocate_refine`.
    """
    pool = list(range(graph.node_count)) if nodes is None else sorted(nodes)
    if not pool:
        raise ValidationError("cannot build a backbone for an empty graph")
    rho = corr.matrix
    adj = graph.adjacency.astype(bool)
    out_total = np.where(adj, rho, 0.0).sum(axis=1)
    unvisited = set(pool)

    def best_start() -> int:
        return min(unvisited, key=lambda i: (-out_total[i], i))

    order = [best_start()]
    unvisited.discard(order[0])
    while unvisited:
        cur = order[-1]
        cands = [j for j in np.flatnonzero(adj[cur]) if j in unvisited]
        nxt = min(cands, key=lambda j: (-rho[cur, j], j)) if cands else best_start()
        order.append(int(nxt))
        unvisited.discard(nxt)
    order = [int(i) for i in order]
    if refine:
        order = relocate_refine(order, np.where(adj, rho, 0.0))
    return order


def relocate_refine(order: Sequence[int], weight: np.ndarray, max_segment: int = 3,
                    max_passes: Optional[int] = None) -> list[int]:
    """Best-improvement or-opt: move a run of up to ``max_segment`` nodes to
    another slot while the ordering score strictly increases.

    Scans are in a fixed order and only strict gains above 1e-12 are taken,
    so the result is deterministic and never scores below the input.
    """
    o = list(order)
    n = len(o)
    if max_passes is None:
        max_passes = 10 * n + 10
    w = weight
    for _ in range(max_passes):
        best_gain, best_move = 1e-12, None
        for i in range(n):
            for length in range(1, max_segment + 1):
                j = i + length
                if j > n or length == n:
                    break
                head, tail = o[i], o[j - 1]
                prev = o[i - 1] if i > 0 else None
                nxt = o[j] if j < n else None
                gain_cut = 0.0
                if prev is not None:
                    gain_cut -= w[prev, head]
                if nxt is not None:
                    gain_cut -= w[tail, nxt]
                if prev is not None and nxt is not None:
                    gain_cut += w[prev, nxt]
                rest = o[:i] + o[j:]
                for k in range(len(rest) + 1):
                    if k == i:
                        continue
                    left = rest[k - 1] if k > 0 else None
                    right = rest[k] if k < len(rest) else None
                    gain = gain_cut
                    if left is not None and right is not None:
                        gain -= w[left, right]
                    if left is not None:
                        gain += w[left, head]
                    if right is not None:
                        gain += w[tail, right]
                    if gain > best_gain:
                        best_gain, best_move = gain, (i, j, k)
        if best_move is None:
            break
        i, j, k = best_move
        seg, rest = o[i:j], o[:i] + o[j:]
        o = rest[:k] + seg + rest[k:]
    return o


def ordering_score(order: Sequence[int], rho: np.ndarray, adjacency: np.ndarray) -> float:
    """Sum of rho over consecutive ordering pairs that are edges."""
    total = 0.0
    for a, b in zip(order[:-1], order[1:]):
        if adjacency[a, b]:
            total += rho[a, b]
    return total


# ------------------------------------------------------------------ partition


@dataclass(frozen=True, eq=False)
class Subgraph:
    """One ESC segment. Local index ``len(nodes)`` is the ganglion stub if present."""

    sid: int
    nodes: tuple                    # partition node indices in backbone order
    base_adjacency: np.ndarray      # real edges only
    adjacency: np.ndarray           # real + virtual edges, stub included
    virtual_edges: tuple = ()       # (local_a, local_b, tag) with a < b
    n_stubs: int = 0
    boundary: tuple = ()            # local indices incident to cut edges

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def local_size(self) -> int:
        return len(self.nodes) + self.n_stubs

    def degrees(self) -> np.ndarray:
        a = self.adjacency.astype(bool)
        return (a | a.T).sum(axis=1)

    def to_dict(self) -> dict:
        return {
            "sid": self.sid,
            "nodes": [int(n) for n in self.nodes],
            "base_edges": np.argwhere(self.base_adjacency).tolist(),
            "edges": np.argwhere(self.adjacency).tolist(),
            "virtual_edges": [list(e) for e in self.virtual_edges],
            "n_stubs": self.n_stubs,
            "boundary": list(self.boundary),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Subgraph":
        n = len(doc["nodes"])
        base = np.zeros((n, n), dtype=np.int8)
        for a, b in doc["base_edges"]:
            base[a, b] = 1
        size = n + doc["n_stubs"]
        adj = np.zeros((size, size), dtype=np.int8)
        for a, b in doc["edges"]:
            adj[a, b] = 1
        return cls(sid=doc["sid"], nodes=tuple(doc["nodes"]), base_adjacency=base,
                   adjacency=adj, virtual_edges=tuple(tuple(e) for e in doc["virtual_edges"]),
                   n_stubs=doc["n_stubs"], boundary=tuple(doc["boundary"]))


def raw_subgraph(sid: int, nodes: Sequence[int], adjacency: np.ndarray) -> Subgraph:
    nodes = tuple(int(n) for n in nodes)
    base = np.ascontiguousarray(adjacency[np.ix_(nodes, nodes)].astype(np.int8))
    return Subgraph(sid=sid, nodes=nodes, base_adjacency=base, adjacency=base.copy())


@dataclass(frozen=True, eq=False)
class Partition:
    """Backbone segmentation of a graph into ``m`` subgraphs.

    ``adjacency`` and ``rho`` are full ``N x N`` structure matrices in the
    index space of ``node_ids``; removed nodes keep their index but lose all
    edges and disappear from ``backbone`` and every subgraph.
    """

    node_ids: tuple
    adjacency: np.ndarray
    rho: np.ndarray
    backbone: tuple
    subgraphs: tuple
    gamma: float = 0.0
    k_ring: int = 2
    nominal_size: float = 1.0
    removed: frozenset = frozenset()

    @property
    def m(self) -> int:
        return len(self.subgraphs)

    @property
    def live_nodes(self) -> list[int]:
        return sorted(self.backbone)

    def assignment(self) -> dict:
        return {n: pos for pos, sg in enumerate(self.subgraphs) for n in sg.nodes}

    def assignment_array(self) -> np.ndarray:
        arr = np.full(len(self.node_ids), -1, dtype=np.int64)
        for pos, sg in enumerate(self.subgraphs):
            arr[list(sg.nodes)] = pos
        return arr

    @property
    def cut_edges(self) -> list[tuple[int, int]]:
        assign = self.assignment_array()
        out = []
        for u, v in np.argwhere(self.adjacency == 1):
            if assign[u] >= 0 and assign[v] >= 0 and assign[u] != assign[v]:
                out.append((int(u), int(v)))
        return out

    @property
    def delta_cut(self) -> float:
        total = 0.0
        for u, v in self.cut_edges:
            total += self.rho[u, v]
        return float(total)

    def position_of(self, sid: int) -> int:
        for pos, sg in enumerate(self.subgraphs):
            if sg.sid == sid:
                return pos
        raise KeyError(sid)

    def to_dict(self) -> dict:
        edges = np.argwhere(self.adjacency == 1)
        return {
            "node_ids": list(self.node_ids),
            "backbone": [int(i) for i in self.backbone],
            "assignment": self.assignment_array().tolist(),
            "cut_edges": [[u, v] for u, v in self.cut_edges],
            "delta_cut": self.delta_cut,
            "m": self.m,
            "gamma": self.gamma,
            "k_ring": self.k_ring,
            "nominal_size": self.nominal_size,
            "removed": sorted(int(i) for i in self.removed),
            "edges": [[int(u), int(v), float(self.rho[u, v])] for u, v in edges],
            "subgraphs": [sg.to_dict() for sg in self.subgraphs],
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return sha256_hex(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "Partition":
        n = len(doc["node_ids"])
        adj = np.zeros((n, n), dtype=np.int8)
        rho = np.zeros((n, n))
        for u, v, r in doc["edges"]:
            adj[u, v] = 1
            rho[u, v] = r
        return cls(
            node_ids=tuple(doc["node_ids"]), adjacency=adj, rho=rho,
            backbone=tuple(doc["backbone"]),
            subgraphs=tuple(Subgraph.from_dict(s) for s in doc["subgraphs"]),
            gamma=doc["gamma"], k_ring=doc["k_ring"], nominal_size=doc["nominal_size"],
            removed=frozenset(doc["removed"]),
        )


def segment_bounds(n: int, m: int) -> list[int]:
    return [(i * n) // m for i in range(m + 1)]


def segment(d: Sequence[int], m: int, graph: STGraph, corr: CorrelationMap,
            gamma: float = 0.0, k_ring: int = 2) -> Partition:
    """Assign backbone position ``idx`` to subgraph ``i`` when
    ``floor(i N'/M) <= idx < floor((i+1) N'/M)`` (0-based ``i``)."""
    n = len(d)
    if not 1 <= m <= n:
        raise ValidationError(f"m={m} must lie in [1, {n}]")
    bounds = segment_bounds(n, m)
    adj = np.array(graph.adjacency, dtype=np.int8)
    subs = tuple(raw_subgraph(i, d[bounds[i]:bounds[i + 1]], adj) for i in range(m))
    return Partition(node_ids=graph.node_ids, adjacency=adj, rho=corr.matrix,
                     backbone=tuple(int(x) for x in d), subgraphs=subs, gamma=gamma,
                     k_ring=k_ring, nominal_size=graph.node_count / m)


def objective(delta_cut: float, m: int, gamma: float) -> float:
    return delta_cut + gamma * math.log(m)


def select_m(graph: STGraph, corr: CorrelationMap, gamma: float,
             candidates: Iterable[int], d: Optional[Sequence[int]] = None) -> int:
    """argmin over candidates of delta_cut(M) + gamma * ln M; ties to smaller M."""
    cands = sorted(set(int(c) for c in candidates))
    if not cands:
        raise ValidationError("candidate list is empty")
    if d is None:
        d = extract_backbone(graph, corr)
    best = None
    for m in cands:
        score = objective(segment(d, m, graph, corr).delta_cut, m, gamma)
        if best is None or score < best[0]:
            best = (score, m)
    return best[1]


def repair_subgraph(sub: Subgraph, d: Sequence[int], cut: Iterable[tuple[int, int]],
                    k: int) -> Subgraph:
    """Reconnect isolated nodes, attach a ganglion stub, densify boundary rings.

    Every added edge stays inside the subgraph's own node set plus its stub.
    """
    pos = {int(node): i for i, node in enumerate(d)}
    local = {node: i for i, node in enumerate(sub.nodes)}
    n = len(sub.nodes)
    adj = sub.base_adjacency.astype(np.int8).copy()
    virtual: list[tuple[int, int, str]] = []

    def link(a: int, b: int, tag: str, mat: np.ndarray) -> None:
        if a == b or (mat[a, b] and mat[b, a]):
            return
        mat[a, b] = mat[b, a] = 1
        virtual.append((min(a, b), max(a, b), tag))

    sym = adj.astype(bool) | adj.T.astype(bool)
    isolated = [i for i in range(n) if not sym[i].any()]
    for i in isolated:
        others = [j for j in range(n) if j != i]
        others.sort(key=lambda j: (abs(pos[sub.nodes[j]] - pos[sub.nodes[i]]), pos[sub.nodes[j]]))
        for j in others[:2]:
            link(i, j, "reconnection", adj)

    boundary = sorted({local[u] for u, v in cut if u in local and v not in local}
                      | {local[v] for u, v in cut if v in local and u not in local})
    n_stubs = 1 if boundary else 0
    full = np.zeros((n + n_stubs, n + n_stubs), dtype=np.int8)
    full[:n, :n] = adj
    for b in boundary:
        link(b, n, "ganglion-stub", full)
    if k > 0:
        for b in boundary:
            pb = pos[sub.nodes[b]]
            for j in range(n):
                if j != b and abs(pos[sub.nodes[j]] - pb) <= k:
                    link(b, j, "k-ring", full)
    if not virtual and n_stubs == 0:
        return sub
    return replace(sub, adjacency=full, virtual_edges=tuple(virtual), n_stubs=n_stubs,
                   boundary=tuple(boundary))


def build_subgraph(sid: int, nodes: Sequence[int], adjacency: np.ndarray,
                   backbone: Sequence[int], k: int) -> Subgraph:
    """Fresh segment for ``nodes`` from live structure, then repaired."""
    sub = raw_subgraph(sid, nodes, adjacency)
    inside = set(sub.nodes)
    cut = []
    for u in sub.nodes:
        for v in np.flatnonzero(adjacency[u]):
            if int(v) not in inside:
                cut.append((u, int(v)))
        for v in np.flatnonzero(adjacency[:, u]):
            if int(v) not in inside:
                cut.append((int(v), u))
    return repair_subgraph(sub, backbone, cut, k)


def repair_all(part: Partition) -> Partition:
    cut = part.cut_edges
    subs = tuple(repair_subgraph(sg, part.backbone, cut, part.k_ring) for sg in part.subgraphs)
    return replace(part, subgraphs=subs)


def build_partition(graph: STGraph, corr: CorrelationMap, m: Optional[int] = None,
                    gamma: float = 0.0, k_ring: int = 2,
                    candidates: Sequence[int] = (2, 4, 8)) -> Partition:
    d = extract_backbone(graph, corr)
    if m is None:
        m = select_m(graph, corr, gamma, [c for c in candidates if c <= len(d)], d=d)
    return repair_all(segment(d, m, graph, corr, gamma=gamma, k_ring=k_ring))


def info_retention(partition: Partition, corr: Optional[CorrelationMap] = None) -> tuple[float, float]:
    """(Info_intra, TotalCorr): rho summed over intra-subgraph real edges and over all edges."""
    rho = partition.rho if corr is None else corr.matrix
    live = partition.adjacency == 1
    total = float(np.sum(rho[live]))
    intra = 0.0
    for sg in partition.subgraphs:
        idx = np.array(sg.nodes, dtype=np.int64)
        block = live[np.ix_(idx, idx)]
        intra += float(np.sum(rho[np.ix_(idx, idx)][block]))
    return intra, total
