"""Meta-graph construction: PageRank key nodes, boundary nodes, ganglia, sparsification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .esc import Partition, Subgraph
from .serialize import canonical_json, sha256_hex

# meta-edge classes, in the order they are sacrificed when weights tie
STAR, BRIDGE, AGG = 0, 1, 2
EDGE_CLASS_NAMES = {STAR: "star", BRIDGE: "key", AGG: "agg"}


@dataclass(frozen=True)
class PageRankScores:
    scores: np.ndarray
    damping: float
    iterations: int


def pagerank(adjacency: np.ndarray, damping: float = 0.85, tol: float = 1e-12,
             max_iter: int = 100_000) -> PageRankScores:
    """Power iteration with uniform teleport; dangling mass is spread uniformly.

    ``adjacency[u, v] = 1`` is an edge ``u -> v``.
    """
    a = np.asarray(adjacency, dtype=np.float64)
    n = a.shape[0]
    if n == 0:
        raise ValidationError("pagerank needs at least one node")
    if not 0.0 < damping < 1.0:
        raise ValidationError("damping must lie in (0, 1)")
    if tol <= 0:
        raise ValidationError("tol must be positive")
    out_deg = a.sum(axis=1)
    dangling = out_deg == 0
    # column-stochastic transition: P[v, u] = a[u, v] / out_deg(u)
    trans = (a / np.where(dangling, 1.0, out_deg)[:, None]).T
    r = np.full(n, 1.0 / n)
    for it in range(1, max_iter + 1):
        nxt = damping * (trans @ r + r[dangling].sum() / n) + (1.0 - damping) / n
        nxt /= nxt.sum()
        delta = np.abs(nxt - r).sum()
        r = nxt
        if delta < tol:
            return PageRankScores(scores=r, damping=damping, iterations=it)
    return PageRankScores(scores=r, damping=damping, iterations=max_iter)


def key_count(size: int) -> int:
    """ceil(log2 size), at least 1."""
    return max(1, (max(size, 1) - 1).bit_length())


def select_key_nodes(sub: Subgraph, scores: PageRankScores) -> list[int]:
    """Top-K real (non-stub) nodes by score, ties to the smaller node index."""
    n = sub.size
    if n == 0:
        return []
    k = key_count(n)
    ranked = sorted(range(n), key=lambda i: (-scores.scores[i], sub.nodes[i]))
    return sorted(sub.nodes[i] for i in ranked[:k])


def key_nodes_for(partition: Partition, damping: float = 0.85) -> list[list[int]]:
    return [select_key_nodes(sg, pagerank(sg.adjacency, damping)) for sg in partition.subgraphs]


@dataclass(frozen=True, eq=False)
class MetaGraph:
    """Meta-vertices are laid out as ``[real..., summary slots..., ganglia...]``.

    Edges are undirected with one non-negative weight each.
    """

    real_nodes: tuple          # partition node indices (keys and boundary nodes)
    real_subgraph: tuple       # subgraph position of each real meta-vertex
    key_nodes: tuple           # per-subgraph tuples of partition node indices
    boundary_nodes: tuple      # sorted partition node indices incident to cut edges
    n_slots: int
    n_ganglia: int
    edges: np.ndarray          # (E, 2) meta-vertex indices, a < b
    weights: np.ndarray        # (E,)
    classes: np.ndarray        # (E,) STAR / BRIDGE / AGG
    budget: int
    partition_digest: str

    @property
    def n_real(self) -> int:
        return len(self.real_nodes)

    @property
    def size(self) -> int:
        return self.n_real + self.n_slots + self.n_ganglia

    def slot_index(self, pos: int) -> int:
        return self.n_real + pos

    def ganglion_index(self, g: int) -> int:
        return self.n_real + self.n_slots + g

    def adjacency(self, weights: np.ndarray | None = None) -> np.ndarray:
        w = self.weights if weights is None else weights
        mat = np.zeros((self.size, self.size))
        if len(self.edges):
            mat[self.edges[:, 0], self.edges[:, 1]] = w
            mat[self.edges[:, 1], self.edges[:, 0]] = w
        return mat

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.size, dtype=np.int64)
        np.add.at(deg, self.edges[:, 0], 1)
        np.add.at(deg, self.edges[:, 1], 1)
        return deg

    def to_dict(self) -> dict:
        return {
            "real_nodes": [int(x) for x in self.real_nodes],
            "real_subgraph": [int(x) for x in self.real_subgraph],
            "key_nodes": [[int(x) for x in ks] for ks in self.key_nodes],
            "boundary_nodes": [int(x) for x in self.boundary_nodes],
            "n_slots": self.n_slots,
            "n_ganglia": self.n_ganglia,
            "edges": [[int(a), int(b), float(w), EDGE_CLASS_NAMES[int(c)]]
                      for (a, b), w, c in zip(self.edges, self.weights, self.classes)],
            "budget": self.budget,
            "partition_digest": self.partition_digest,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return sha256_hex(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "MetaGraph":
        names = {v: k for k, v in EDGE_CLASS_NAMES.items()}
        e = doc["edges"]
        return cls(
            real_nodes=tuple(doc["real_nodes"]), real_subgraph=tuple(doc["real_subgraph"]),
            key_nodes=tuple(tuple(k) for k in doc["key_nodes"]),
            boundary_nodes=tuple(doc["boundary_nodes"]), n_slots=doc["n_slots"],
            n_ganglia=doc["n_ganglia"],
            edges=np.array([[a, b] for a, b, _, _ in e], dtype=np.int64).reshape(-1, 2),
            weights=np.array([w for _, _, w, _ in e], dtype=np.float64),
            classes=np.array([names[c] for *_, c in e], dtype=np.int64),
            budget=doc["budget"], partition_digest=doc["partition_digest"],
        )


def edge_budget(m: int, budget_c: float) -> int:
    """ceil(c * M * log2 M); the log factor is floored at 1 so M = 1 keeps a budget."""
    return int(math.ceil(budget_c * m * max(math.log2(m), 1.0)))


def build_meta_graph(partition: Partition, key_sets: Sequence[Sequence[int]],
                     cut_edges: Sequence[tuple[int, int]] | None = None,
                     ganglion_count: int | None = None, budget_c: float = 8.0) -> MetaGraph:
    """Assemble aggregation, ganglion-star and key/bridge edges, then sparsify.

    Lowest-weight edges go first (ties: star before key before aggregation,
    then a deterministic rotation so each ganglion keeps its home nodes).
    An edge is never dropped if it is the last one of either endpoint.
    """
    m = partition.m
    if cut_edges is None:
        cut_edges = partition.cut_edges
    if ganglion_count is None:
        ganglion_count = m
    if ganglion_count < 1:
        raise ValidationError("ganglion_count must be >= 1")
    if len(key_sets) != m:
        raise ValidationError("one key set per subgraph is required")
    assign = partition.assignment()
    boundary = sorted({int(u) for e in cut_edges for u in e})
    real = sorted(set(boundary) | {int(k) for ks in key_sets for k in ks})
    meta_idx = {node: i for i, node in enumerate(real)}
    real_sub = tuple(assign[n] for n in real)
    n_real = len(real)
    slot = lambda pos: n_real + pos
    gang = lambda g: n_real + m + g

    weight: dict[tuple[int, int], float] = {}
    klass: dict[tuple[int, int], int] = {}

    def put(a: int, b: int, w: float, c: int) -> None:
        key = (min(a, b), max(a, b))
        if key in weight:
            weight[key] = max(weight[key], w)
            klass[key] = max(klass[key], c)
        else:
            weight[key] = w
            klass[key] = c

    for i, node in enumerate(real):
        put(i, slot(real_sub[i]), 1.0, AGG)
    for g in range(ganglion_count):
        for i in range(n_real):
            put(i, gang(g), 1.0, STAR)
    adjacent = {(min(assign[u], assign[v]), max(assign[u], assign[v])) for u, v in cut_edges}
    for p, q in sorted(adjacent):
        for a in key_sets[p]:
            for b in key_sets[q]:
                put(meta_idx[a], meta_idx[b], 1.0, BRIDGE)
    # boundary pairs across a cut carry the cut edge's correlation magnitude
    cut_w: dict[tuple[int, int], float] = {}
    for u, v in cut_edges:
        key = (min(meta_idx[u], meta_idx[v]), max(meta_idx[u], meta_idx[v]))
        cut_w[key] = max(cut_w.get(key, 0.0), abs(float(partition.rho[u, v])))
    for key, w in cut_w.items():
        weight[key] = w
        klass[key] = BRIDGE

    keys = sorted(weight)
    size = n_real + m + ganglion_count
    budget = edge_budget(m, budget_c)
    deg = np.zeros(size, dtype=np.int64)
    for a, b in keys:
        deg[a] += 1
        deg[b] += 1

    def drop_order(e: tuple[int, int]):
        a, b = e
        home = 1
        if klass[e] == STAR:
            g = b - n_real - m
            home = 1 if (a % ganglion_count) == g else 0
        return (weight[e], klass[e], home, a, b)

    alive = set(keys)
    excess = len(alive) - budget
    if excess > 0:
        for e in sorted(keys, key=drop_order):
            if excess <= 0:
                break
            a, b = e
            if deg[a] > 1 and deg[b] > 1:
                alive.discard(e)
                deg[a] -= 1
                deg[b] -= 1
                excess -= 1
        if excess > 0:
            raise ValidationError(
                f"edge budget {budget} cannot keep every meta-vertex connected "
                f"(deficit {excess} edges)")
    kept = sorted(alive)
    return MetaGraph(
        real_nodes=tuple(real), real_subgraph=real_sub,
        key_nodes=tuple(tuple(sorted(int(k) for k in ks)) for ks in key_sets),
        boundary_nodes=tuple(boundary), n_slots=m, n_ganglia=ganglion_count,
        edges=np.array(kept, dtype=np.int64).reshape(-1, 2),
        weights=np.array([weight[e] for e in kept], dtype=np.float64),
        classes=np.array([klass[e] for e in kept], dtype=np.int64),
        budget=budget, partition_digest=partition.digest(),
    )
