"""Spatio-temporal graph data model, CSV ingestion, synthetic data and metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree

from .errors import ValidationError
from .serialize import canonical_json, sha256_hex


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class STGraph:
    """Static directed topology with a timestep-major feature tensor ``(T, N, F)``."""

    adjacency: np.ndarray
    features: np.ndarray
    node_ids: tuple

    def __post_init__(self) -> None:
        adj = np.asarray(self.adjacency)
        feats = np.asarray(self.features, dtype=np.float64)
        ids = tuple(str(i) for i in self.node_ids)
        n = len(ids)
        if adj.shape != (n, n):
            raise ValidationError(f"adjacency shape {adj.shape} does not match {n} nodes")
        if not np.isin(adj, (0, 1)).all():
            raise ValidationError("adjacency entries must be 0 or 1")
        if n and np.any(np.diag(adj) != 0):
            raise ValidationError("adjacency diagonal must be zero")
        if feats.ndim != 3 or feats.shape[1] != n:
            raise ValidationError(f"features must be (T, {n}, F), got {feats.shape}")
        if feats.shape[0] < 2:
            raise ValidationError("features need at least two timesteps")
        if not np.isfinite(feats).all():
            raise ValidationError("features contain non-finite values")
        if len(set(ids)) != n:
            raise ValidationError("node_ids must be unique")
        object.__setattr__(self, "adjacency", _readonly(adj.astype(np.int8)))
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "node_ids", ids)
        object.__setattr__(self, "_index", {nid: i for i, nid in enumerate(ids)})

    @property
    def node_count(self) -> int:
        return len(self.node_ids)

    @property
    def timesteps(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[2]

    def index_of(self, node_id: str) -> int:
        try:
            return self._index[str(node_id)]
        except KeyError:
            raise ValidationError(f"unknown node_id {node_id!r}") from None

    def has_node(self, node_id: str) -> bool:
        return str(node_id) in self._index

    def edges(self) -> np.ndarray:
        """Directed edges as an ``(E, 2)`` index array in row-major order."""
        return np.argwhere(self.adjacency == 1)

    def digest(self) -> str:
        return sha256_hex(
            canonical_json(list(self.node_ids)).encode()
            + self.adjacency.tobytes()
            + self.features.astype("<f8").tobytes()
            + str(self.features.shape).encode()
        )

    def without(self, request: "DeletionRequest") -> "STGraph":
        """Copy of the graph with the request's nodes and edges removed."""
        request.validate(self)
        adj = self.adjacency.copy()
        for src, dst in request.edges:
            adj[self.index_of(src), self.index_of(dst)] = 0
        drop = {self.index_of(n) for n in request.nodes}
        keep = [i for i in range(self.node_count) if i not in drop]
        return STGraph(
            adjacency=adj[np.ix_(keep, keep)],
            features=self.features[:, keep, :],
            node_ids=tuple(self.node_ids[i] for i in keep),
        )

    def with_features(self, features: np.ndarray) -> "STGraph":
        return STGraph(adjacency=self.adjacency, features=features, node_ids=self.node_ids)


@dataclass(frozen=True)
class DeletionRequest:
    """Nodes (by id) and directed edges (id pairs) whose influence must be removed."""

    nodes: frozenset = frozenset()
    edges: frozenset = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", frozenset(str(n) for n in self.nodes))
        object.__setattr__(self, "edges", frozenset((str(a), str(b)) for a, b in self.edges))

    def is_empty(self) -> bool:
        return not self.nodes and not self.edges

    def validate(self, graph: STGraph) -> None:
        for n in sorted(self.nodes):
            graph.index_of(n)
        for a, b in sorted(self.edges):
            if graph.adjacency[graph.index_of(a), graph.index_of(b)] != 1:
                raise ValidationError(f"edge ({a!r}, {b!r}) does not exist")

    def digest(self) -> str:
        return sha256_hex(canonical_json({
            "nodes": sorted(self.nodes),
            "edges": sorted(list(e) for e in self.edges),
        }))

    def to_dict(self) -> dict:
        return {"nodes": sorted(self.nodes), "edges": sorted(list(e) for e in self.edges)}


@dataclass(frozen=True)
class ForecastTask:
    """``horizon`` output steps, correlation ``window`` and model ``lookback``."""

    horizon: int = 3
    window: int = 32
    lookback: int = 12

    def check(self, graph: STGraph) -> None:
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if not 1 <= self.window <= graph.timesteps - 1:
            raise ValidationError(f"window must lie in [1, {graph.timesteps - 1}]")
        if self.lookback < 1:
            raise ValidationError("lookback must be >= 1")


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    rmse: float
    r2: Optional[float]
    trend_f1: float
    wall_clock_seconds: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        out = {"mae": self.mae, "mse": self.mse, "rmse": self.rmse,
               "r2": self.r2, "trend_f1": self.trend_f1}
        if timings:
            out["wall_clock_seconds"] = dict(self.wall_clock_seconds)
        return out


# --------------------------------------------------------------------- CSV I/O


def ingest_csv(feature_path, edge_path, undirected: bool = False) -> STGraph:
    """Load long-format features and an edge list into an :class:`STGraph`.

    Nodes are indexed in order of first appearance in the feature file.
    With ``undirected=True`` every edge is mirrored.
    """
    rows: dict[str, dict[int, list[float]]] = {}
    order: list[str] = []
    n_feat = None
    with open(feature_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 3 or header[0] != "node_id" or header[1] != "timestep":
            raise ValidationError("feature file header must be node_id,timestep,f_0[,...]")
        n_feat = len(header) - 2
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != n_feat + 2:
                raise ValidationError(f"{feature_path}:{lineno}: expected {n_feat + 2} columns")
            nid = rec[0]
            try:
                t = int(rec[1])
                vals = [float(x) for x in rec[2:]]
            except ValueError:
                raise ValidationError(
                    f"{feature_path}:{lineno}: non-numeric value in row for node {nid!r}"
                ) from None
            if not all(math.isfinite(v) for v in vals):
                raise ValidationError(f"{feature_path}:{lineno}: non-finite feature")
            if nid not in rows:
                rows[nid] = {}
                order.append(nid)
            if t in rows[nid]:
                raise ValidationError(f"duplicate timestep {t} for node {nid!r}")
            rows[nid][t] = vals
    if not order:
        raise ValidationError("feature file has no rows")
    n_steps = max(len(r) for r in rows.values())
    for nid in order:
        if set(rows[nid]) != set(range(n_steps)):
            raise ValidationError(f"node {nid!r} is missing timesteps (expected 0..{n_steps - 1})")
    feats = np.empty((n_steps, len(order), n_feat))
    for j, nid in enumerate(order):
        series = rows[nid]
        for t in range(n_steps):
            feats[t, j, :] = series[t]

    index = {nid: i for i, nid in enumerate(order)}
    adj = np.zeros((len(order), len(order)), dtype=np.int8)
    with open(edge_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["src_id", "dst_id"]:
            raise ValidationError("edge file header must be src_id,dst_id")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            src, dst = rec[0], rec[1]
            for nid in (src, dst):
                if nid not in index:
                    raise ValidationError(f"{edge_path}:{lineno}: edge references unknown node {nid!r}")
            if src == dst:
                raise ValidationError(f"{edge_path}:{lineno}: self-loop on {src!r}")
            adj[index[src], index[dst]] = 1
            if undirected:
                adj[index[dst], index[src]] = 1
    return STGraph(adjacency=adj, features=feats, node_ids=tuple(order))


def export_csv(graph: STGraph, feature_path, edge_path) -> None:
    """Write the graph in the same long format :func:`ingest_csv` reads."""
    with open(feature_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "timestep"] + [f"f_{k}" for k in range(graph.feature_dim)])
        for j, nid in enumerate(graph.node_ids):
            for t in range(graph.timesteps):
                w.writerow([nid, t] + [repr(float(x)) for x in graph.features[t, j]])
    with open(edge_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["src_id", "dst_id"])
        for u, v in graph.edges():
            w.writerow([graph.node_ids[u], graph.node_ids[v]])


def read_deletion_request(path) -> DeletionRequest:
    """One node id per line; ``edge,src,dst`` lines name directed edges."""
    nodes, edges = set(), set()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if parts[0] == "edge":
            if len(parts) != 3:
                raise ValidationError(f"malformed edge line: {raw!r}")
            edges.add((parts[1], parts[2]))
        else:
            nodes.add(parts[0])
    return DeletionRequest(nodes=frozenset(nodes), edges=frozenset(edges))


def write_deletion_request(request: DeletionRequest, path) -> None:
    lines = sorted(request.nodes) + [f"edge,{a},{b}" for a, b in sorted(request.edges)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_npz(graph: STGraph, path) -> None:
    np.savez(path, adjacency=graph.adjacency, features=graph.features,
             node_ids=np.array(graph.node_ids, dtype=str))


def load_npz(path) -> STGraph:
    with np.load(path) as data:
        return STGraph(adjacency=data["adjacency"], features=data["features"],
                       node_ids=tuple(str(x) for x in data["node_ids"]))


# ------------------------------------------------------------------ synthetic


def _connected_geometric_edges(n: int, rng: np.random.Generator, k: int = 3) -> np.ndarray:
    pts = rng.random((n, 2))
    dist = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    adj = np.zeros((n, n), dtype=np.int8)
    order = np.argsort(dist, axis=1, kind="stable")
    for i in range(n):
        for j in order[i, 1:k + 1]:
            adj[i, j] = adj[j, i] = 1
    # spanning tree guarantees connectivity regardless of the kNN layout
    mst = minimum_spanning_tree(dist).toarray()
    for i, j in np.argwhere(mst > 0):
        adj[i, j] = adj[j, i] = 1
    np.fill_diagonal(adj, 0)
    return adj


def generate_synthetic(
    n: int,
    t: int,
    seed: int,
    diffusion_rate: float,
    *,
    persistence: float = 0.95,
    noise: float = 1.0,
    holdout: int = 12,
) -> tuple[STGraph, np.ndarray]:
    """Diffusion process on a random connected geometric graph.

    ``x[t+1, v] = persistence * ((1 - r) x[t, v] + r * mean_nbr x[t, u]) + noise``.
    Returns the graph over ``t`` steps and the next ``holdout`` steps as
    held-out targets of shape ``(holdout, n)``.
    """
    if n < 4 or t < 64:
        raise ValidationError("generate_synthetic needs n >= 4 and t >= 64")
    if not 0.0 <= diffusion_rate < 1.0:
        raise ValidationError("diffusion_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    adj = _connected_geometric_edges(n, rng)
    deg = adj.sum(axis=1, keepdims=True).astype(float)
    mix = adj / deg
    total = t + holdout
    x = np.empty((total, n))
    x[0] = rng.normal(0.0, 1.0, n)
    eps = rng.normal(0.0, noise, (total, n))
    for s in range(total - 1):
        x[s + 1] = persistence * ((1 - diffusion_rate) * x[s] + diffusion_rate * (mix @ x[s])) + eps[s + 1]
    ids = tuple(f"n{i}" for i in range(n))
    graph = STGraph(adjacency=adj, features=x[:t, :, None], node_ids=ids)
    return graph, x[t:].copy()


# -------------------------------------------------------------------- metrics


def compute_metrics(predictions, targets, wall_clock: Optional[dict] = None) -> MetricsReport:
    """MAE, MSE, RMSE, R^2 and trend F1 (rows are consecutive timesteps)."""
    yhat = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValidationError(f"shape mismatch {yhat.shape} vs {y.shape}")
    if y.ndim == 1:
        y, yhat = y[:, None], yhat[:, None]
    y2 = y.reshape(y.shape[0], -1)
    p2 = yhat.reshape(yhat.shape[0], -1)
    err = p2 - y2
    mae = float(np.mean(np.abs(err)))
    mse = float(np.mean(err ** 2))
    ss_res = float(np.sum(err ** 2))
    ss_tot = float(np.sum((y2 - y2.mean()) ** 2))
    r2 = None if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return MetricsReport(mae=mae, mse=mse, rmse=math.sqrt(mse), r2=r2,
                         trend_f1=trend_f1(p2, y2), wall_clock_seconds=dict(wall_clock or {}))


def trend_f1(predictions: np.ndarray, targets: np.ndarray) -> float:
    """F1 of "increase at t+1" over consecutive rows; ties count as non-increase."""
    if predictions.shape[0] < 2:
        raise ValidationError("trend_f1 needs at least two rows")
    up_pred = np.diff(predictions, axis=0) > 0
    up_true = np.diff(targets, axis=0) > 0
    tp = int(np.sum(up_pred & up_true))
    fp = int(np.sum(up_pred & ~up_true))
    fn = int(np.sum(~up_pred & up_true))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


# -------------------------------------------------------------------- windows


def split_bounds(timesteps: int, train: float = 0.7, val: float = 0.15) -> tuple[int, int]:
    """Temporal 70/15/15 split; returns the end of train and of validation."""
    t_train = int(round(timesteps * train))
    t_val = int(round(timesteps * (train + val)))
    return t_train, t_val


def window_starts(t_begin: int, t_end: int, lookback: int, horizon: int) -> np.ndarray:
    """Anchor steps ``a`` whose history ``[a-lookback+1, a]`` and targets
    ``[a+1, a+horizon]`` lie inside ``[t_begin, t_end)``."""
    first = t_begin + lookback - 1
    last = t_end - horizon - 1
    if last < first:
        return np.zeros(0, dtype=np.int64)
    return np.arange(first, last + 1, dtype=np.int64)


def make_windows(series: np.ndarray, anchors: Sequence[int], lookback: int, horizon: int):
    """Histories ``(B, lookback, n, F)`` and targets ``(B, n, horizon)`` of feature 0."""
    anchors = np.asarray(anchors, dtype=np.int64)
    hist_idx = anchors[:, None] + np.arange(-lookback + 1, 1)[None, :]
    tgt_idx = anchors[:, None] + np.arange(1, horizon + 1)[None, :]
    hist = series[hist_idx]                       # (B, L, n, F)
    tgt = np.transpose(series[tgt_idx, :, 0], (0, 2, 1))   # (B, n, P)
    return hist, tgt

