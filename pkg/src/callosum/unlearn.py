"""Exact unlearning: locate, purge, rebuild, retrain, and certify."""

from __future__ import annotations

import platform
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import CertificateError, ValidationError
from .esc import Partition, Subgraph, build_subgraph
from .ledger import DataAccess, Ledger
from .pipeline import (TrainedEnsemble, build_meta, fit_global, fit_sub_models, global_seed,
                       predict, holdout_anchors)
from .serialize import canonical_json, sha256_hex
from .stgraph import DeletionRequest, STGraph

MIN_SUBGRAPH = 3
PROBE_SCALE = 1e6


def _request_indices(request: DeletionRequest, partition: Partition):
    """Validate ``request`` against live structure; return node and edge indices."""
    index = {n: i for i, n in enumerate(partition.node_ids)}
    live = set(partition.backbone)
    nodes = set()
    for n in request.nodes:
        if n not in index or index[n] not in live:
            raise ValidationError(f"deletion request names unknown node {n!r}")
        nodes.add(index[n])
    edges = set()
    for u, v in request.edges:
        if u not in index or v not in index:
            raise ValidationError(f"deletion request names unknown edge ({u!r}, {v!r})")
        a, b = index[u], index[v]
        if partition.adjacency[a, b] != 1:
            raise ValidationError(f"edge ({u!r}, {v!r}) does not exist")
        edges.add((a, b))
    return nodes, edges


def locate(request: DeletionRequest, partition: Partition) -> set:
    """Positions of subgraphs whose data or structure the request touches.

    A deleted node marks its own subgraph and the subgraph of every live
    neighbour (its cut edges disappear); a deleted edge marks both endpoints.
    """
    nodes, edges = _request_indices(request, partition)
    assign = partition.assignment_array()
    adj = partition.adjacency
    out = set()
    for u in nodes:
        out.add(int(assign[u]))
        for v in np.flatnonzero(adj[u] | adj[:, u]):
            if assign[v] >= 0:
                out.add(int(assign[v]))
    for a, b in edges:
        out.add(int(assign[a]))
        out.add(int(assign[b]))
    return out


def purge_structure(partition: Partition, nodes: set, edges: set) -> Partition:
    """Drop nodes and edges from the live structure; subgraphs are left untouched."""
    adj = partition.adjacency.copy()
    rho = partition.rho.copy()
    for a, b in edges:
        adj[a, b] = 0
        rho[a, b] = 0.0
    idx = sorted(nodes)
    adj[idx, :] = 0
    adj[:, idx] = 0
    rho[idx, :] = 0.0
    rho[:, idx] = 0.0
    adj.setflags(write=False)
    rho.setflags(write=False)
    return replace(partition, adjacency=adj, rho=rho,
                   backbone=tuple(n for n in partition.backbone if n not in nodes),
                   removed=partition.removed | frozenset(nodes))


def purge_and_rebuild(sub: Subgraph, deleted: set, adjacency: np.ndarray,
                      backbone, k: int) -> Subgraph:
    """Rebuild ``sub`` from purged live structure, never from its old repair."""
    nodes = [n for n in sub.nodes if n not in deleted]
    return build_subgraph(sub.sid, nodes, adjacency, backbone, k)


def merge_small(partition: Partition, min_size: int = MIN_SUBGRAPH):
    """Fold subgraphs smaller than ``min_size`` into a backbone neighbour.

    Empty subgraphs are dropped. A small one joins whichever adjacent
    subgraph shares the larger summed |rho| over cut edges with it (ties go
    to the earlier one); the result keeps the neighbour's id and is rebuilt.
    Returns the new partition and the ids of subgraphs that absorbed nodes.
    """
    subs = [sg for sg in partition.subgraphs if sg.size > 0]
    merged = set()
    adj, rho = partition.adjacency, partition.rho
    while len(subs) > 1:
        small = next((i for i, sg in enumerate(subs) if sg.size < min_size), None)
        if small is None:
            break
        mine = list(subs[small].nodes)
        best, best_score = None, -np.inf
        for j in (small - 1, small + 1):
            if 0 <= j < len(subs):
                other = list(subs[j].nodes)
                blk = np.ix_(mine, other)
                blk_t = np.ix_(other, mine)
                score = float(np.sum(np.abs(rho[blk]) * adj[blk])
                              + np.sum(np.abs(rho[blk_t]) * adj[blk_t]))
                if score > best_score:
                    best, best_score = j, score
        target = subs[best]
        nodes = (list(target.nodes) + mine) if best < small else (mine + list(target.nodes))
        rebuilt = build_subgraph(target.sid, nodes, adj, partition.backbone, partition.k_ring)
        merged.add(target.sid)
        subs[best] = rebuilt
        del subs[small]
    return replace(partition, subgraphs=tuple(subs)), merged


def plan_unlearn(partition: Partition, request: DeletionRequest, rebuild_all: bool = False):
    """Purged partition plus the ids of subgraphs that must be retrained."""
    nodes, edges = _request_indices(request, partition)
    live = len(partition.backbone) - len(nodes)
    if live < MIN_SUBGRAPH:
        raise ValidationError(f"deletion would leave {live} nodes; at least {MIN_SUBGRAPH} are required")
    positions = locate(request, partition)
    affected = {partition.subgraphs[p].sid for p in positions}
    purged = purge_structure(partition, nodes, edges)
    subs = []
    for sg in partition.subgraphs:
        if rebuild_all or sg.sid in affected:
            subs.append(purge_and_rebuild(sg, nodes, purged.adjacency, purged.backbone,
                                          partition.k_ring))
        else:
            subs.append(sg)
    purged, merged = merge_small(replace(purged, subgraphs=tuple(subs)))
    alive = {sg.sid for sg in purged.subgraphs}
    return purged, (affected | merged) & alive


def toolchain() -> dict:
    return {"python": sys.version.split()[0], "numpy": np.__version__,
            "platform": platform.platform(), "machine": platform.machine()}


@dataclass
class UnlearnCertificate:
    request: DeletionRequest
    affected_subgraphs: tuple
    equivalence: Optional[bool] = None
    ledger_clean: Optional[bool] = None
    influence_null: Optional[bool] = None
    failures: tuple = ()
    timings: dict = field(default_factory=dict)
    toolchain: dict = field(default_factory=toolchain)
    model_digest: str = ""

    @property
    def valid(self) -> bool:
        return bool(self.equivalence and self.ledger_clean and self.influence_null)

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "request": self.request.to_dict(),
            "request_digest": self.request.digest(),
            "affected_subgraphs": list(self.affected_subgraphs),
            "equivalence": self.equivalence,
            "ledger_clean": self.ledger_clean,
            "influence_null": self.influence_null,
            "valid": self.valid,
            "failures": list(self.failures),
            "toolchain": self.toolchain,
            "model_digest": self.model_digest,
        }
        if timings:
            d["timings"] = self.timings
        return d

    def to_json(self, timings: bool = True) -> str:
        return canonical_json(self.to_dict(timings))

    @classmethod
    def from_dict(cls, d: dict) -> "UnlearnCertificate":
        req = d["request"]
        return cls(request=DeletionRequest(frozenset(req["nodes"]),
                                           frozenset(tuple(e) for e in req["edges"])),
                   affected_subgraphs=tuple(d["affected_subgraphs"]),
                   equivalence=d["equivalence"], ledger_clean=d["ledger_clean"],
                   influence_null=d["influence_null"], failures=tuple(d["failures"]),
                   timings=d.get("timings", {}), toolchain=d["toolchain"],
                   model_digest=d.get("model_digest", ""))


def ensemble_digest(ens: TrainedEnsemble) -> str:
    return sha256_hex(canonical_json(ens.fingerprint()))


def execute_unlearn(ens: TrainedEnsemble, graph: STGraph, request: DeletionRequest,
                    verify: bool = True):
    """Forget ``request``; returns ``(post_ensemble, certificate)``.

    Only subgraphs the request touches are rebuilt and retrained, with seeds
    tagged by the request digest; every other sub-model is carried over
    byte-for-byte. The global layer is retrained from a fresh seed.
    """
    if request.is_empty():
        cert = UnlearnCertificate(request, (), True, True, True, model_digest=ensemble_digest(ens))
        return ens, cert
    timings = {}
    t_all = time.perf_counter()
    tag = request.digest()
    t0 = time.perf_counter()
    purged, affected = plan_unlearn(ens.partition, request)
    timings["locate_rebuild"] = time.perf_counter() - t0

    ledger = ens.ledger.copy()
    ledger.record_purge(tag, request.nodes)
    access = DataAccess(graph.without(request), ledger)
    tags = {sg.sid: (tag if sg.sid in affected else ens.seed_tags.get(sg.sid, ""))
            for sg in purged.subgraphs}
    old = {m.sid: m for m in ens.sub_models}
    t0 = time.perf_counter()
    models = fit_sub_models(purged, access, ens.config, ens.pipeline_seed, tags, ens.t_train,
                            only=affected, reuse=old)
    timings["stage1"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    meta = build_meta(purged, ens.config)
    layer = fit_global(purged, models, meta, access, ens.config,
                       global_seed(ens.pipeline_seed, tag), ens.t_train,
                       ens.config.unlearn_global_config())
    timings["stage2"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - t_all
    parent = replace(ens, parent=None)
    post = TrainedEnsemble(partition=purged, sub_models=models, meta=meta, global_layer=layer,
                           pipeline_seed=ens.pipeline_seed, config=ens.config, ledger=ledger,
                           t_train=ens.t_train, seed_tags=tags, global_tag=tag, parent=parent,
                           requests=ens.requests + (request.to_dict(),), timings=timings)
    if verify:
        cert = certify(post, request, graph)
        cert.timings = {**timings, **{f"certify_{k}": v for k, v in cert.timings.items()}}
    else:
        cert = UnlearnCertificate(request, tuple(sorted(affected)), timings=timings,
                                  failures=("not verified",), model_digest=ensemble_digest(post))
    return post, cert


def retrain_reference(prior: TrainedEnsemble, graph: STGraph, request: DeletionRequest) -> TrainedEnsemble:
    """Independent exact-retrain reference on ``graph`` with the request removed.

    Reads only the purged graph, rebuilds every subgraph from scratch and
    trains every sub-model from its seed; nothing is carried over from the
    prior ensemble except its structural choices (backbone order, subgraph
    membership, seeds).
    """
    tag = request.digest()
    purged_graph = graph.without(request)
    access = DataAccess(purged_graph, Ledger())
    partition, affected = plan_unlearn(prior.partition, request, rebuild_all=True)
    tags = {sg.sid: (tag if sg.sid in affected else prior.seed_tags.get(sg.sid, ""))
            for sg in partition.subgraphs}
    models = fit_sub_models(partition, access, prior.config, prior.pipeline_seed, tags, prior.t_train)
    meta = build_meta(partition, prior.config)
    layer = fit_global(partition, models, meta, access, prior.config,
                       global_seed(prior.pipeline_seed, tag), prior.t_train,
                       prior.config.unlearn_global_config())
    return TrainedEnsemble(partition=partition, sub_models=models, meta=meta, global_layer=layer,
                           pipeline_seed=prior.pipeline_seed, config=prior.config,
                           ledger=access.ledger, t_train=prior.t_train, seed_tags=tags,
                           global_tag=tag)


def probe_graph(graph: STGraph, request: DeletionRequest) -> STGraph:
    """Same graph with the deleted nodes' features replaced by extreme values."""
    feats = graph.features.copy()
    idx = [graph.index_of(n) for n in sorted(request.nodes)]
    feats[:, idx, :] = feats[:, idx, :] * PROBE_SCALE + PROBE_SCALE
    return graph.with_features(feats)


def certify(post: TrainedEnsemble, request: DeletionRequest, graph: STGraph) -> UnlearnCertificate:
    """Check an unlearned ensemble against an exact retrain, its ledger, and a probe."""
    prior = post.parent
    if prior is None:
        raise CertificateError("ensemble has no pre-unlearning parent to certify against")
    if not post.requests or post.requests[-1] != request.to_dict():
        raise CertificateError("request does not match the ensemble's last unlearning step")
    timings, failures = {}, []
    tag = request.digest()
    affected = tuple(sorted(s for s, t in post.seed_tags.items() if t == tag))

    t0 = time.perf_counter()
    ref = retrain_reference(prior, graph, request)
    mine, theirs = post.fingerprint(), ref.fingerprint()
    equivalence = mine == theirs
    if not equivalence:
        for key in ("partition", "meta", "global_layer"):
            if mine[key] != theirs[key]:
                failures.append(f"equivalence: {key} differs from exact retrain")
        for sid in sorted(set(mine["sub_models"]) | set(theirs["sub_models"])):
            if mine["sub_models"].get(sid) != theirs["sub_models"].get(sid):
                failures.append(f"equivalence: sub-model {sid} differs from exact retrain")
    timings["equivalence"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    dirty = post.ledger.reads_after_purge(tag, request.nodes)
    chain_ok = post.ledger.verify_chain()
    marked = post.ledger.has_purge(tag)
    ledger_clean = chain_ok and marked and not dirty
    if not chain_ok:
        failures.append("ledger: hash chain broken")
    if not marked:
        failures.append("ledger: no purge marker for this request")
    for e in dirty:
        failures.append(f"ledger: entry {e.seq} ({e.stage}) reads deleted nodes")
    timings["ledger"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    influence_null = True
    if request.nodes:
        probe = probe_graph(graph, request)
        probe_post, _ = execute_unlearn(prior, probe, request, verify=False)
        anchors = holdout_anchors(graph.timesteps, post.config)
        ids_a, pa = predict(post, graph.without(request), anchors)
        ids_b, pb = predict(probe_post, probe.without(request), anchors)
        influence_null = ids_a == ids_b and pa.tobytes() == pb.tobytes()
        if not influence_null:
            failures.append("influence: predictions moved when deleted features changed")
    timings["influence"] = time.perf_counter() - t0
    return UnlearnCertificate(request, affected, equivalence, ledger_clean, influence_null,
                              tuple(failures), timings, model_digest=ensemble_digest(post))
