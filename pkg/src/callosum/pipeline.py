"""End-to-end training and inference for the divide-and-conquer ensemble."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .esc import Partition, build_partition, correlation_map
from .ggb import MetaGraph, build_meta_graph, key_nodes_for
from .ledger import DataAccess, Ledger
from .neural import global_layer as gl
from .neural.train import (GlobalLayer, SubModel, TrainConfig, global_forward,
                           init_global_layer, train_global, train_submodel)
from .serialize import derive_seed
from .stgraph import (ForecastTask, MetricsReport, STGraph, compute_metrics, make_windows,
                      split_bounds, window_starts)


@dataclass(frozen=True)
class PipelineConfig:
    task: ForecastTask = field(default_factory=ForecastTask)
    m: Optional[int] = 4
    candidates: tuple = (2, 4, 8)
    gamma: float = 1.0
    k_ring: int = 2
    budget_c: float = 8.0
    ganglion_count: Optional[int] = None
    heads: int = 2
    layers: int = 2
    ganglion_width: int = 16
    lambda1: float = 0.01
    lambda2: float = 0.001
    lambda_reg: float = 1e-4
    alpha_init: float = 0.5
    base_hidden: int = 16
    damping: float = 0.85
    sub_train: TrainConfig = field(default_factory=TrainConfig)
    global_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, stop_loss=0.01))
    unlearn_global_epochs: int = 3
    train_fraction: float = 0.7
    val_fraction: float = 0.15

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidates"] = list(self.candidates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        if "task" in d:
            d["task"] = ForecastTask(**d["task"])
        for k in ("sub_train", "global_train"):
            if k in d:
                d[k] = TrainConfig(**d[k])
        if "candidates" in d:
            d["candidates"] = tuple(d["candidates"])
        return cls(**d)

    def unlearn_global_config(self) -> TrainConfig:
        g = self.global_train
        return replace(g, epochs=min(g.epochs, self.unlearn_global_epochs),
                       stop_loss=max(g.stop_loss, 0.01))


@dataclass(frozen=True, eq=False)
class TrainedEnsemble:
    partition: Partition
    sub_models: tuple           # aligned with partition.subgraphs
    meta: MetaGraph
    global_layer: GlobalLayer
    pipeline_seed: int
    config: PipelineConfig
    ledger: Ledger
    t_train: int
    seed_tags: dict             # sid -> digest of the request that last retrained it ("" = initial)
    global_tag: str = ""
    parent: Optional["TrainedEnsemble"] = None
    requests: tuple = ()        # request dicts applied so far, oldest first
    timings: dict = field(default_factory=dict)

    def sub_model(self, sid: int) -> SubModel:
        for m in self.sub_models:
            if m.sid == sid:
                return m
        raise KeyError(sid)

    def fingerprint(self) -> dict:
        return {
            "partition": self.partition.digest(),
            "meta": self.meta.digest(),
            "sub_models": {str(m.sid): m.digest() for m in self.sub_models},
            "global_layer": self.global_layer.digest(),
        }


def sub_seed(pipeline_seed: int, sid: int, tag: str) -> int:
    return derive_seed(pipeline_seed, "sub", sid, tag)


def global_seed(pipeline_seed: int, tag: str) -> int:
    return derive_seed(pipeline_seed, "global", tag)


def hidden_width(size: int, nominal: float, base: int) -> int:
    return base * max(1, math.ceil(size / nominal - 1e-12))


def train_graph_slice(access: DataAccess, t_train: int, stage: str = "esc") -> STGraph:
    g = access.graph
    feats = access.features(g.node_ids, stage, 0, t_train)
    return STGraph(adjacency=g.adjacency, features=feats, node_ids=g.node_ids)


def fit_sub_models(partition: Partition, access: DataAccess, cfg: PipelineConfig, seed: int,
                   seed_tags: dict, t_train: int, only: Optional[set] = None,
                   reuse: Optional[dict] = None, times: Optional[dict] = None) -> tuple:
    """Train (or reuse) one frozen model per subgraph, in partition order.

    ``times`` (if given) collects per-sub-model wall clock keyed by sid.
    """
    models = []
    for sg in partition.subgraphs:
        if only is not None and sg.sid not in only:
            models.append(reuse[sg.sid])
            continue
        t0 = time.perf_counter()
        models.append(train_submodel(
            sg, access.graph, cfg.task, cfg.sub_train,
            partition_ids=partition.node_ids, seed=sub_seed(seed, sg.sid, seed_tags.get(sg.sid, "")),
            hidden=hidden_width(sg.size, partition.nominal_size, cfg.base_hidden),
            lam_reg=cfg.lambda_reg, t_end=t_train, access=access))
        if times is not None:
            times[str(sg.sid)] = time.perf_counter() - t0
    return tuple(models)


def build_meta(partition: Partition, cfg: PipelineConfig) -> MetaGraph:
    keys = key_nodes_for(partition, cfg.damping)
    return build_meta_graph(partition, keys, partition.cut_edges,
                            ganglion_count=cfg.ganglion_count or partition.m,
                            budget_c=cfg.budget_c)


def structure_for(partition: Partition, meta: MetaGraph) -> gl.MetaStructure:
    return gl.meta_structure(meta, [list(sg.nodes) for sg in partition.subgraphs])


def sub_outputs(models: Sequence[SubModel], access: DataAccess, anchors: np.ndarray,
                lookback: int, horizon: int, stage: str):
    """Embeddings, normalised forecasts and normalised targets per subgraph."""
    embs, preds, tgts = [], [], []
    for m in models:
        series = access.features(m.node_ids, stage)
        hist, tgt = make_windows(series, anchors, lookback, horizon)
        h, y = m.run(hist)
        embs.append(h)
        preds.append(y)
        tgts.append((tgt - m.mean[0]) / m.std[0])
    return embs, preds, tgts


def fit_global(partition: Partition, models: Sequence[SubModel], meta: MetaGraph,
               access: DataAccess, cfg: PipelineConfig, seed: int, t_train: int,
               train_cfg: TrainConfig) -> GlobalLayer:
    struct = structure_for(partition, meta)
    anchors = window_starts(0, t_train, cfg.task.lookback, cfg.task.horizon)
    embs, preds, tgts = sub_outputs(models, access, anchors, cfg.task.lookback,
                                    cfg.task.horizon, "stage2")
    layer = init_global_layer(
        struct, meta.weights, [m.hidden for m in models], seed=seed, horizon=cfg.task.horizon,
        ganglion_width=cfg.ganglion_width, heads=cfg.heads, layers=cfg.layers,
        lambda1=cfg.lambda1, lambda2=cfg.lambda2, alpha=cfg.alpha_init)
    return train_global(layer, struct, embs, preds, tgts, train_cfg, sub_models=models)


def train_callosum(graph: STGraph, cfg: PipelineConfig = PipelineConfig(), seed: int = 0,
                   ledger: Optional[Ledger] = None) -> TrainedEnsemble:
    """Partition, train frozen sub-models, build the meta-graph, train the global layer."""
    cfg.task.check(graph)
    access = DataAccess(graph, ledger if ledger is not None else Ledger())
    t_train, _ = split_bounds(graph.timesteps, cfg.train_fraction, cfg.val_fraction)
    timings = {}
    t0 = time.perf_counter()
    train_view = train_graph_slice(access, t_train)
    if cfg.task.window > t_train - 1:
        raise ValidationError("correlation window exceeds the training split")
    corr = correlation_map(train_view, cfg.task.window)
    m = cfg.m if cfg.m is None else min(cfg.m, graph.node_count)
    partition = build_partition(train_view, corr, m=m, gamma=cfg.gamma, k_ring=cfg.k_ring,
                                candidates=cfg.candidates)
    timings["esc"] = time.perf_counter() - t0
    tags = {sg.sid: "" for sg in partition.subgraphs}
    t0 = time.perf_counter()
    per_model = {}
    models = fit_sub_models(partition, access, cfg, seed, tags, t_train, times=per_model)
    timings["stage1"] = time.perf_counter() - t0
    timings["stage1_per_model"] = per_model
    t0 = time.perf_counter()
    meta = build_meta(partition, cfg)
    layer = fit_global(partition, models, meta, access, cfg, global_seed(seed, ""), t_train,
                       cfg.global_train)
    timings["stage2"] = time.perf_counter() - t0
    return TrainedEnsemble(partition=partition, sub_models=models, meta=meta,
                           global_layer=layer, pipeline_seed=seed, config=cfg,
                           ledger=access.ledger, t_train=t_train, seed_tags=tags,
                           timings=timings)


# ------------------------------------------------------------------ inference


def holdout_anchors(timesteps: int, cfg: PipelineConfig) -> np.ndarray:
    _, t_val = split_bounds(timesteps, cfg.train_fraction, cfg.val_fraction)
    return window_starts(max(t_val - cfg.task.lookback, 0), timesteps, cfg.task.lookback,
                         cfg.task.horizon)


def predict(ens: TrainedEnsemble, graph: STGraph, anchors: Optional[np.ndarray] = None,
            access: Optional[DataAccess] = None, stage: str = "inference"):
    """Forecasts in original units: ``(node_ids, array (B, n_live, P))``."""
    cfg = ens.config
    if anchors is None:
        anchors = holdout_anchors(graph.timesteps, cfg)
    access = access if access is not None else DataAccess(graph)
    struct = structure_for(ens.partition, ens.meta)
    embs, preds, _ = sub_outputs(ens.sub_models, access, anchors, cfg.task.lookback,
                                 cfg.task.horizon, stage)
    corrected = global_forward(ens.global_layer, struct, embs, preds)
    ids, out = [], []
    for m, y in zip(ens.sub_models, corrected):
        ids.extend(m.node_ids)
        out.append(m.denormalize(y))
    return ids, np.concatenate(out, axis=1)


def targets_for(graph: STGraph, node_ids: Sequence[str], anchors: np.ndarray,
                task: ForecastTask) -> np.ndarray:
    idx = [graph.index_of(n) for n in node_ids]
    _, tgt = make_windows(graph.features[:, idx, :], anchors, task.lookback, task.horizon)
    return tgt


def evaluate_predictions(graph: STGraph, node_ids, preds: np.ndarray, anchors, task,
                         wall_clock: Optional[dict] = None) -> MetricsReport:
    tgt = targets_for(graph, node_ids, anchors, task)
    b = preds.shape[0]
    return compute_metrics(preds.reshape(b, -1), tgt.reshape(b, -1), wall_clock)


def evaluate(ens: TrainedEnsemble, graph: STGraph, node_ids: Optional[Sequence[str]] = None) -> MetricsReport:
    anchors = holdout_anchors(graph.timesteps, ens.config)
    ids, preds = predict(ens, graph, anchors)
    if node_ids is not None:
        keep = [ids.index(n) for n in node_ids]
        ids, preds = [ids[i] for i in keep], preds[:, keep]
    return evaluate_predictions(graph, ids, preds, anchors, ens.config.task, ens.timings)


# -------------------------------------------------------------- persistence


def save_ensemble(ens: TrainedEnsemble, path, with_parent: bool = True) -> None:
    root = Path(path)
    (root / "submodels").mkdir(parents=True, exist_ok=True)
    (root / "partition.json").write_text(ens.partition.to_json())
    (root / "meta.json").write_text(ens.meta.to_json())
    (root / "global.json").write_text(ens.global_layer.checkpoint())
    for m in ens.sub_models:
        (root / "submodels" / f"sub_{m.sid}.json").write_text(m.checkpoint())
    ens.ledger.save(root / "ledger.jsonl")
    state = {
        "pipeline_seed": ens.pipeline_seed, "config": ens.config.to_dict(),
        "t_train": ens.t_train, "seed_tags": {str(k): v for k, v in ens.seed_tags.items()},
        "global_tag": ens.global_tag, "requests": list(ens.requests),
        "order": [m.sid for m in ens.sub_models], "timings": ens.timings,
    }
    (root / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True))
    if with_parent and ens.parent is not None:
        save_ensemble(ens.parent, root / "parent", with_parent=False)


def load_ensemble(path) -> TrainedEnsemble:
    root = Path(path)
    state = json.loads((root / "state.json").read_text())
    partition = Partition.from_dict(json.loads((root / "partition.json").read_text()))
    meta = MetaGraph.from_dict(json.loads((root / "meta.json").read_text()))
    layer = GlobalLayer.from_dict(json.loads((root / "global.json").read_text()))
    models = tuple(SubModel.from_dict(json.loads((root / "submodels" / f"sub_{sid}.json").read_text()))
                   for sid in state["order"])
    parent = load_ensemble(root / "parent") if (root / "parent" / "state.json").exists() else None
    return TrainedEnsemble(
        partition=partition, sub_models=models, meta=meta, global_layer=layer,
        pipeline_seed=state["pipeline_seed"], config=PipelineConfig.from_dict(state["config"]),
        ledger=Ledger.load(root / "ledger.jsonl"), t_train=state["t_train"],
        seed_tags={int(k): v for k, v in state["seed_tags"].items()},
        global_tag=state["global_tag"], parent=parent, requests=tuple(state["requests"]),
        timings=state.get("timings", {}))
