"""Experiment harness: baselines, bound reports, timing reports, and tables."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError
from .esc import info_retention
from .ledger import DataAccess, Ledger
from .neural.train import SubModel, TrainConfig, fit_submodel
from .pipeline import (PipelineConfig, TrainedEnsemble, evaluate_predictions, hidden_width,
                       holdout_anchors, predict, train_callosum)
from .serialize import derive_seed
from .stgraph import (DeletionRequest, ForecastTask, STGraph, generate_synthetic, ingest_csv,
                      make_windows, split_bounds)
from .unlearn import certify, execute_unlearn

METHODS = ("callosum", "scratch", "sisa")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {
        "synthetic": {"n": 40, "t": 2000, "seed": 0, "diffusion_rate": 0.3}})
    methods: tuple = METHODS
    m: Optional[int] = 4
    gamma: float = 1.0
    k_ring: int = 2
    budget_c: float = 8.0
    heads: int = 2
    layers: int = 2
    ganglion_width: int = 16
    lambda1: float = 0.01
    lambda2: float = 0.001
    lambda_reg: float = 1e-4
    alpha_init: float = 0.5
    base_hidden: int = 16
    unlearn_rate: float = 0.1
    seeds: tuple = (0, 1, 2, 3, 4)
    task: ForecastTask = field(default_factory=ForecastTask)
    sub_train: TrainConfig = field(default_factory=TrainConfig)
    global_train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, stop_loss=0.01))
    unlearn_global_epochs: int = 3
    certify: bool = True

    def __post_init__(self):
        methods = (self.methods,) if isinstance(self.methods, str) else tuple(self.methods)
        object.__setattr__(self, "methods", methods)
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        bad = [m for m in methods if m not in METHODS]
        if bad or not methods:
            raise ValidationError(f"unknown method {bad[0] if bad else None!r}; expected one of {METHODS}")
        if not self.seeds:
            raise ValidationError("seeds must be non-empty")
        if not 0 <= self.unlearn_rate < 1:
            raise ValidationError("unlearn_rate must lie in [0, 1)")
        if set(self.dataset) - {"synthetic", "csv"} or len(self.dataset) != 1:
            raise ValidationError("dataset must be {'synthetic': {...}} or {'csv': {...}}")

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            task=self.task, m=self.m, gamma=self.gamma, k_ring=self.k_ring,
            budget_c=self.budget_c, heads=self.heads, layers=self.layers,
            ganglion_width=self.ganglion_width, lambda1=self.lambda1, lambda2=self.lambda2,
            lambda_reg=self.lambda_reg, alpha_init=self.alpha_init,
            base_hidden=self.base_hidden, sub_train=self.sub_train,
            global_train=self.global_train, unlearn_global_epochs=self.unlearn_global_epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown config keys: {sorted(extra)}")
        d = dict(d)
        if "task" in d:
            d["task"] = ForecastTask(**d["task"])
        for k in ("sub_train", "global_train"):
            if k in d:
                d[k] = TrainConfig(**d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(doc)
        except TypeError as exc:
            raise ValidationError(str(exc)) from exc


def load_dataset(spec: dict) -> STGraph:
    if "synthetic" in spec:
        s = dict(spec["synthetic"])
        graph, _ = generate_synthetic(int(s.get("n", 40)), int(s.get("t", 2000)),
                                      int(s.get("seed", 0)), float(s.get("diffusion_rate", 0.3)))
        return graph
    c = spec["csv"]
    return ingest_csv(c["features"], c["edges"], undirected=bool(c.get("undirected", False)))


def sample_deletion(graph: STGraph, rate: float, seed: int) -> DeletionRequest:
    """Uniformly random ``round(rate * N)`` nodes (at least one when rate > 0)."""
    if rate <= 0:
        return DeletionRequest()
    k = max(1, int(round(rate * graph.node_count)))
    if graph.node_count - k < 3:
        raise ValidationError("deletion would leave fewer than 3 nodes")
    rng = np.random.default_rng(derive_seed(seed, "deletion", rate))
    pick = rng.choice(graph.node_count, size=k, replace=False)
    return DeletionRequest(frozenset(graph.node_ids[i] for i in sorted(pick)))


# ------------------------------------------------------------------ baselines


@dataclass(frozen=True)
class ScratchModel:
    """Single encoder over the whole graph (the gold model when trained on purged data)."""

    model: SubModel
    seconds: float

    def predict(self, graph: STGraph, anchors, task: ForecastTask):
        access = DataAccess(graph)
        series = access.features(self.model.node_ids, "inference")
        hist, _ = make_windows(series, anchors, task.lookback, task.horizon)
        return list(self.model.node_ids), self.model.denormalize(self.model.run(hist)[1])


def train_scratch(graph: STGraph, cfg: PipelineConfig, seed: int, ledger: Optional[Ledger] = None,
                  nominal: Optional[float] = None) -> ScratchModel:
    """Width follows the sub-model rule applied to the whole graph, matching ensemble capacity."""
    t0 = time.perf_counter()
    access = DataAccess(graph, ledger)
    t_train, _ = split_bounds(graph.timesteps, cfg.train_fraction, cfg.val_fraction)
    data = access.features(graph.node_ids, "scratch", 0, t_train)
    m = cfg.m or 1
    nominal = nominal if nominal is not None else graph.node_count / m
    model = fit_submodel(0, list(graph.node_ids), np.asarray(graph.adjacency), 0, data, cfg.task,
                         cfg.sub_train, derive_seed(seed, "scratch"),
                         hidden_width(graph.node_count, nominal, cfg.base_hidden), cfg.lambda_reg)
    return ScratchModel(model, time.perf_counter() - t0)


@dataclass(frozen=True)
class SisaModel:
    """Random node shards, one isolated model each; forecasts are shard averages."""

    shards: tuple          # tuple of tuples of node ids
    models: tuple
    seconds: float

    def predict(self, graph: STGraph, anchors, task: ForecastTask):
        access = DataAccess(graph)
        ids = [n for shard in self.shards for n in shard]
        ids = [n for n in graph.node_ids if n in set(ids)]
        idx = [graph.index_of(n) for n in ids]
        adj = np.asarray(graph.adjacency)[np.ix_(idx, idx)]
        series = access.features(ids, "inference")
        hist, _ = make_windows(series, anchors, task.lookback, task.horizon)
        total = 0.0
        from .neural import submodel as sm
        ahat = sm.normalized_adjacency(adj)
        for m in self.models:
            x = (hist - m.mean) / m.std
            y, _ = sm.forward(m.params, ahat, x)
            total = total + m.denormalize(y)
        return ids, total / len(self.models)


def _fit_shard(graph: STGraph, shard, cfg: PipelineConfig, seed: int, pos: int, tag: str,
               access: DataAccess, t_train: int, nominal: float) -> SubModel:
    idx = [graph.index_of(n) for n in shard]
    adj = np.asarray(graph.adjacency)[np.ix_(idx, idx)]
    data = access.features(list(shard), "sisa", 0, t_train)
    return fit_submodel(pos, list(shard), adj, 0, data, cfg.task, cfg.sub_train,
                        derive_seed(seed, "sisa", pos, tag),
                        hidden_width(len(shard), nominal, cfg.base_hidden), cfg.lambda_reg)


def train_sisa(graph: STGraph, cfg: PipelineConfig, seed: int,
               ledger: Optional[Ledger] = None) -> SisaModel:
    t0 = time.perf_counter()
    m = min(cfg.m or 1, graph.node_count)
    rng = np.random.default_rng(derive_seed(seed, "sisa-shards"))
    perm = rng.permutation(graph.node_count)
    shards = tuple(tuple(graph.node_ids[i] for i in sorted(perm[s::m])) for s in range(m))
    access = DataAccess(graph, ledger)
    t_train, _ = split_bounds(graph.timesteps, cfg.train_fraction, cfg.val_fraction)
    nominal = graph.node_count / m
    models = tuple(_fit_shard(graph, sh, cfg, seed, i, "", access, t_train, nominal)
                   for i, sh in enumerate(shards))
    return SisaModel(shards, models, time.perf_counter() - t0)


def unlearn_sisa(sisa: SisaModel, graph: STGraph, request: DeletionRequest, cfg: PipelineConfig,
                 seed: int, ledger: Optional[Ledger] = None) -> SisaModel:
    """Retrain only shards holding deleted nodes, on the purged graph."""
    t0 = time.perf_counter()
    purged = graph.without(request)
    access = DataAccess(purged, ledger)
    t_train, _ = split_bounds(graph.timesteps, cfg.train_fraction, cfg.val_fraction)
    nominal = graph.node_count / len(sisa.shards)
    shards, models = [], []
    for i, (sh, mdl) in enumerate(zip(sisa.shards, sisa.models)):
        if request.nodes.isdisjoint(sh):
            shards.append(sh)
            models.append(mdl)
            continue
        kept = tuple(n for n in sh if n not in request.nodes)
        if kept:
            shards.append(kept)
            models.append(_fit_shard(purged, kept, cfg, seed, i, request.digest(), access,
                                     t_train, nominal))
    return SisaModel(tuple(shards), tuple(models), time.perf_counter() - t0)


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class BoundReport:
    fusion_rhs: float
    fusion_empirical: float
    deletion_rhs: float
    deletion_empirical: float
    retention: tuple
    delta_cut: float
    m: int
    notes: tuple = ()

    @property
    def fusion_holds(self) -> bool:
        return self.fusion_empirical <= self.fusion_rhs

    @property
    def deletion_holds(self) -> bool:
        return self.deletion_empirical <= self.deletion_rhs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["retention"] = list(self.retention)
        d["notes"] = list(self.notes)
        d["fusion_holds"] = self.fusion_holds
        d["deletion_holds"] = self.deletion_holds
        return d


def fusion_bound_rhs(delta_cut: float, m: int, heads: int, layers: int, width: int,
                     eps: float = 1.0) -> float:
    """Cut-correlation bound on the fused model's approximation gap."""
    return eps * delta_cut * math.sqrt(m) / (heads * layers * width)


def deletion_bound_rhs(delta_cut: float, n_deleted: int, n_live: int, heads: int, layers: int,
                       width: int) -> float:
    """Bound on how far deleting nodes can move the retained forecasts."""
    if n_live - n_deleted <= 0:
        raise ValidationError("no retained nodes")
    return delta_cut * n_deleted / ((n_live - n_deleted) * heads * layers * width)


def _aligned(ids_a, pa, ids_b, pb):
    pos = {n: i for i, n in enumerate(ids_b)}
    common = [n for n in ids_a if n in pos]
    ia = [ids_a.index(n) for n in common]
    ib = [pos[n] for n in common]
    return pa[:, ia], pb[:, ib]


def bound_report(ens: TrainedEnsemble, graph: STGraph, reference: Optional[ScratchModel],
                 request: DeletionRequest = DeletionRequest(),
                 post: Optional[TrainedEnsemble] = None) -> BoundReport:
    """Theoretical right-hand sides next to their measured counterparts.

    ``fusion_empirical`` is the root-mean-square gap between the full-graph
    reference and the ensemble on the test split; ``deletion_empirical`` is the
    mean squared shift of retained-node forecasts across the unlearn step.
    """
    if reference is None:
        raise ValidationError("bound report needs a full-graph reference model")
    cfg = ens.config
    part = ens.partition
    dc = part.delta_cut
    anchors = holdout_anchors(graph.timesteps, cfg)
    ids_e, pe = predict(ens, graph, anchors)
    ids_r, pr = reference.predict(graph, anchors, cfg.task)
    a, b = _aligned(ids_e, pe, ids_r, pr)
    fusion_emp = float(np.sqrt(np.mean((a - b) ** 2)))
    deletion_emp = 0.0
    if post is not None and not request.is_empty():
        ids_p, pp = predict(post, graph.without(request), anchors)
        a, b = _aligned(ids_p, pp, ids_e, pe)
        deletion_emp = float(np.mean((a - b) ** 2))
    width = cfg.ganglion_width
    notes = ["leading constant of the accuracy bound taken as 1"]
    if not (part.m <= 16 and len(part.backbone) <= 10 ** 4):
        notes.append("outside the stated regime M <= 16, N <= 1e4")
    return BoundReport(
        fusion_rhs=fusion_bound_rhs(dc, part.m, cfg.heads, cfg.layers, width), fusion_empirical=fusion_emp,
        deletion_rhs=deletion_bound_rhs(dc, len(request.nodes), len(part.backbone), cfg.heads,
                                        cfg.layers, width),
        deletion_empirical=deletion_emp, retention=info_retention(part), delta_cut=dc, m=part.m,
        notes=tuple(notes))


def timing_report(results: dict) -> list:
    """Rows of per-seed stage timings and the unlearn/retrain ratio vs scratch."""
    rows = []
    timings = results.get("timings", {})
    for seed in results["bundle"]["seeds"]:
        t = timings.get(str(seed))
        if t is None or "callosum" not in t or "scratch" not in t:
            raise ValidationError(f"seed {seed} lacks a callosum or scratch run")
        c, s = t["callosum"], t["scratch"]
        retrain = s.get("retrain", s["train"])
        unlearn = c.get("unlearn")
        rows.append({
            "seed": seed,
            "stage1_max": c["stage1_max"], "stage1_sum": c["stage1_sum"],
            "stage2": c["stage2"], "train": c["train"],
            "unlearn": unlearn, "scratch_train": s["train"], "scratch_retrain": retrain,
            "ratio": (unlearn / retrain) if unlearn is not None and retrain > 0 else None,
        })
    return rows


# ------------------------------------------------------------------ experiment


def _metrics(graph, ids, preds, anchors, task) -> dict:
    return evaluate_predictions(graph, ids, preds, anchors, task).to_dict(timings=False)


def _stage1_times(ens: TrainedEnsemble) -> tuple:
    ts = list(ens.timings.get("stage1_per_model", {}).values())
    return (max(ts), sum(ts)) if ts else (ens.timings["stage1"], ens.timings["stage1"])


def run_seed(graph: STGraph, cfg: ExperimentConfig, seed: int, keep_models: bool = False) -> dict:
    pcfg = cfg.pipeline()
    anchors = holdout_anchors(graph.timesteps, pcfg)
    request = sample_deletion(graph, cfg.unlearn_rate, seed)
    retained = [n for n in graph.node_ids if n not in request.nodes]
    out = {"request": request.to_dict(), "metrics": {}, "certificate": None, "bounds": None}
    times = {}
    models = {}
    purged = graph.without(request) if not request.is_empty() else graph

    def record(method, phase, ids, preds, g):
        keep = [i for i, n in enumerate(ids) if n in set(retained)] if phase == "unlearn" else None
        if keep is not None:
            ids, preds = [ids[i] for i in keep], preds[:, keep]
        out["metrics"].setdefault(method, {})[phase] = _metrics(g, ids, preds, anchors, pcfg.task)

    scratch = None
    if "scratch" in cfg.methods or "callosum" in cfg.methods:
        scratch = train_scratch(graph, pcfg, seed)
        if "scratch" in cfg.methods:
            record("scratch", "train", *scratch.predict(graph, anchors, pcfg.task), graph)
        times["scratch"] = {"train": scratch.seconds}
        models["scratch"] = scratch
        if not request.is_empty():
            gold = train_scratch(purged, pcfg, seed, nominal=graph.node_count / (pcfg.m or 1))
            record("gold", "unlearn", *gold.predict(purged, anchors, pcfg.task), purged)
            times["scratch"]["retrain"] = gold.seconds
            if "scratch" in cfg.methods:
                record("scratch", "unlearn", *gold.predict(purged, anchors, pcfg.task), purged)
            models["gold"] = gold

    if "callosum" in cfg.methods:
        t0 = time.perf_counter()
        ens = train_callosum(graph, pcfg, seed)
        train_s = time.perf_counter() - t0
        record("callosum", "train", *predict(ens, graph, anchors), graph)
        s1max, s1sum = _stage1_times(ens)
        times["callosum"] = {"train": train_s, "stage1_max": s1max, "stage1_sum": s1sum,
                             "stage2": ens.timings["stage2"]}
        post = None
        if not request.is_empty():
            t0 = time.perf_counter()
            post, _ = execute_unlearn(ens, graph, request, verify=False)
            times["callosum"]["unlearn"] = time.perf_counter() - t0
            record("callosum", "unlearn", *predict(post, purged, anchors), purged)
            if cfg.certify:
                cert = certify(post, request, graph)
                out["certificate"] = cert.to_dict(timings=False)
                times["callosum"]["certify"] = cert.timings
        out["bounds"] = bound_report(ens, graph, scratch, request, post).to_dict()
        models["callosum"] = ens
        models["callosum_post"] = post

    if "sisa" in cfg.methods:
        sisa = train_sisa(graph, pcfg, seed)
        record("sisa", "train", *sisa.predict(graph, anchors, pcfg.task), graph)
        times["sisa"] = {"train": sisa.seconds}
        if not request.is_empty():
            sisa_post = unlearn_sisa(sisa, graph, request, pcfg, seed)
            record("sisa", "unlearn", *sisa_post.predict(purged, anchors, pcfg.task), purged)
            times["sisa"]["unlearn"] = sisa_post.seconds
        models["sisa"] = sisa

    out["timings"] = times
    if keep_models:
        out["models"] = models
    return out


def run_experiment(cfg: ExperimentConfig, graph: Optional[STGraph] = None,
                   keep_models: bool = False) -> dict:
    """Results bundle (deterministic) with timings kept under a separate key.

    ``keep_models`` adds the trained models per seed under ``"models"``.
    """
    graph = graph if graph is not None else load_dataset(cfg.dataset)
    if cfg.unlearn_rate > 0 and cfg.unlearn_rate * graph.node_count < 1 - 1e-12:
        raise ValidationError("unlearn_rate * N must be at least 1")
    bundle = {"config": cfg.to_dict(), "dataset_digest": graph.digest(), "seeds": list(cfg.seeds),
              "runs": {}}
    timings, models = {}, {}
    for seed in cfg.seeds:
        res = run_seed(graph, cfg, seed, keep_models=keep_models)
        timings[str(seed)] = res.pop("timings")
        if keep_models:
            models[str(seed)] = res.pop("models")
        bundle["runs"][str(seed)] = res
    bundle["summary"] = summarize(bundle)
    out = {"bundle": bundle, "timings": timings}
    if keep_models:
        out["models"] = models
    return out


def summarize(bundle: dict) -> dict:
    """Mean and std of each metric per method and phase across seeds."""
    acc = {}
    for run in bundle["runs"].values():
        for method, phases in run["metrics"].items():
            for phase, metrics in phases.items():
                for k, v in metrics.items():
                    if v is not None:
                        acc.setdefault((method, phase, k), []).append(v)
    out = {}
    for (method, phase, k), vals in sorted(acc.items()):
        out.setdefault(method, {}).setdefault(phase, {})[k] = {
            "mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return out


# ------------------------------------------------------------------ output


def format_table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.4f}"
        return str(v)
    body = [[cell(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in body]
    return "\n".join(lines)


def metric_rows(bundle: dict) -> tuple:
    header = ("seed", "method", "phase", "mae", "rmse", "r2", "trend_f1")
    rows = []
    for seed in bundle["seeds"]:
        for method, phases in sorted(bundle["runs"][str(seed)]["metrics"].items()):
            for phase, m in sorted(phases.items()):
                rows.append((seed, method, phase, m["mae"], m["rmse"], m["r2"], m["trend_f1"]))
    return header, rows


def bound_rows(bundle: dict) -> tuple:
    header = ("seed", "M", "delta_cut", "fusion_rhs", "fusion_emp", "deletion_rhs", "deletion_emp",
              "info_intra", "total_corr")
    rows = []
    for seed in bundle["seeds"]:
        b = bundle["runs"][str(seed)].get("bounds")
        if b:
            rows.append((seed, b["m"], b["delta_cut"], b["fusion_rhs"], b["fusion_empirical"],
                         b["deletion_rhs"], b["deletion_empirical"], b["retention"][0], b["retention"][1]))
    return header, rows


def timing_rows(results: dict) -> tuple:
    rows = timing_report(results)
    header = ("seed", "stage1_max", "stage1_sum", "stage2", "train", "unlearn", "scratch_retrain", "ratio")
    return header, [tuple(r[h] for h in header) for r in rows]


def render_report(results: dict) -> str:
    bundle = results["bundle"]
    parts = ["Forecast metrics (test split; unlearn phase scored on retained nodes)",
             format_table(*metric_rows(bundle))]
    hb, rb = bound_rows(bundle)
    if rb:
        parts += ["", "Bound report", format_table(hb, rb)]
    cert_rows = []
    for seed in bundle["seeds"]:
        c = bundle["runs"][str(seed)].get("certificate")
        if c:
            cert_rows.append((seed, c["equivalence"], c["ledger_clean"], c["influence_null"],
                              c["valid"], ",".join(map(str, c["affected_subgraphs"]))))
    if cert_rows:
        parts += ["", "Unlearning certificates",
                  format_table(("seed", "equivalence", "ledger_clean", "influence_null", "valid",
                                "affected"), cert_rows)]
    try:
        parts += ["", "Wall clock (seconds)", format_table(*timing_rows(results))]
    except ValidationError:
        pass                     # timing table needs both callosum and scratch runs
    return "\n".join(parts) + "\n"


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_results(results: dict, out_dir) -> None:
    """bundle.json (deterministic), timings.json, report.txt, metrics.csv, bounds.csv."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "bundle.json").write_text(json.dumps(results["bundle"], indent=2, sort_keys=True) + "\n")
    (root / "timings.json").write_text(json.dumps(results["timings"], indent=2, sort_keys=True) + "\n")
    (root / "report.txt").write_text(render_report(results))
    write_csv(root / "metrics.csv", *metric_rows(results["bundle"]))
    write_csv(root / "bounds.csv", *bound_rows(results["bundle"]))
