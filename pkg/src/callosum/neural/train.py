"""Frozen sub-models, the global layer, and their seeded training loops."""

from __future__ import annotations

from dataclasses import dataclass
from types import MappingProxyType
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import FrozenModelError, ValidationError
from ..serialize import canonical_json, decode_array, encode_array, sha256_hex
from ..stgraph import ForecastTask, make_windows, window_starts
from . import global_layer as gl
from . import submodel as sm


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 40
    batch: int = 128
    grad_clip: float = 5.0
    stop_loss: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch < 1:
            raise ValidationError("batch must be >= 1")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "epochs": self.epochs,
                "batch": self.batch, "grad_clip": self.grad_clip, "stop_loss": self.stop_loss}


def _freeze(params: dict) -> MappingProxyType:
    out = {}
    for k, v in params.items():
        a = np.array(v, dtype=np.float64, copy=True)
        a.setflags(write=False)
        out[k] = a
    return MappingProxyType(out)


def _params_doc(params) -> dict:
    return {k: encode_array(params[k]) for k in sorted(params)}


def descend(params: dict, loss_grad: Callable, n_samples: int, cfg: TrainConfig,
            rng: np.random.Generator, project: Optional[Callable] = None) -> list:
    """Mini-batch gradient descent with global-norm clipping.

    ``loss_grad(idx)`` returns ``(loss, grads)`` for the sample indices
    ``idx``. Stops after ``cfg.epochs`` or once an epoch's mean loss falls
    below ``cfg.stop_loss``. Returns the per-epoch mean losses.
    """
    history = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_samples)
        losses = []
        for start in range(0, n_samples, cfg.batch):
            idx = np.sort(perm[start:start + cfg.batch])
            loss, grads = loss_grad(idx)
            losses.append(loss)
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            scale = 1.0
            if cfg.grad_clip > 0 and norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
            for k, g in grads.items():
                params[k] = params[k] - cfg.learning_rate * scale * g
            if project is not None:
                project(params)
        history.append(float(np.mean(losses)))
        if history[-1] < cfg.stop_loss:
            break
    return history


# ------------------------------------------------------------------ sub-model


@dataclass(frozen=True, eq=False)
class SubModel:
    sid: int
    seed: int
    node_ids: tuple               # real nodes in local order
    adjacency: np.ndarray         # local structure incl. stub
    n_stubs: int
    lookback: int
    horizon: int
    feature_dim: int
    hidden: int
    lam_reg: float
    mean: np.ndarray              # per-channel normalisation
    std: np.ndarray
    params: MappingProxyType
    data_digest: str
    train_config: dict
    loss_history: tuple = ()
    frozen: bool = True

    def __post_init__(self) -> None:
        if self.frozen and not isinstance(self.params, MappingProxyType):
            object.__setattr__(self, "params", _freeze(self.params))
        for name in ("adjacency", "mean", "std"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_real(self) -> int:
        return len(self.node_ids)

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        return (raw - self.mean) / self.std

    def run(self, hist_raw: np.ndarray):
        """Embeddings ``(B, n, hidden)`` and normalised forecasts ``(B, n, P)``
        for raw histories ``(B, L, n, F)`` of the real nodes."""
        x = self.normalize(hist_raw)
        if self.n_stubs:
            pad = np.zeros(x.shape[:2] + (self.n_stubs, x.shape[3]))
            x = np.concatenate([x, pad], axis=2)
        y, (_, _, _, h, _) = sm.forward(dict(self.params), sm.normalized_adjacency(self.adjacency), x)
        n = self.n_real
        return h[:, :n], y[:, :n]

    def denormalize(self, y_norm: np.ndarray) -> np.ndarray:
        return y_norm * self.std[0] + self.mean[0]

    def to_dict(self) -> dict:
        return {
            "sid": self.sid, "seed": self.seed, "node_ids": list(self.node_ids),
            "edges": np.argwhere(self.adjacency).tolist(), "local_size": int(self.adjacency.shape[0]),
            "n_stubs": self.n_stubs, "lookback": self.lookback, "horizon": self.horizon,
            "feature_dim": self.feature_dim, "hidden": self.hidden, "lam_reg": self.lam_reg,
            "mean": encode_array(self.mean), "std": encode_array(self.std),
            "params": _params_doc(self.params), "data_digest": self.data_digest,
            "train_config": self.train_config, "loss_history": list(self.loss_history),
            "frozen": self.frozen,
        }

    def checkpoint(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return sha256_hex(self.checkpoint())

    @classmethod
    def from_dict(cls, doc: dict) -> "SubModel":
        size = doc["local_size"]
        adj = np.zeros((size, size), dtype=np.int8)
        for a, b in doc["edges"]:
            adj[a, b] = 1
        return cls(
            sid=doc["sid"], seed=doc["seed"], node_ids=tuple(doc["node_ids"]), adjacency=adj,
            n_stubs=doc["n_stubs"], lookback=doc["lookback"], horizon=doc["horizon"],
            feature_dim=doc["feature_dim"], hidden=doc["hidden"], lam_reg=doc["lam_reg"],
            mean=decode_array(doc["mean"]), std=decode_array(doc["std"]),
            params={k: decode_array(v) for k, v in doc["params"].items()},
            data_digest=doc["data_digest"], train_config=doc["train_config"],
            loss_history=tuple(doc["loss_history"]), frozen=doc["frozen"],
        )


def slice_digest(node_ids: Sequence[str], data: np.ndarray) -> str:
    return sha256_hex(canonical_json(list(node_ids)).encode()
                      + np.ascontiguousarray(data, dtype="<f8").tobytes())


def normalisation(data: np.ndarray):
    mean = data.mean(axis=(0, 1))
    std = data.std(axis=(0, 1))
    return mean, np.where(std > 0, std, 1.0)


def fit_submodel(sid: int, node_ids: Sequence[str], adjacency: np.ndarray, n_stubs: int,
                 data: np.ndarray, task: ForecastTask, cfg: TrainConfig, seed: int,
                 hidden: int, lam_reg: float = 1e-4) -> SubModel:
    """Train on ``data`` of shape ``(T_train, n_real, F)`` and return a frozen model."""
    n_real = len(node_ids)
    if n_real == 0:
        raise ValidationError(f"subgraph {sid} has no trainable nodes; merge it first")
    if data.shape[1] != n_real:
        raise ValidationError("data does not match the node list")
    mean, std = normalisation(data)
    norm = (data - mean) / std
    if n_stubs:
        norm = np.concatenate([norm, np.zeros((norm.shape[0], n_stubs, norm.shape[2]))], axis=1)
    anchors = window_starts(0, norm.shape[0], task.lookback, task.horizon)
    if len(anchors) == 0:
        raise ValidationError("training slice is too short for lookback + horizon")
    hist, tgt = make_windows(norm, anchors, task.lookback, task.horizon)
    mask = np.zeros(n_real + n_stubs, dtype=bool)
    mask[:n_real] = True
    ahat = sm.normalized_adjacency(adjacency)
    rng = np.random.default_rng(seed)
    params = sm.init_params(rng, task.lookback, data.shape[2], hidden, task.horizon)
    history = descend(
        params, lambda idx: sm.loss_and_grad(params, ahat, hist[idx], tgt[idx], mask, lam_reg),
        len(anchors), cfg, rng)
    return SubModel(
        sid=sid, seed=seed, node_ids=tuple(node_ids), adjacency=adjacency, n_stubs=n_stubs,
        lookback=task.lookback, horizon=task.horizon, feature_dim=data.shape[2], hidden=hidden,
        lam_reg=lam_reg, mean=mean, std=std, params=params,
        data_digest=slice_digest(node_ids, data), train_config=cfg.to_dict(),
        loss_history=tuple(history),
    )


def train_submodel(sub, graph, task: ForecastTask, cfg: TrainConfig, exclude=None, *,
                   partition_ids: Sequence[str], seed: int, hidden: int, lam_reg: float = 1e-4,
                   t_end: Optional[int] = None, access=None, stage: str = "stage1") -> SubModel:
    """Train the model of one repaired subgraph, never reading ``exclude`` nodes.

    Features are fetched through ``access`` (a :class:`callosum.ledger.DataAccess`)
    when given, so every read is logged.
    """
    from ..ledger import DataAccess

    banned = set(exclude.nodes) if exclude is not None else set()
    keep = [i for i, node in enumerate(sub.nodes) if partition_ids[node] not in banned]
    if not keep:
        raise ValidationError(f"subgraph {sub.sid} has no nodes left after exclusion")
    if len(keep) != sub.size:
        raise ValidationError("excluded nodes must be purged from the subgraph before training")
    ids = [partition_ids[node] for node in sub.nodes]
    access = access if access is not None else DataAccess(graph)
    data = access.features(ids, stage, 0, t_end)
    return fit_submodel(sub.sid, ids, np.asarray(sub.adjacency), sub.n_stubs, data, task, cfg,
                        seed, hidden, lam_reg)


def encode(model: SubModel, hist_raw: np.ndarray) -> np.ndarray:
    """Per-node embeddings from a frozen sub-model."""
    if not model.frozen:
        raise FrozenModelError("embeddings must come from a frozen sub-model")
    return model.run(hist_raw)[0]


def fuse(h_tok, h_gang, alpha: float) -> np.ndarray:
    """alpha * h_tok + (1 - alpha) * h_gang."""
    h_tok = np.asarray(h_tok, dtype=np.float64)
    h_gang = np.asarray(h_gang, dtype=np.float64)
    if h_tok.shape != h_gang.shape:
        raise ValidationError(f"dimension mismatch {h_tok.shape} vs {h_gang.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError("alpha must lie in [0, 1]")
    return alpha * h_tok + (1.0 - alpha) * h_gang


# --------------------------------------------------------------- global layer


@dataclass(frozen=True, eq=False)
class GlobalLayer:
    params: MappingProxyType
    dim: int
    ganglion_width: int
    heads: int
    layers: int
    horizon: int
    lambda1: float
    lambda2: float
    seed: int
    sub_dims: tuple
    loss_history: tuple = ()

    def __post_init__(self) -> None:
        if not isinstance(self.params, MappingProxyType):
            object.__setattr__(self, "params", _freeze(self.params))
        alpha = float(self.params["alpha"])
        if not 0.0 <= alpha <= 1.0:
            raise ValidationError("alpha must lie in [0, 1]")

    @property
    def alpha(self) -> float:
        return float(self.params["alpha"])

    def to_dict(self) -> dict:
        return {"params": _params_doc(self.params), "dim": self.dim,
                "ganglion_width": self.ganglion_width, "heads": self.heads,
                "layers": self.layers, "horizon": self.horizon, "lambda1": self.lambda1,
                "lambda2": self.lambda2, "seed": self.seed, "sub_dims": list(self.sub_dims),
                "loss_history": list(self.loss_history)}

    def checkpoint(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return sha256_hex(self.checkpoint())

    @classmethod
    def from_dict(cls, doc: dict) -> "GlobalLayer":
        return cls(params={k: decode_array(v) for k, v in doc["params"].items()},
                   dim=doc["dim"], ganglion_width=doc["ganglion_width"], heads=doc["heads"],
                   layers=doc["layers"], horizon=doc["horizon"], lambda1=doc["lambda1"],
                   lambda2=doc["lambda2"], seed=doc["seed"], sub_dims=tuple(doc["sub_dims"]),
                   loss_history=tuple(doc["loss_history"]))


def init_global_layer(struct: gl.MetaStructure, meta_weights: np.ndarray, sub_dims, *,
                      seed: int, horizon: int, ganglion_width: int = 16, heads: int = 2,
                      layers: int = 2, lambda1: float = 0.01, lambda2: float = 0.001,
                      alpha: float = 0.5) -> GlobalLayer:
    rng = np.random.default_rng(seed)
    dim = ganglion_width
    params = gl.init_params(rng, struct, sub_dims, dim, ganglion_width, heads, layers,
                            horizon, meta_weights, alpha)
    return GlobalLayer(params=params, dim=dim, ganglion_width=ganglion_width, heads=heads,
                       layers=layers, horizon=horizon, lambda1=lambda1, lambda2=lambda2,
                       seed=seed, sub_dims=tuple(sub_dims))


def global_forward(layer: GlobalLayer, struct: gl.MetaStructure, embeddings, sub_preds):
    """Corrected normalised forecasts per subgraph."""
    if tuple(e.shape[2] for e in embeddings) != layer.sub_dims:
        raise ValidationError("embedding widths do not match the global layer")
    if len(layer.params["A"]) != len(struct.edges):
        raise ValidationError("meta edge count does not match the layer's A_meta")
    return gl.forward(dict(layer.params), struct, embeddings, sub_preds)[0]


def ggb_loss(layer: GlobalLayer, struct: gl.MetaStructure, embeddings, sub_preds, targets) -> float:
    return gl.loss_and_grad(dict(layer.params), struct, embeddings, sub_preds, targets,
                            layer.lambda1, layer.lambda2, need_grad=False)[0]


def _project_global(params: dict) -> None:
    params["alpha"] = np.clip(params["alpha"], 0.0, 1.0)
    params["A"] = np.maximum(params["A"], 0.0)


def train_global(layer: GlobalLayer, struct: gl.MetaStructure, embeddings, sub_preds, targets,
                 cfg: TrainConfig, sub_models: Sequence[SubModel] = ()) -> GlobalLayer:
    """Seeded descent on the global loss; sub-models must be frozen and stay untouched."""
    for m in sub_models:
        if not m.frozen:
            raise FrozenModelError(f"sub-model {m.sid} is not frozen")
    before = [m.digest() for m in sub_models]
    params = {k: np.array(v, copy=True) for k, v in layer.params.items()}
    rng = np.random.default_rng(layer.seed + 1)
    n = embeddings[0].shape[0]

    def loss_grad(idx):
        return gl.loss_and_grad(params, struct, [e[idx] for e in embeddings],
                                [s[idx] for s in sub_preds], [t[idx] for t in targets],
                                layer.lambda1, layer.lambda2)

    history = descend(params, loss_grad, n, cfg, rng, project=_project_global)
    if [m.digest() for m in sub_models] != before:
        raise FrozenModelError("a sub-model changed during global training")
    return GlobalLayer(params=params, dim=layer.dim, ganglion_width=layer.ganglion_width,
                       heads=layer.heads, layers=layer.layers, horizon=layer.horizon,
                       lambda1=layer.lambda1, lambda2=layer.lambda2, seed=layer.seed,
                       sub_dims=layer.sub_dims, loss_history=layer.loss_history + tuple(history))
