"""Global integration layer over the meta-graph.

Token layout follows :class:`callosum.ggb.MetaGraph`: real meta-vertices,
then one summary slot per subgraph, then ganglia. All tensors are
``(B, tokens, D)``.

Forward:

1. real token = frozen embedding @ Win[s] + bin[s]; slot token = mean
   embedding of the subgraph @ Win[s] + bin[s]
2. ganglion g: weighted mean ``a_g`` of its meta-neighbours, then
   ``h_g = relu(a_g W1 + b1) W2 + b2``
3. L residual layers of H-head attention. Attention weights are
   ``W_ij exp(s_ij) / sum_k W_ik exp(s_ik)`` with ``W`` the meta adjacency
   plus self loops, so a zero meta weight gives exactly zero attention.
4. fused = alpha * token + (1 - alpha) * (weighted mean of adjacent h_g)
5. correction = fused @ Wout + bout, added to the subgraph forecast of
   every node routed through that token.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..ggb import MetaGraph

# contraction-order search lets most einsums dispatch to BLAS
_einsum = functools.partial(np.einsum, optimize="greedy")


@dataclass(frozen=True)
class MetaStructure:
    """Index bookkeeping derived from a meta-graph and subgraph sizes."""

    n_real: int
    n_slots: int
    n_ganglia: int
    edges: np.ndarray            # (E, 2)
    real_sub: np.ndarray         # subgraph position of each real token
    real_local: np.ndarray       # local real-node index of each real token
    node_token: tuple            # per subgraph: token index for each local real node
    sub_sizes: tuple

    @property
    def n_tokens(self) -> int:
        return self.n_real + self.n_slots + self.n_ganglia

    @property
    def n_plain(self) -> int:
        return self.n_real + self.n_slots


def meta_structure(meta: MetaGraph, sub_nodes: list) -> MetaStructure:
    """``sub_nodes[i]`` lists the partition node indices of subgraph ``i`` in local order."""
    if len(sub_nodes) != meta.n_slots:
        raise ValidationError("meta-graph slot count does not match the subgraphs")
    pos_of = [{n: p for p, n in enumerate(nodes)} for nodes in sub_nodes]
    real_local = []
    token_of = {}
    for j, (node, s) in enumerate(zip(meta.real_nodes, meta.real_subgraph)):
        if node not in pos_of[s]:
            raise ValidationError(f"meta vertex {node} is not in subgraph {s}")
        real_local.append(pos_of[s][node])
        token_of[node] = j
    node_token = tuple(
        np.array([token_of.get(n, meta.n_real + i) for n in nodes], dtype=np.int64)
        for i, nodes in enumerate(sub_nodes)
    )
    if len(meta.edges) and (meta.edges.max() >= meta.size or meta.edges.min() < 0):
        raise ValidationError("meta edge references a missing vertex")
    return MetaStructure(
        n_real=meta.n_real, n_slots=meta.n_slots, n_ganglia=meta.n_ganglia,
        edges=np.asarray(meta.edges, dtype=np.int64).reshape(-1, 2),
        real_sub=np.array(meta.real_subgraph, dtype=np.int64),
        real_local=np.array(real_local, dtype=np.int64),
        node_token=node_token, sub_sizes=tuple(len(n) for n in sub_nodes),
    )


def init_params(rng: np.random.Generator, struct: MetaStructure, sub_dims, dim: int,
                ganglion_width: int, heads: int, layers: int, horizon: int,
                edge_weights: np.ndarray, alpha: float) -> dict:
    if dim % heads:
        raise ValidationError("model width must be divisible by the head count")
    dh = dim // heads
    g = struct.n_ganglia
    p = {}
    for i, d in enumerate(sub_dims):
        p[f"Win.{i}"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, dim))
        p[f"bin.{i}"] = np.zeros(dim)
    p["W1"] = rng.normal(0.0, np.sqrt(2.0 / dim), (g, dim, ganglion_width))
    p["b1"] = np.zeros((g, ganglion_width))
    p["W2"] = rng.normal(0.0, np.sqrt(1.0 / ganglion_width), (g, ganglion_width, dim))
    p["b2"] = np.zeros((g, dim))
    p["Wq"] = rng.normal(0.0, 1.0 / np.sqrt(dim), (layers, heads, dim, dh))
    p["Wk"] = rng.normal(0.0, 1.0 / np.sqrt(dim), (layers, heads, dim, dh))
    p["Wv"] = rng.normal(0.0, 1.0 / np.sqrt(dim), (layers, heads, dim, dh))
    p["Wo"] = rng.normal(0.0, 0.1 / np.sqrt(dim), (layers, dim, dim))
    p["Wout"] = np.zeros((dim, horizon))
    p["bout"] = np.zeros(horizon)
    p["alpha"] = np.array(float(alpha))
    p["A"] = np.array(edge_weights, dtype=np.float64).copy()
    return p


def _weight_matrix(struct: MetaStructure, a: np.ndarray) -> np.ndarray:
    n = struct.n_tokens
    w = np.zeros((n, n))
    if len(struct.edges):
        w[struct.edges[:, 0], struct.edges[:, 1]] = a
        w[struct.edges[:, 1], struct.edges[:, 0]] = a
    return w


def _row_mix(c: np.ndarray, x: np.ndarray):
    """Row-normalised mix ``(c / rowsum) @ x``; empty rows give zeros."""
    tot = c.sum(axis=1)
    safe = np.where(tot > 0, tot, 1.0)
    norm = c / safe[:, None]
    return _einsum("jg,bgd->bjd", norm, x), tot, safe


def _row_mix_back(c, x, out, tot, safe, dout):
    """Gradients of :func:`_row_mix` w.r.t. ``x`` and the raw weights ``c``."""
    norm = c / safe[:, None]
    dx = _einsum("jg,bjd->bgd", norm, dout)
    # d out_j / d c_jg = (x_g - out_j) / tot_j
    dc = (_einsum("bgd,bjd->jg", x, dout) - _einsum("bjd,bjd->j", out, dout)[:, None])
    dc = dc / safe[:, None] * (tot > 0)[:, None]
    return dx, dc


def forward(params: dict, struct: MetaStructure, embeddings, sub_preds):
    """Returns per-subgraph corrected forecasts ``[(B, n_i, P)]`` and a cache."""
    b = embeddings[0].shape[0]
    dim = params["Wout"].shape[0]
    n_r = struct.n_real
    npl = struct.n_plain
    w = _weight_matrix(struct, params["A"])
    x0 = np.zeros((b, struct.n_tokens, dim))
    means = []
    for i, emb in enumerate(embeddings):
        win, bin_ = params[f"Win.{i}"], params[f"bin.{i}"]
        sel = np.flatnonzero(struct.real_sub == i)
        if len(sel):
            x0[:, sel] = emb[:, struct.real_local[sel]] @ win + bin_
        mean = emb.mean(axis=1)
        means.append(mean)
        x0[:, n_r + i] = mean @ win + bin_
    c_agg = w[npl:, :npl]                                   # (G, plain)
    a_g, agg_tot, agg_safe = _row_mix(c_agg, x0[:, :npl])    # (B, G, D)
    u = _einsum("bgd,gdk->bgk", a_g, params["W1"]) + params["b1"]
    r = np.maximum(u, 0.0)
    h_g = _einsum("bgk,gkd->bgd", r, params["W2"]) + params["b2"]
    x0[:, npl:] = h_g

    wm = w + np.eye(struct.n_tokens)
    z = x0
    layers = []
    heads = params["Wq"].shape[1]
    dh = params["Wq"].shape[3]
    scale = 1.0 / np.sqrt(dh)
    for l in range(params["Wq"].shape[0]):
        q = _einsum("bnd,hde->bhne", z, params["Wq"][l])
        k = _einsum("bnd,hde->bhne", z, params["Wk"][l])
        v = _einsum("bnd,hde->bhne", z, params["Wv"][l])
        s = np.matmul(q, k.transpose(0, 1, 3, 2)) * scale
        e = np.exp(s - s.max(axis=-1, keepdims=True))
        num = wm * e
        den = num.sum(axis=-1, keepdims=True)
        att = num / den
        o = np.matmul(att, v)                                # (B, H, n, dh)
        ocat = o.transpose(0, 2, 1, 3).reshape(b, struct.n_tokens, heads * dh)
        z_next = z + ocat @ params["Wo"][l]
        layers.append((z, q, k, v, e, den, att, ocat))
        z = z_next

    c_fuse = w[:npl, npl:]                                  # (plain, G)
    hgang, fuse_tot, fuse_safe = _row_mix(c_fuse, h_g)
    alpha = float(params["alpha"])
    fused = alpha * z[:, :npl] + (1.0 - alpha) * hgang
    corr = fused @ params["Wout"] + params["bout"]          # (B, plain, P)
    preds = [sp + corr[:, tok] for sp, tok in zip(sub_preds, struct.node_token)]
    cache = dict(w=w, wm=wm, x0=x0, means=means, c_agg=c_agg, a_g=a_g, agg_tot=agg_tot,
                 agg_safe=agg_safe, u=u, r=r, h_g=h_g, layers=layers, z=z, c_fuse=c_fuse,
                 hgang=hgang, fuse_tot=fuse_tot, fuse_safe=fuse_safe, fused=fused)
    return preds, cache


def attention_weights(params: dict, struct: MetaStructure, embeddings, sub_preds) -> list:
    """Per-layer attention tensors ``(B, H, n, n)``; used for inspection and tests."""
    _, cache = forward(params, struct, embeddings, sub_preds)
    return [layer[6] for layer in cache["layers"]]


def loss_and_grad(params: dict, struct: MetaStructure, embeddings, sub_preds, targets,
                  lambda1: float, lambda2: float, need_grad: bool = True):
    """Mean squared forecast error + lambda1 * |A|_1 + lambda2 * mean_b sum_g |h_g|^2."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValidationError("regularisation weights must be non-negative")
    preds, c = forward(params, struct, embeddings, sub_preds)
    b = embeddings[0].shape[0]
    count = sum(p.size for p in preds)
    sq = sum(float(np.sum((p - t) ** 2)) for p, t in zip(preds, targets))
    h_g = c["h_g"]
    loss = sq / count + lambda1 * float(np.sum(np.abs(params["A"]))) \
        + lambda2 * float(np.sum(h_g ** 2)) / b
    if not need_grad:
        return loss, None

    npl = struct.n_plain
    dim = params["Wout"].shape[0]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    dcorr = np.zeros((b, npl, params["Wout"].shape[1]))
    for p, t, tok in zip(preds, targets, struct.node_token):
        np.add.at(dcorr, (slice(None), tok), 2.0 * (p - t) / count)
    grads["Wout"] = _einsum("bjd,bjp->dp", c["fused"], dcorr)
    grads["bout"] = dcorr.sum(axis=(0, 1))
    dfused = dcorr @ params["Wout"].T
    alpha = float(params["alpha"])
    z = c["z"]
    grads["alpha"] = np.array(float(np.sum((z[:, :npl] - c["hgang"]) * dfused)))
    dz = np.zeros_like(z)
    dz[:, :npl] = alpha * dfused
    dhgang = (1.0 - alpha) * dfused
    dh_g, dc_fuse = _row_mix_back(c["c_fuse"], h_g, c["hgang"], c["fuse_tot"],
                                  c["fuse_safe"], dhgang)
    dw = np.zeros_like(c["w"])
    dw[:npl, npl:] += dc_fuse

    heads = params["Wq"].shape[1]
    dh = params["Wq"].shape[3]
    scale = 1.0 / np.sqrt(dh)
    for l in reversed(range(params["Wq"].shape[0])):
        zin, q, k, v, e, den, att, ocat = c["layers"][l]
        grads["Wo"][l] = _einsum("bnd,bne->de", ocat, dz)
        docat = dz @ params["Wo"][l].T
        do = docat.reshape(b, -1, heads, dh).transpose(0, 2, 1, 3)
        datt = np.matmul(do, v.transpose(0, 1, 3, 2))
        dv = np.matmul(att.transpose(0, 1, 3, 2), do)
        rdot = np.sum(att * datt, axis=-1, keepdims=True)
        ds = att * (datt - rdot)
        dw += np.sum(e / den * (datt - rdot), axis=(0, 1))
        dq = np.matmul(ds, k) * scale
        dk = np.matmul(ds.transpose(0, 1, 3, 2), q) * scale
        grads["Wq"][l] = _einsum("bnd,bhne->hde", zin, dq)
        grads["Wk"][l] = _einsum("bnd,bhne->hde", zin, dk)
        grads["Wv"][l] = _einsum("bnd,bhne->hde", zin, dv)
        dz = dz + _einsum("bhne,hde->bnd", dq, params["Wq"][l]) \
            + _einsum("bhne,hde->bnd", dk, params["Wk"][l]) \
            + _einsum("bhne,hde->bnd", dv, params["Wv"][l])

    dx0 = dz
    dh_g = dh_g + dx0[:, npl:] + 2.0 * lambda2 * h_g / b
    grads["W2"] = _einsum("bgk,bgd->gkd", c["r"], dh_g)
    grads["b2"] = dh_g.sum(axis=0)
    dr = _einsum("bgd,gkd->bgk", dh_g, params["W2"])
    du = dr * (c["u"] > 0)
    grads["W1"] = _einsum("bgd,bgk->gdk", c["a_g"], du)
    grads["b1"] = du.sum(axis=0)
    da = _einsum("bgk,gdk->bgd", du, params["W1"])
    dx_plain, dc_agg = _row_mix_back(c["c_agg"], c["x0"][:, :npl], c["a_g"], c["agg_tot"],
                                     c["agg_safe"], da)
    dw[npl:, :npl] += dc_agg
    dx0_plain = dx0[:, :npl] + dx_plain
    n_r = struct.n_real
    for i, emb in enumerate(embeddings):
        sel = np.flatnonzero(struct.real_sub == i)
        gw = np.outer(np.zeros(emb.shape[2]), np.zeros(dim))
        gb = np.zeros(dim)
        if len(sel):
            e_sel = emb[:, struct.real_local[sel]]
            gw = gw + _einsum("bjd,bje->de", e_sel, dx0_plain[:, sel])
            gb = gb + dx0_plain[:, sel].sum(axis=(0, 1))
        gw = gw + _einsum("bd,be->de", c["means"][i], dx0_plain[:, n_r + i])
        gb = gb + dx0_plain[:, n_r + i].sum(axis=0)
        grads[f"Win.{i}"] = gw
        grads[f"bin.{i}"] = gb

    if len(struct.edges):
        a0, a1 = struct.edges[:, 0], struct.edges[:, 1]
        grads["A"] = dw[a0, a1] + dw[a1, a0] + lambda1 * np.sign(params["A"])
    return loss, grads
