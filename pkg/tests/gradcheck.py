"""Central finite-difference checks shared by the unit and acceptance suites."""

import numpy as np

from callosum.ggb import MetaGraph
from callosum.neural import global_layer as gl
from callosum.neural import submodel as sm

SUB_KEYS = sm.PARAM_ORDER
ATTENTION_KEYS = ("Wq", "Wk", "Wv", "Wo")
GANGLION_KEYS = ("W1", "b1", "W2", "b2")


def relative_errors(loss_grad, params, keys, eps=1e-5):
    """Per-key ``|num - ana| / max(|num|, |ana|, 1e-12)`` in the 2-norm."""
    _, grads = loss_grad(params, True)
    out = {}
    for key in keys:
        v = params[key]
        num = np.zeros(v.shape)
        flat = v.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = loss_grad(params, False)[0]
            flat[i] = old - eps
            lo = loss_grad(params, False)[0]
            flat[i] = old
            num.reshape(-1)[i] = (hi - lo) / (2 * eps)
        ana = np.asarray(grads[key], dtype=float)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-12)
        out[key] = float(np.linalg.norm(num - ana) / scale)
    return out


def sub_problem(rng):
    n = int(rng.integers(3, 7))
    adj = (rng.random((n, n)) < 0.4).astype(np.int8)
    np.fill_diagonal(adj, 0)
    ahat = sm.normalized_adjacency(adj)
    lookback, feats, hidden, horizon = int(rng.integers(2, 5)), int(rng.integers(1, 3)), 5, 2
    params = sm.init_params(rng, lookback, feats, hidden, horizon)
    for k in params:
        params[k] = params[k] + rng.normal(0, 0.3, params[k].shape)
    x = rng.normal(size=(6, lookback, n, feats))
    y = rng.normal(size=(6, n, horizon))
    mask = np.ones(n, dtype=bool)
    mask[-1] = bool(rng.integers(0, 2))
    lam = float(rng.uniform(0, 0.05))

    def loss_grad(p, need_grad=True):
        return sm.loss_and_grad(p, ahat, x, y, mask, lam, need_grad)

    return params, loss_grad


def global_problem(rng):
    """Two subgraphs (3 and 4 nodes), three real meta-vertices, two ganglia."""
    edges = np.array([[0, 3], [1, 3], [2, 4], [0, 5], [1, 5], [2, 5], [2, 6], [1, 2], [0, 6]])
    meta = MetaGraph(real_nodes=(0, 2, 4), real_subgraph=(0, 0, 1), key_nodes=((0,), (4,)),
                     boundary_nodes=(2, 4), n_slots=2, n_ganglia=2, edges=edges,
                     weights=rng.uniform(0.3, 1.5, len(edges)), classes=np.zeros(len(edges), int),
                     budget=99, partition_digest="test")
    struct = gl.meta_structure(meta, [[0, 1, 2], [3, 4, 5, 6]])
    dims = [3, 5]
    params = gl.init_params(rng, struct, dims, 4, 4, 2, 2, 3, meta.weights, 0.5)
    for k in params:
        if k not in ("alpha", "A"):
            params[k] = params[k] + rng.normal(0, 0.4, params[k].shape)
    params["alpha"] = np.array(float(rng.uniform(0.1, 0.9)))
    emb = [rng.normal(size=(5, 3, dims[0])), rng.normal(size=(5, 4, dims[1]))]
    preds = [rng.normal(size=(5, 3, 3)), rng.normal(size=(5, 4, 3))]
    tgts = [rng.normal(size=(5, 3, 3)), rng.normal(size=(5, 4, 3))]

    def loss_grad(p, need_grad=True):
        return gl.loss_and_grad(p, struct, emb, preds, tgts, 0.01, 0.001, need_grad)

    return params, loss_grad, struct, emb, preds
