"""Per-subgraph spatio-temporal encoder with hand-written backprop.

Forward pass for a batch of histories ``X`` of shape ``(B, L, n, F)``::

    Z = flat(X) @ Wt + bt            temporal convolution over the lookback
    G = Ahat @ Z                     graph convolution (row-normalised, self loops)
    H = relu(G @ Wg + bg)            node embeddings h_v
    Y = H @ Wr + br + x_last * s     P-step forecast of feature 0
"""

from __future__ import annotations

import numpy as np

PARAM_ORDER = ("Wt", "bt", "Wg", "bg", "Wr", "br", "s")


def normalized_adjacency(adjacency: np.ndarray) -> np.ndarray:
    """``Ahat[v, u]`` weights messages ``u -> v``; self loops added, rows sum to 1."""
    a = np.asarray(adjacency, dtype=np.float64).T + np.eye(adjacency.shape[0])
    return a / a.sum(axis=1, keepdims=True)


def init_params(rng: np.random.Generator, lookback: int, features: int, hidden: int,
                horizon: int) -> dict:
    fan_t = lookback * features
    return {
        "Wt": rng.normal(0.0, 1.0 / np.sqrt(fan_t), (fan_t, hidden)),
        "bt": np.zeros(hidden),
        "Wg": rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, hidden)),
        "bg": np.zeros(hidden),
        "Wr": rng.normal(0.0, 0.1 / np.sqrt(hidden), (hidden, horizon)),
        "br": np.zeros(horizon),
        "s": rng.normal(0.0, 0.1, horizon),
    }


def forward(params: dict, ahat: np.ndarray, x: np.ndarray):
    b, l, n, f = x.shape
    xf = np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, n, l * f)
    z = xf @ params["Wt"] + params["bt"]
    g = np.matmul(ahat, z)
    hpre = g @ params["Wg"] + params["bg"]
    h = np.maximum(hpre, 0.0)
    xlast = x[:, -1, :, 0]
    y = h @ params["Wr"] + params["br"] + xlast[:, :, None] * params["s"]
    return y, (xf, g, hpre, h, xlast)


def loss_and_grad(params: dict, ahat: np.ndarray, x: np.ndarray, target: np.ndarray,
                  mask: np.ndarray, lam: float, need_grad: bool = True):
    """Masked mean squared error plus ``lam * ||theta||^2``.

    ``mask`` is a boolean vector over the ``n`` local nodes (stubs are False).
    """
    y, (xf, g, hpre, h, xlast) = forward(params, ahat, x)
    count = x.shape[0] * int(mask.sum()) * y.shape[2]
    diff = (y - target) * mask[None, :, None]
    reg = sum(float(np.sum(params[k] ** 2)) for k in PARAM_ORDER)
    loss = float(np.sum(diff ** 2)) / count + lam * reg
    if not need_grad:
        return loss, None
    dy = 2.0 * diff / count
    grads = {}
    grads["Wr"] = np.einsum("bnd,bnp->dp", h, dy)
    grads["br"] = dy.sum(axis=(0, 1))
    grads["s"] = np.einsum("bn,bnp->p", xlast, dy)
    dh = dy @ params["Wr"].T
    dhpre = dh * (hpre > 0)
    grads["Wg"] = np.einsum("bnd,bne->de", g, dhpre)
    grads["bg"] = dhpre.sum(axis=(0, 1))
    dg = dhpre @ params["Wg"].T
    dz = np.matmul(ahat.T, dg)
    grads["Wt"] = np.einsum("bnk,bnd->kd", xf, dz)
    grads["bt"] = dz.sum(axis=(0, 1))
    for k in PARAM_ORDER:
        grads[k] = grads[k] + 2.0 * lam * params[k]
    return loss, grads
