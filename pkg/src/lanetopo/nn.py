"""Dense neural-network primitives (linear, ReLU, sigmoid, layer norm, MLP
stacks) with explicit forward caches and hand-derived reverse-mode
backward passes.  Everything is float64 and purely functional."""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

LN_EPS = 1e-5


def init_linear(
    rng: np.random.Generator, fan_in: int, fan_out: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / np.sqrt(fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=fan_out)
    return w, b


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    dx = dy @ w.T
    # contract every leading (batch) axis; inputs may be N-dimensional
    leading = tuple(range(x.ndim - 1))
    dw = np.tensordot(x, dy, axes=(leading, leading))
    db = dy.sum(axis=leading)
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dy, x):
    return dy * (x > 0.0)


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    return dy * y * (1.0 - y)


def layernorm_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layernorm_backward(dy, cache):
    xhat, inv, gamma = cache
    n = xhat.shape[-1]
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    dx = (
        inv
        / n
        * (
            n * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
    )
    return dx, dgamma, dbeta


@dataclass
class Mlp:
    """A stack of linear layers with ReLU (optionally preceded by layer
    normalization) between them.  No activation after the final layer; the
    caller applies sigmoid where the head calls for one."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    ln_gammas: Optional[List[np.ndarray]] = None
    ln_betas: Optional[List[np.ndarray]] = None

    @property
    def layernorm(self) -> bool:
        return self.ln_gammas is not None


def init_mlp(
    rng: np.random.Generator, dims: Tuple[int, ...], layernorm: bool = False
) -> Mlp:
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        w, b = init_linear(rng, fan_in, fan_out)
        weights.append(w)
        biases.append(b)
    if layernorm:
        gammas = [np.ones(d) for d in dims[1:-1]]
        betas = [np.zeros(d) for d in dims[1:-1]]
        return Mlp(weights, biases, gammas, betas)
    return Mlp(weights, biases)


def mlp_forward(params: Mlp, x):
    caches = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h, lin_cache = linear_forward(h, w, b)
        ln_cache = None
        relu_cache = None
        if i < last:
            if params.layernorm:
                h, ln_cache = layernorm_forward(
                    h, params.ln_gammas[i], params.ln_betas[i]
                )
            h, relu_cache = relu_forward(h)
        caches.append((lin_cache, ln_cache, relu_cache))
    return h, caches


def mlp_backward(params: Mlp, dy, caches):
    grads = Mlp(
        [np.zeros_like(w) for w in params.weights],
        [np.zeros_like(b) for b in params.biases],
        None if params.ln_gammas is None else [np.zeros_like(g) for g in params.ln_gammas],
        None if params.ln_betas is None else [np.zeros_like(b) for b in params.ln_betas],
    )
    dh = dy
    for i in reversed(range(len(params.weights))):
        lin_cache, ln_cache, relu_cache = caches[i]
        if relu_cache is not None:
            dh = relu_backward(dh, relu_cache)
        if ln_cache is not None:
            dh, dg, db_ = layernorm_backward(dh, ln_cache)
            grads.ln_gammas[i] += dg
            grads.ln_betas[i] += db_
        dh, dw, db = linear_backward(dh, lin_cache)
        grads.weights[i] += dw
        grads.biases[i] += db
    return dh, grads


def nonzero_min_abs(arr: np.ndarray) -> float:
    """Smallest nonzero |entry|.  Exact zeros are ignored: they arise from a
    preceding clip or a structural zero and are locally constant, not kinks."""
    mags = np.abs(np.asarray(arr))
    mags = mags[mags > 0.0]
    return float(mags.min()) if mags.size else np.inf


def mlp_min_preactivation_margin(caches) -> float:
    """Smallest |preactivation| feeding a ReLU; used to reject instances that
    sit on a kink during finite-difference verification."""
    margin = np.inf
    for _lin_cache, _ln_cache, relu_cache in caches:
        if relu_cache is None or relu_cache.size == 0:
            continue
        margin = min(margin, nonzero_min_abs(relu_cache))
    return margin


def param_blocks(obj, prefix: str = "") -> Dict[str, np.ndarray]:
    """Flatten a dataclass tree of ndarrays into named parameter blocks.

    Wandered fields: ndarray -> one block; list/tuple of ndarrays -> indexed
    blocks; nested dataclass -> recursed with a dotted prefix.  Non-array
    fields (hyperparameters) are skipped.
    """
    blocks: Dict[str, np.ndarray] = {}
    for f in fields(obj):
        value = getattr(obj, f.name)
        name = f"{prefix}{f.name}"
        if value is None:
            continue
        if isinstance(value, np.ndarray):
            blocks[name] = value
        elif is_dataclass(value):
            blocks.update(param_blocks(value, prefix=f"{name}."))
        elif isinstance(value, (list, tuple)) and value and isinstance(
            value[0], np.ndarray
        ):
            for i, item in enumerate(value):
                blocks[f"{name}.{i}"] = item
    return blocks
