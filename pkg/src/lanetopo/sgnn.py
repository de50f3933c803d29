"""Scene-graph network kernels: traffic-element embedding, message-flow
matrix construction, plain graph-convolution propagation (SG variant),
class-conditioned knowledge-graph propagation (SKG variant), and the
residual layer update.  Forward passes record caches; backward passes are
exact reverse-mode derivatives.

Adjacency feedback (``a_ll_prev``, ``a_lt_prev``) and the traffic-element
classification scores ``s_t`` are treated as constants: no gradient flows
into them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .core import (
    InvalidInputError,
    LANE_FEATURE_DIM,
    NUM_TE_ATTRIBUTES,
    TE_FEATURE_DIM,
)
from .nn import (
    Mlp,
    init_linear,
    init_mlp,
    linear_backward,
    linear_forward,
    mlp_backward,
    mlp_forward,
    mlp_min_preactivation_margin,
    param_blocks,
    relu_backward,
    relu_forward,
)

LL_RELATION_CLASSES = 3  # successor, predecessor, self-loop
DEFAULT_EMBED_HIDDEN = 512
DEFAULT_NUM_LAYERS = 6


@dataclass
class SgnnParams:
    """All learnable tensors of one scene-graph network layer.

    ``w_ll[c]`` and ``w_lt[c]`` map a neighbor query to a lane-query update
    for relation class c (applied as ``q @ w[c].T``).  ``gcn_ll``/``gcn_lt``
    are the plain graph-convolution weights of the SG variant.  The dropout
    ratio is recorded for checkpoint fidelity but never sampled: this is an
    inference engine.
    """

    embed: Mlp
    gcn_ll: np.ndarray
    gcn_lt: np.ndarray
    w_ll: np.ndarray
    w_lt: np.ndarray
    adapter_w: np.ndarray
    adapter_b: np.ndarray
    beta_ll: float = 0.5
    beta_lt: float = 0.5
    dropout: float = 0.1

    @property
    def lane_dim(self) -> int:
        return self.gcn_ll.shape[0]

    @property
    def te_dim(self) -> int:
        return self.embed.weights[0].shape[0]

    def blocks(self) -> Dict[str, np.ndarray]:
        return param_blocks(self)


def init_sgnn_params(
    rng: np.random.Generator,
    lane_dim: int = LANE_FEATURE_DIM,
    te_dim: int = TE_FEATURE_DIM,
    embed_hidden: int = DEFAULT_EMBED_HIDDEN,
    beta_ll: float = 0.5,
    beta_lt: float = 0.5,
) -> SgnnParams:
    """Deterministic uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    embed = init_mlp(rng, (te_dim, embed_hidden, te_dim))
    gcn_ll, _ = init_linear(rng, lane_dim, lane_dim)
    gcn_lt, _ = init_linear(rng, te_dim, lane_dim)
    bound_ll = 1.0 / np.sqrt(lane_dim)
    w_ll = rng.uniform(
        -bound_ll, bound_ll, size=(LL_RELATION_CLASSES, lane_dim, lane_dim)
    )
    bound_lt = 1.0 / np.sqrt(te_dim)
    w_lt = rng.uniform(
        -bound_lt, bound_lt, size=(NUM_TE_ATTRIBUTES, lane_dim, te_dim)
    )
    adapter_w, adapter_b = init_linear(rng, 2 * lane_dim, lane_dim)
    return SgnnParams(
        embed, gcn_ll, gcn_lt, w_ll, w_lt, adapter_w, adapter_b, beta_ll, beta_lt
    )


def zeros_like_sgnn_params(params: SgnnParams) -> SgnnParams:
    return SgnnParams(
        Mlp(
            [np.zeros_like(w) for w in params.embed.weights],
            [np.zeros_like(b) for b in params.embed.biases],
        ),
        np.zeros_like(params.gcn_ll),
        np.zeros_like(params.gcn_lt),
        np.zeros_like(params.w_ll),
        np.zeros_like(params.w_lt),
        np.zeros_like(params.adapter_w),
        np.zeros_like(params.adapter_b),
        params.beta_ll,
        params.beta_lt,
        params.dropout,
    )


@dataclass(frozen=True)
class LayerState:
    """Previous-layer topology confidences and TE classification scores.

    ``a_ll_prev`` is (n_l, n_l), ``a_lt_prev`` is (n_l, n_t) and ``s_t`` is
    (num_classes, n_t).  All entries lie in [0, 1] and the whole state is
    gradient-opaque.
    """

    a_ll_prev: np.ndarray
    a_lt_prev: np.ndarray
    s_t: np.ndarray

    def __post_init__(self) -> None:
        for name in ("a_ll_prev", "a_lt_prev", "s_t"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2:
                raise InvalidInputError(f"LayerState.{name} must be 2-dimensional")
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise InvalidInputError(f"LayerState.{name} entries must lie in [0, 1]")
            object.__setattr__(self, name, arr)


def initial_layer_state(
    n_lanes: int, n_tes: int, num_classes: int = NUM_TE_ATTRIBUTES
) -> LayerState:
    """Placeholder state for layer 0, where message flow is self-loop only."""
    return LayerState(
        np.zeros((n_lanes, n_lanes)),
        np.zeros((n_lanes, n_tes)),
        np.zeros((num_classes, n_tes)),
    )


def zeros_like_layer_state(state: LayerState) -> LayerState:
    return LayerState(
        np.zeros_like(state.a_ll_prev),
        np.zeros_like(state.a_lt_prev),
        np.zeros_like(state.s_t),
    )


def embed_te(q_t: np.ndarray, params: SgnnParams):
    """Two-layer MLP mapping TE queries into the lane feature space.

    Returns (embedded queries, cache); the input array is left untouched.
    """
    q_t = np.asarray(q_t, dtype=np.float64)
    if q_t.ndim != 2 or q_t.shape[1] != params.te_dim:
        raise InvalidInputError(
            f"embed_te expects (n, {params.te_dim}) queries, got {q_t.shape}"
        )
    return mlp_forward(params.embed, q_t)


def embed_te_backward(params: SgnnParams, d_out: np.ndarray, cache):
    d_q_t, grads = mlp_backward(params.embed, d_out, cache)
    return d_q_t, grads


def build_t_ll(a_prev: np.ndarray, beta_ll: float, layer_index: int) -> np.ndarray:
    """Lane-lane message-flow matrix: identity at layer 0, otherwise the
    confidence adjacency plus its transpose (backward edges), scaled, plus
    the self-loop identity."""
    a_prev = np.asarray(a_prev, dtype=np.float64)
    if a_prev.ndim != 2 or a_prev.shape[0] != a_prev.shape[1]:
        raise InvalidInputError(f"a_ll_prev must be square, got {a_prev.shape}")
    eye = np.eye(a_prev.shape[0])
    if layer_index == 0:
        return eye
    return beta_ll * (a_prev + a_prev.T) + eye


def build_t_lt(a_prev: np.ndarray, beta_lt: float, layer_index: int) -> np.ndarray:
    """Lane-TE message-flow matrix: all zeros at layer 0, otherwise the
    scaled confidence adjacency."""
    a_prev = np.asarray(a_prev, dtype=np.float64)
    if a_prev.ndim != 2:
        raise InvalidInputError(f"a_lt_prev must be 2-dimensional, got {a_prev.shape}")
    if layer_index == 0:
        return np.zeros_like(a_prev)
    return beta_lt * a_prev


def gcn_propagate(q: np.ndarray, t: np.ndarray, w: np.ndarray, activation: str = "relu"):
    """Plain graph convolution ``activation(t @ q @ w)``; returns (output,
    cache).  ``activation`` is ``"relu"`` (default) or ``"identity"``."""
    q = np.asarray(q, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if t.shape[1] != q.shape[0] or q.shape[1] != w.shape[0]:
        raise InvalidInputError(
            f"gcn_propagate shape mismatch: t {t.shape}, q {q.shape}, w {w.shape}"
        )
    if activation not in ("relu", "identity"):
        raise InvalidInputError(f"unknown activation {activation!r}")
    aggregated = t @ q
    pre = aggregated @ w
    if activation == "relu":
        out, relu_cache = relu_forward(pre)
    else:
        out, relu_cache = pre, None
    return out, (t, w, aggregated, relu_cache)


def gcn_propagate_backward(d_out: np.ndarray, cache):
    t, w, aggregated, relu_cache = cache
    d_pre = d_out if relu_cache is None else relu_backward(d_out, relu_cache)
    d_w = aggregated.T @ d_pre
    d_q = t.T @ (d_pre @ w.T)
    return d_q, d_w


def _ll_slices(state: LayerState, n_lanes: int, layer_index: int) -> np.ndarray:
    a = state.a_ll_prev
    if a.shape != (n_lanes, n_lanes):
        raise InvalidInputError(
            f"a_ll_prev shape {a.shape} does not match {n_lanes} lanes"
        )
    eye = np.eye(n_lanes)
    if layer_index == 0:
        zero = np.zeros((n_lanes, n_lanes))
        return np.stack([zero, zero, eye])
    return np.stack([a, a.T, eye])


def skg_ll_propagate(
    q_l: np.ndarray,
    state: LayerState,
    w_ll: np.ndarray,
    beta_ll: float,
    layer_index: int,
):
    """Knowledge-graph propagation over the lane graph: each lane sums
    messages from successors, predecessors and itself through per-relation
    weight matrices, scaled by edge confidence and ``beta_ll``."""
    q_l = np.asarray(q_l, dtype=np.float64)
    slices = _ll_slices(state, q_l.shape[0], layer_index)
    out = np.zeros_like(q_l)
    messages = []
    for c in range(LL_RELATION_CLASSES):
        m = slices[c] @ q_l  # aggregate neighbor queries for this relation
        messages.append(m)
        out += beta_ll * (m @ w_ll[c].T)
    return out, (slices, messages, w_ll, beta_ll)


def skg_ll_propagate_backward(d_out: np.ndarray, cache):
    slices, messages, w_ll, beta_ll = cache
    d_q_l = np.zeros((slices.shape[1], w_ll.shape[2]))
    d_w_ll = np.zeros_like(w_ll)
    for c in range(LL_RELATION_CLASSES):
        d_m = beta_ll * (d_out @ w_ll[c])
        d_w_ll[c] = beta_ll * (d_out.T @ messages[c])
        d_q_l += slices[c].T @ d_m
    return d_q_l, d_w_ll


def skg_lt_propagate(
    q_t_embedded: np.ndarray,
    state: LayerState,
    w_lt: np.ndarray,
    beta_lt: float,
    layer_index: int,
):
    """Knowledge-graph propagation over the lane-TE bipartite graph: each
    lane aggregates embedded TE queries over all attribute classes, weighted
    by edge confidence and the TE's per-class score."""
    q_t = np.asarray(q_t_embedded, dtype=np.float64)
    k = state.a_lt_prev
    s_t = state.s_t
    if k.shape[1] != q_t.shape[0]:
        raise InvalidInputError(
            f"a_lt_prev shape {k.shape} does not match {q_t.shape[0]} TE queries"
        )
    if s_t.shape != (w_lt.shape[0], q_t.shape[0]):
        raise InvalidInputError(
            f"s_t shape {s_t.shape} does not match "
            f"({w_lt.shape[0]}, {q_t.shape[0]})"
        )
    if layer_index == 0:
        k = np.zeros_like(k)
    n_l, f_l = k.shape[0], w_lt.shape[1]
    out = np.zeros((n_l, f_l))
    weighted = []
    for c in range(w_lt.shape[0]):
        kc = k * s_t[c][None, :]  # edge confidence times class score
        weighted.append(kc)
        out += beta_lt * (kc @ q_t @ w_lt[c].T)
    return out, (weighted, q_t, w_lt, beta_lt)


def skg_lt_propagate_backward(d_out: np.ndarray, cache):
    weighted, q_t, w_lt, beta_lt = cache
    d_q_t = np.zeros_like(q_t)
    d_w_lt = np.zeros_like(w_lt)
    for c in range(w_lt.shape[0]):
        kc = weighted[c]
        d_m = beta_lt * (d_out @ w_lt[c])  # gradient of kc @ q_t
        d_q_t += kc.T @ d_m
        d_w_lt[c] = beta_lt * (d_out.T @ (kc @ q_t))
    return d_q_t, d_w_lt


SG = "sg"
SKG = "skg"
VARIANTS = (SG, SKG)


@dataclass
class SgnnLayerCache:
    variant: str
    layer_index: int
    q_l: np.ndarray
    state: LayerState
    embed_cache: object
    prop_ll_cache: object
    prop_lt_cache: object
    concat_relu_cache: np.ndarray
    adapter_cache: object


def sgnn_layer(
    q_l: np.ndarray,
    q_t: np.ndarray,
    state: LayerState,
    params: SgnnParams,
    variant: str = SKG,
    layer_index: int = 0,
) -> Tuple[np.ndarray, np.ndarray, SgnnLayerCache]:
    """One full layer update.

    Returns ``(q_l_refined, q_t_embedded, cache)``.  The lane queries gain a
    residual information term distilled from both propagation paths; the TE
    queries are only embedded, never updated, so downstream TE detection
    should keep consuming the raw ``q_t``.
    """
    if variant not in VARIANTS:
        raise InvalidInputError(f"unknown variant {variant!r}")
    q_l = np.asarray(q_l, dtype=np.float64)
    f_l = params.lane_dim
    if q_l.ndim != 2 or q_l.shape[1] != f_l:
        raise InvalidInputError(
            f"sgnn_layer expects lane queries of shape (n, {f_l}), got {q_l.shape}"
        )
    q_t_embedded, embed_cache = embed_te(q_t, params)

    if variant == SG:
        t_ll = build_t_ll(state.a_ll_prev, params.beta_ll, layer_index)
        t_lt = build_t_lt(state.a_lt_prev, params.beta_lt, layer_index)
        if t_ll.shape[0] != q_l.shape[0]:
            raise InvalidInputError("a_ll_prev size does not match lane queries")
        q_prime, prop_ll_cache = gcn_propagate(q_l, t_ll, params.gcn_ll)
        q_second, prop_lt_cache = gcn_propagate(q_t_embedded, t_lt, params.gcn_lt)
    else:
        q_prime, prop_ll_cache = skg_ll_propagate(
            q_l, state, params.w_ll, params.beta_ll, layer_index
        )
        q_second, prop_lt_cache = skg_lt_propagate(
            q_t_embedded, state, params.w_lt, params.beta_lt, layer_index
        )

    concat = np.concatenate([q_prime, q_second], axis=1)
    gated, concat_relu_cache = relu_forward(concat)
    residual, adapter_cache = linear_forward(gated, params.adapter_w, params.adapter_b)
    q_l_out = q_l + residual
    cache = SgnnLayerCache(
        variant,
        layer_index,
        q_l,
        state,
        embed_cache,
        prop_ll_cache,
        prop_lt_cache,
        concat_relu_cache,
        adapter_cache,
    )
    return q_l_out, q_t_embedded, cache


def sgnn_layer_backward(
    cache: SgnnLayerCache,
    params: SgnnParams,
    d_q_l_out: np.ndarray,
    d_q_t_embedded: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, SgnnParams, LayerState]:
    """Exact reverse-mode derivatives of :func:`sgnn_layer`.

    Returns gradients for the input queries, all parameters, and the layer
    state.  State gradients are identically zero by construction: adjacency
    feedback and classification scores are not differentiated through.
    """
    grads = zeros_like_sgnn_params(params)
    f_l = params.lane_dim

    d_gated, d_adapter_w, d_adapter_b = linear_backward(d_q_l_out, cache.adapter_cache)
    grads.adapter_w += d_adapter_w
    grads.adapter_b += d_adapter_b
    d_concat = relu_backward(d_gated, cache.concat_relu_cache)
    d_q_prime = d_concat[:, :f_l]
    d_q_second = d_concat[:, f_l:]

    d_q_l = d_q_l_out.copy()  # residual path
    if cache.variant == SG:
        d_q, d_w = gcn_propagate_backward(d_q_prime, cache.prop_ll_cache)
        d_q_l += d_q
        grads.gcn_ll += d_w
        d_q_t_emb, d_w = gcn_propagate_backward(d_q_second, cache.prop_lt_cache)
        grads.gcn_lt += d_w
    else:
        d_q, d_w_ll = skg_ll_propagate_backward(d_q_prime, cache.prop_ll_cache)
        d_q_l += d_q
        grads.w_ll += d_w_ll
        d_q_t_emb, d_w_lt = skg_lt_propagate_backward(d_q_second, cache.prop_lt_cache)
        grads.w_lt += d_w_lt

    if d_q_t_embedded is not None:
        d_q_t_emb = d_q_t_emb + d_q_t_embedded
    d_q_t, embed_grads = embed_te_backward(params, d_q_t_emb, cache.embed_cache)
    for i in range(len(grads.embed.weights)):
        grads.embed.weights[i] += embed_grads.weights[i]
        grads.embed.biases[i] += embed_grads.biases[i]

    return d_q_l, d_q_t, grads, zeros_like_layer_state(cache.state)


# ---------------------------------------------------------------------------
# stacked layers with topology feedback


@dataclass
class SgnnStack:
    """A stack of network layers plus the prediction heads that close the
    feedback loop (each layer consumes the previous layer's predicted
    adjacencies and TE classification scores)."""

    layers: List[SgnnParams]
    heads: object  # heads_losses.HeadParams (imported lazily)
    variant: str = SKG
    meta: Optional[dict] = None


@dataclass
class StackOutputs:
    q_l: np.ndarray
    q_t_embedded: np.ndarray
    adj_ll: np.ndarray
    adj_lt: np.ndarray
    s_t: np.ndarray
    det: object  # heads_losses.DetectionOutputs


def init_queries(
    seed: int,
    n_lanes: int,
    n_tes: int,
    lane_dim: int = LANE_FEATURE_DIM,
    te_dim: int = TE_FEATURE_DIM,
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic standard-normal query initialization."""
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    q_l = rng.normal(size=(n_lanes, lane_dim))
    q_t = rng.normal(size=(n_tes, te_dim))
    return q_l, q_t


def init_sgnn_stack(
    seed: int,
    num_layers: int = DEFAULT_NUM_LAYERS,
    variant: str = SKG,
    lane_dim: int = LANE_FEATURE_DIM,
    te_dim: int = TE_FEATURE_DIM,
    embed_hidden: int = DEFAULT_EMBED_HIDDEN,
    topo_dim: Optional[int] = None,
    beta_ll: float = 0.5,
    beta_lt: float = 0.5,
) -> SgnnStack:
    from .heads_losses import DEFAULT_TOPO_DIM, init_head_params

    if num_layers < 1:
        raise InvalidInputError("an SGNN stack needs at least one layer")
    if topo_dim is None:
        topo_dim = DEFAULT_TOPO_DIM
    rng = np.random.default_rng(seed)
    layers = [
        init_sgnn_params(rng, lane_dim, te_dim, embed_hidden, beta_ll, beta_lt)
        for _ in range(num_layers)
    ]
    heads = init_head_params(rng, lane_dim, te_dim, topo_dim)
    meta = {
        "seed": seed,
        "num_layers": num_layers,
        "variant": variant,
        "lane_dim": lane_dim,
        "te_dim": te_dim,
        "embed_hidden": embed_hidden,
        "topo_dim": topo_dim,
        "beta_ll": beta_ll,
        "beta_lt": beta_lt,
    }
    return SgnnStack(layers, heads, variant, meta)


def stack_blocks(stack: SgnnStack) -> Dict[str, np.ndarray]:
    blocks: Dict[str, np.ndarray] = {}
    for i, layer in enumerate(stack.layers):
        for name, arr in layer.blocks().items():
            blocks[f"sgnn.{i}.{name}"] = arr
    for name, arr in stack.heads.blocks().items():
        blocks[f"heads.{name}"] = arr
    return blocks


def save_stack(path, stack: SgnnStack) -> None:
    from .scene_io import save_tensors

    meta = dict(stack.meta or {})
    meta["variant"] = stack.variant
    meta["num_layers"] = len(stack.layers)
    save_tensors(path, stack_blocks(stack), meta)


def load_stack(path) -> SgnnStack:
    from .scene_io import ParseError, load_tensors

    blocks, meta = load_tensors(path)
    required = ("num_layers", "lane_dim", "te_dim", "embed_hidden", "topo_dim")
    for key in required:
        if key not in meta:
            raise ParseError(f"checkpoint meta is missing {key!r}")
    template = init_sgnn_stack(
        seed=int(meta.get("seed", 0)),
        num_layers=int(meta["num_layers"]),
        variant=str(meta.get("variant", SKG)),
        lane_dim=int(meta["lane_dim"]),
        te_dim=int(meta["te_dim"]),
        embed_hidden=int(meta["embed_hidden"]),
        topo_dim=int(meta["topo_dim"]),
        beta_ll=float(meta.get("beta_ll", 0.5)),
        beta_lt=float(meta.get("beta_lt", 0.5)),
    )
    template.meta = meta
    expected = stack_blocks(template)
    if set(expected) != set(blocks):
        missing = sorted(set(expected) - set(blocks))
        extra = sorted(set(blocks) - set(expected))
        raise ParseError(
            f"checkpoint tensors do not match the meta dims "
            f"(missing {missing[:3]}, unexpected {extra[:3]})"
        )
    for name, arr in expected.items():
        if arr.shape != blocks[name].shape:
            raise ParseError(
                f"tensor {name} has shape {blocks[name].shape}, expected {arr.shape}"
            )
        np.copyto(arr, blocks[name])
    return template


def run_sgnn_stack(
    stack: SgnnStack,
    q_l: np.ndarray,
    q_t: np.ndarray,
    variant: Optional[str] = None,
    num_layers: Optional[int] = None,
    norm=None,
    image_size=None,
) -> StackOutputs:
    """Run the layer stack with topology feedback.

    Layer 0 propagates over self-loops only; afterwards each layer consumes
    the previous layer's predicted adjacencies and TE scores (all inferred
    without gradients).  TE detection reads the raw, un-embedded ``q_t``.
    """
    from .heads_losses import (
        BevNormalization,
        DEFAULT_IMAGE_SIZE,
        detection_heads,
        topology_head,
    )
    from .nn import sigmoid

    variant = variant or stack.variant
    layers = stack.layers if num_layers is None else stack.layers[:num_layers]
    if num_layers is not None and num_layers > len(stack.layers):
        raise InvalidInputError(
            f"requested {num_layers} layers but the checkpoint holds {len(stack.layers)}"
        )
    if not layers:
        raise InvalidInputError("an SGNN stack needs at least one layer")
    norm = norm or BevNormalization()
    image_size = image_size or DEFAULT_IMAGE_SIZE

    q_l = np.asarray(q_l, dtype=np.float64)
    q_t = np.asarray(q_t, dtype=np.float64)
    state = initial_layer_state(q_l.shape[0], q_t.shape[0])
    q_t_embedded = q_t
    adj_ll = state.a_ll_prev
    adj_lt = state.a_lt_prev
    s_t = state.s_t
    for i, params in enumerate(layers):
        q_l, q_t_embedded, _ = sgnn_layer(q_l, q_t, state, params, variant, i)
        adj_ll, _ = topology_head(q_l, q_l, stack.heads.topo_ll)
        adj_lt, _ = topology_head(q_l, q_t_embedded, stack.heads.topo_lt)
        te_logits = q_t @ stack.heads.te_cls_w + stack.heads.te_cls_b
        s_t = sigmoid(te_logits).T
        state = LayerState(adj_ll, adj_lt, s_t)
    det, _ = detection_heads(q_l, q_t, stack.heads, norm, image_size)
    return StackOutputs(q_l, q_t_embedded, adj_ll, adj_lt, s_t, det)


def sgnn_layer_kink_margin(cache: SgnnLayerCache) -> float:
    """Smallest |preactivation| at any ReLU in the layer (finite-difference
    instances must keep this well above the probe step)."""
    from .nn import nonzero_min_abs

    margin = mlp_min_preactivation_margin(cache.embed_cache)
    if cache.variant == SG:
        for prop_cache in (cache.prop_ll_cache, cache.prop_lt_cache):
            if prop_cache[3] is not None:
                margin = min(margin, nonzero_min_abs(prop_cache[3]))
    margin = min(margin, nonzero_min_abs(cache.concat_relu_cache))
    return margin
