import numpy as np
import pytest

from lanetopo.core import InvalidInputError
from lanetopo.gradcheck import check_sgnn_layer
from lanetopo.sgnn import (
    LayerState,
    SgnnParams,
    build_t_ll,
    build_t_lt,
    embed_te,
    gcn_propagate,
    init_queries,
    init_sgnn_params,
    init_sgnn_stack,
    initial_layer_state,
    run_sgnn_stack,
    sgnn_layer,
    sgnn_layer_backward,
    skg_ll_propagate,
    skg_lt_propagate,
)

from oracles import embed_loops, gcn_loops, sgnn_layer_loops, skg_ll_loops, skg_lt_loops

F = 6
N_L, N_T = 4, 3


def small_params(seed=0, beta_ll=0.5, beta_lt=0.5) -> SgnnParams:
    rng = np.random.default_rng(seed)
    p = init_sgnn_params(rng, F, F, 2 * F, beta_ll, beta_lt)
    return p


def random_state(seed=1) -> LayerState:
    rng = np.random.default_rng(seed)
    return LayerState(
        rng.uniform(0, 1, (N_L, N_L)),
        rng.uniform(0, 1, (N_L, N_T)),
        rng.uniform(0, 1, (13, N_T)),
    )


# ---------------------------------------------------------------------------
# embedding


def test_embed_zero_input_zero_biases():
    p = small_params()
    p.embed.biases[0][:] = 0.0
    p.embed.biases[1][:] = 0.0
    out, _ = embed_te(np.zeros((2, F)), p)
    assert np.array_equal(out, np.zeros((2, F)))


def test_embed_identity_construction():
    p = small_params()
    h = p.embed.weights[0].shape[1]
    # first layer embeds the input in the positive orthant, second undoes it
    p.embed.weights[0][:] = 0.0
    p.embed.weights[0][:F, :F] = np.eye(F)
    p.embed.biases[0][:] = 0.0
    p.embed.biases[0][:F] = 10.0  # keep ReLU active
    p.embed.weights[1][:] = 0.0
    p.embed.weights[1][:F, :F] = np.eye(F)
    p.embed.biases[1][:] = -10.0
    q = np.abs(np.random.default_rng(2).normal(size=(1, F))) + 0.1
    out, _ = embed_te(q, p)
    assert np.allclose(out, q, atol=1e-12)


def test_embed_matches_loop_oracle():
    p = small_params(seed=5)
    q = np.random.default_rng(6).normal(size=(N_T, F))
    out, _ = embed_te(q, p)
    ref = embed_loops(
        q, p.embed.weights[0], p.embed.biases[0], p.embed.weights[1], p.embed.biases[1]
    )
    assert np.allclose(out, ref, atol=1e-12)


def test_embed_leaves_input_untouched():
    p = small_params()
    q = np.random.default_rng(0).normal(size=(N_T, F))
    before = q.copy()
    embed_te(q, p)
    assert np.array_equal(q, before)


def test_embed_shape_mismatch():
    with pytest.raises(InvalidInputError):
        embed_te(np.zeros((2, F + 1)), small_params())


# ---------------------------------------------------------------------------
# message-flow matrices


def test_t_ll_layer_zero_identity():
    a = np.random.default_rng(0).uniform(0, 1, (4, 4))
    assert np.array_equal(build_t_ll(a, 0.5, 0), np.eye(4))


def test_t_ll_beta_zero_identity_every_layer():
    a = np.random.default_rng(0).uniform(0, 1, (4, 4))
    for layer in (1, 2, 5):
        assert np.array_equal(build_t_ll(a, 0.0, layer), np.eye(4))


def test_t_ll_single_edge():
    a = np.zeros((2, 2))
    a[0, 1] = 1.0
    t = build_t_ll(a, 0.5, 1)
    assert t[0, 1] == 0.5 and t[1, 0] == 0.5
    assert t[0, 0] == 1.0 and t[1, 1] == 1.0


def test_t_ll_requires_square():
    with pytest.raises(InvalidInputError):
        build_t_ll(np.zeros((2, 3)), 0.5, 1)


def test_t_lt_layer_zero_and_scaling():
    a = np.full((2, 3), 0.8)
    assert np.array_equal(build_t_lt(a, 0.5, 0), np.zeros((2, 3)))
    assert np.allclose(build_t_lt(a, 0.5, 1), np.full((2, 3), 0.4))
    assert np.array_equal(build_t_lt(np.zeros((2, 3)), 0.5, 1), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# propagation kernels


def test_gcn_identity_chain():
    q = np.abs(np.random.default_rng(1).normal(size=(3, F)))
    out, _ = gcn_propagate(q, np.eye(3), np.eye(F))
    assert np.allclose(out, q)


def test_gcn_zero_flow():
    q = np.random.default_rng(1).normal(size=(3, F))
    out, _ = gcn_propagate(q, np.zeros((3, 3)), np.eye(F))
    assert np.array_equal(out, np.zeros_like(q))


def test_gcn_matches_loop_oracle():
    rng = np.random.default_rng(4)
    q = rng.normal(size=(4, 8))
    t = rng.uniform(0, 1, (4, 4))
    w = rng.normal(size=(8, 8))
    out, _ = gcn_propagate(q, t, w)
    assert np.allclose(out, gcn_loops(q, t, w), atol=1e-12)


def test_gcn_shape_mismatch():
    with pytest.raises(InvalidInputError):
        gcn_propagate(np.zeros((3, F)), np.zeros((2, 2)), np.eye(F))


def test_gcn_identity_activation_option():
    rng = np.random.default_rng(17)
    q = rng.normal(size=(3, F))
    t = rng.uniform(0, 1, (3, 3))
    w = rng.normal(size=(F, F))
    out, _ = gcn_propagate(q, t, w, activation="identity")
    assert np.allclose(out, t @ q @ w, atol=1e-12)
    assert out.min() < 0.0  # no clipping happened
    with pytest.raises(InvalidInputError):
        gcn_propagate(q, t, w, activation="tanh")


def test_skg_ll_zero_adjacency_self_loop_only():
    p = small_params()
    rng = np.random.default_rng(7)
    q = rng.normal(size=(N_L, F))
    state = LayerState(np.zeros((N_L, N_L)), np.zeros((N_L, N_T)), np.zeros((13, N_T)))
    out, _ = skg_ll_propagate(q, state, p.w_ll, 1.0, 1)
    assert np.allclose(out, q @ p.w_ll[2].T, atol=1e-12)


def test_skg_ll_chain_edge_roles():
    p = small_params()
    rng = np.random.default_rng(8)
    q = rng.normal(size=(2, F))
    a = np.zeros((2, 2))
    a[0, 1] = 1.0  # lane 0's successor is lane 1
    state = LayerState(a, np.zeros((2, N_T)), np.zeros((13, N_T)))
    out, _ = skg_ll_propagate(q, state, p.w_ll, 1.0, 1)
    w_succ, w_pred, w_self = p.w_ll
    assert np.allclose(out[0], q[1] @ w_succ.T + q[0] @ w_self.T, atol=1e-12)
    assert np.allclose(out[1], q[0] @ w_pred.T + q[1] @ w_self.T, atol=1e-12)


def test_skg_ll_matches_loop_oracle():
    p = small_params(seed=9)
    rng = np.random.default_rng(10)
    q = rng.normal(size=(N_L, F))
    state = random_state(11)
    out, _ = skg_ll_propagate(q, state, p.w_ll, 0.5, 1)
    ref = skg_ll_loops(q, state.a_ll_prev, p.w_ll, 0.5, 1)
    assert np.allclose(out, ref, atol=1e-12)


def test_skg_lt_zero_cases():
    p = small_params()
    rng = np.random.default_rng(12)
    q_t = rng.normal(size=(N_T, F))
    state = random_state(13)
    out0, _ = skg_lt_propagate(q_t, state, p.w_lt, 0.5, 0)
    assert np.array_equal(out0, np.zeros((N_L, F)))
    zero_state = LayerState(
        np.zeros((N_L, N_L)), np.zeros((N_L, N_T)), state.s_t
    )
    out, _ = skg_lt_propagate(q_t, zero_state, p.w_lt, 0.5, 1)
    assert np.allclose(out, np.zeros((N_L, F)))


def test_skg_lt_single_term():
    p = small_params()
    rng = np.random.default_rng(14)
    q_t = rng.normal(size=(1, F))
    s_t = np.zeros((13, 1))
    c = 4
    s_t[c, 0] = 1.0
    state = LayerState(np.zeros((1, 1)), np.ones((1, 1)), s_t)
    out, _ = skg_lt_propagate(q_t, state, p.w_lt, 0.5, 1)
    assert np.allclose(out[0], 0.5 * (q_t[0] @ p.w_lt[c].T), atol=1e-12)


def test_skg_lt_matches_loop_oracle():
    p = small_params(seed=15)
    rng = np.random.default_rng(16)
    q_t = rng.normal(size=(2, F))
    state = LayerState(
        np.zeros((3, 3)),
        rng.uniform(0, 1, (3, 2)),
        rng.uniform(0, 1, (13, 2)),
    )
    out, _ = skg_lt_propagate(q_t, state, p.w_lt, 0.5, 1)
    ref = skg_lt_loops(q_t, state.a_lt_prev, state.s_t, p.w_lt, 0.5, 1)
    assert np.allclose(out, ref, atol=1e-12)


# ---------------------------------------------------------------------------
# full layer


def layer_inputs(seed=20):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(N_L, F)), rng.normal(size=(N_T, F))


def test_layer_matches_straight_line_oracle():
    for variant in ("sg", "skg"):
        for layer_index in (0, 1):
            p = small_params(seed=21)
            q_l, q_t = layer_inputs(22)
            state = random_state(23)
            out_l, out_t, _ = sgnn_layer(q_l, q_t, state, p, variant, layer_index)
            ref_l, ref_t = sgnn_layer_loops(
                q_l, q_t, state.a_ll_prev, state.a_lt_prev, state.s_t,
                p, variant, layer_index,
            )
            assert np.allclose(out_l, ref_l, atol=1e-12), (variant, layer_index)
            assert np.allclose(out_t, ref_t, atol=1e-12)


def test_layer_residual_baseline_degeneration():
    # betas at zero and the lane-lane GCN chosen to cancel: the update is
    # exactly the adapter-bias path added to the input queries
    p = small_params(beta_ll=0.0, beta_lt=0.0)
    p.adapter_b[:] = 0.0
    p.gcn_ll[:] = 0.0  # self-loop flow times zero weight: no residual signal
    q_l, q_t = layer_inputs(24)
    state = random_state(25)
    out_l, _, _ = sgnn_layer(q_l, q_t, state, p, "sg", 1)
    assert np.allclose(out_l, q_l, atol=1e-12)


def test_layer_locality_skg():
    # an isolated lane's refined query ignores every other lane
    p = small_params(seed=26)
    q_l, q_t = layer_inputs(27)
    a_ll = np.zeros((N_L, N_L))
    a_ll[1, 2] = 0.9  # edges among other lanes only
    a_lt = np.zeros((N_L, N_T))
    a_lt[1, 0] = 0.8
    state = LayerState(a_ll, a_lt, random_state(28).s_t)
    out, _, _ = sgnn_layer(q_l, q_t, state, p, "skg", 1)
    bumped = q_l.copy()
    bumped[1] += 3.0
    bumped[2] -= 1.0
    out2, _, _ = sgnn_layer(bumped, q_t, state, p, "skg", 1)
    assert np.array_equal(out[0], out2[0])
    assert not np.allclose(out[1], out2[1])


def test_layer_permutation_equivariance():
    p = small_params(seed=29)
    q_l, q_t = layer_inputs(30)
    state = random_state(31)
    perm = np.array([2, 0, 3, 1])
    state_p = LayerState(
        state.a_ll_prev[np.ix_(perm, perm)],
        state.a_lt_prev[perm],
        state.s_t,
    )
    for variant in ("sg", "skg"):
        out, _, _ = sgnn_layer(q_l, q_t, state, p, variant, 1)
        out_p, _, _ = sgnn_layer(q_l[perm], q_t, state_p, p, variant, 1)
        assert np.allclose(out_p, out[perm], atol=1e-12)


def test_layer_beta_linearity_skg():
    # without activations inside the knowledge-graph propagation, the
    # propagated terms are exactly linear in beta
    q_l, q_t = layer_inputs(32)
    state = random_state(33)
    p = small_params(seed=34)
    out1, _ = skg_ll_propagate(q_l, state, p.w_ll, 0.25, 1)
    out2, _ = skg_ll_propagate(q_l, state, p.w_ll, 0.5, 1)
    assert np.allclose(out2, 2.0 * out1, atol=1e-12)
    lt1, _ = skg_lt_propagate(q_t, state, p.w_lt, 0.25, 1)
    lt2, _ = skg_lt_propagate(q_t, state, p.w_lt, 0.5, 1)
    assert np.allclose(lt2, 2.0 * lt1, atol=1e-12)
    # the SG flow matrix splits into the identity plus a beta-linear part
    t1 = build_t_ll(state.a_ll_prev, 0.25, 1) - np.eye(N_L)
    t2 = build_t_ll(state.a_ll_prev, 0.5, 1) - np.eye(N_L)
    assert np.allclose(t2, 2.0 * t1, atol=1e-12)


def test_sg_beta_zero_equals_self_loop_gcn():
    p = small_params(beta_ll=0.0, beta_lt=0.0)
    q_l, q_t = layer_inputs(35)
    state = random_state(36)
    out_l, out_t, _ = sgnn_layer(q_l, q_t, state, p, "sg", 3)
    self_only, _ = gcn_propagate(q_l, np.eye(N_L), p.gcn_ll)
    via_t, _ = gcn_propagate(q_l, build_t_ll(state.a_ll_prev, 0.0, 3), p.gcn_ll)
    assert np.allclose(via_t, self_only, atol=1e-12)


def test_layer_variant_validation():
    p = small_params()
    q_l, q_t = layer_inputs()
    with pytest.raises(InvalidInputError):
        sgnn_layer(q_l, q_t, random_state(), p, "bogus", 0)
    with pytest.raises(InvalidInputError):
        sgnn_layer(q_l[:, :3], q_t, random_state(), p, "sg", 0)


# ---------------------------------------------------------------------------
# gradients


def test_backward_zero_upstream_gives_zero_grads():
    p = small_params(seed=40)
    q_l, q_t = layer_inputs(41)
    state = random_state(42)
    _, _, cache = sgnn_layer(q_l, q_t, state, p, "skg", 1)
    d_q_l, d_q_t, grads, _ = sgnn_layer_backward(
        cache, p, np.zeros((N_L, F)), np.zeros((N_T, F))
    )
    assert not d_q_l.any() and not d_q_t.any()
    for arr in grads.blocks().values():
        assert not arr.any()


def test_backward_linear_subpath_closed_form():
    # positive inputs and identity-like weights keep every ReLU active, so
    # the residual path gradient is the exact matrix chain
    p = small_params(seed=43)
    rng = np.random.default_rng(44)
    q_l = np.abs(rng.normal(size=(2, F))) + 0.5
    q_t = np.abs(rng.normal(size=(2, F))) + 0.5
    state = LayerState(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((13, 2)))
    upstream = rng.normal(size=(2, F))
    _, _, cache = sgnn_layer(q_l, q_t, state, p, "skg", 1)
    d_q_l, _, grads, _ = sgnn_layer_backward(cache, p, upstream, None)
    # adapter bias gradient: the upstream summed over rows (pure linear tail)
    assert np.allclose(grads.adapter_b, upstream.sum(axis=0), atol=1e-12)
    # residual path passes upstream through unchanged plus the propagation term
    concat_grad = (upstream @ p.adapter_w.T) * (cache.concat_relu_cache > 0)
    d_self = 0.5 * (concat_grad[:, :F] @ p.w_ll[2])
    assert np.allclose(d_q_l, upstream + d_self, atol=1e-12)


@pytest.mark.parametrize("variant", ["sg", "skg"])
def test_finite_difference_both_variants(variant):
    errors, state_zero = check_sgnn_layer(seed=0, variant=variant)
    assert state_zero
    assert max(errors.values()) < 1e-4


# ---------------------------------------------------------------------------
# stack


def test_stack_runs_and_is_deterministic():
    stack = init_sgnn_stack(seed=3, num_layers=3, lane_dim=F, te_dim=F,
                            embed_hidden=2 * F, topo_dim=4)
    q_l, q_t = init_queries(3, N_L, N_T, F, F)
    out1 = run_sgnn_stack(stack, q_l, q_t)
    out2 = run_sgnn_stack(stack, q_l, q_t)
    assert np.array_equal(out1.q_l, out2.q_l)
    assert np.array_equal(out1.adj_ll, out2.adj_ll)
    assert out1.adj_ll.shape == (N_L, N_L)
    assert out1.adj_lt.shape == (N_L, N_T)
    assert out1.s_t.shape == (13, N_T)
    assert ((out1.adj_ll > 0) & (out1.adj_ll < 1)).all()


def test_stack_layer_count_guard():
    stack = init_sgnn_stack(seed=3, num_layers=2, lane_dim=F, te_dim=F,
                            embed_hidden=2 * F, topo_dim=4)
    q_l, q_t = init_queries(3, N_L, N_T, F, F)
    with pytest.raises(InvalidInputError):
        run_sgnn_stack(stack, q_l, q_t, num_layers=5)


def test_initial_layer_state_shapes():
    state = initial_layer_state(4, 2)
    assert state.a_ll_prev.shape == (4, 4)
    assert state.a_lt_prev.shape == (4, 2)
    assert state.s_t.shape == (13, 2)
