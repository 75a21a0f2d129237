import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modgnn import graphcomm as gc
from modgnn.model import (
    DECENTRALIZED,
    ConcatInput,
    Identity,
    Linear,
    ModelConfig,
    Pointwise,
    SubmoduleSet,
    build_model,
    forward_layer,
    gcn_forward,
    load_model,
    model_forward,
    node_update,
    save_model,
)
from modgnn.numkit import ContractError, ShapeError, Tensor, as_tensor

from .oracles import finite_difference_check, gcn_dense, loop_mlp, loop_node_update, random_graph


def identity_set(K):
    return SubmoduleSet(ConcatInput(), gc.LaplacianCom(), [Identity()] * (K + 1), [Identity()] * (K + 1), Identity())


def gcn_wiring(taps, activation="tanh"):
    f_mid = []
    for A in taps:
        lin = Linear(A.shape[0], A.shape[1])
        lin.weight.data = np.array(A)
        f_mid.append(lin)
    K = len(taps) - 1
    return SubmoduleSet(ConcatInput(), gc.LaplacianCom(), [Identity()] * (K + 1), f_mid, Pointwise(activation))


def swarm(rng, n, d=6):
    return rng.normal(size=(n, d)), random_graph(rng, n)


# -- node_update ------------------------------------------------------------


def test_identity_node_update_sums_everything():
    a, b, c = [1.0, 2.0], [3.0, -1.0], [0.5, 0.5]
    z = gc.NeighborhoodData.from_sets([[a], [b, c]])
    assert node_update(z, identity_set(1)).data.tolist() == [4.5, 1.5]


def test_negated_zero_sum_set():
    s = identity_set(1)
    s.f_pre = [Identity(), lambda x: -x]
    z = gc.NeighborhoodData.from_sets([[[0.0, 0.0]], [[-2.0, 0.0], [1.0, 1.0], [1.0, -1.0]]])
    assert node_update(z, s).data.tolist() == [0.0, 0.0]


def test_empty_hop_contributes_zero():
    z = gc.NeighborhoodData.from_sets([[[1.0, 2.0]], []])
    assert node_update(z, identity_set(1)).data.tolist() == [1.0, 2.0]


def test_hop_count_mismatch():
    z = gc.NeighborhoodData.from_sets([[[1.0]], [[2.0]]])
    with pytest.raises(ShapeError):
        node_update(z, identity_set(2))


def test_unequal_fmid_widths_rejected():
    s = identity_set(1)
    s.f_mid = [Identity(), Linear(2, 3)]
    z = gc.NeighborhoodData.from_sets([[[1.0, 0.0]], [[0.0, 1.0]]])
    with pytest.raises(ShapeError):
        node_update(z, s)


def test_gcn_wiring_matches_dense_oracle():
    rng = np.random.default_rng(0)
    X, adj = swarm(rng, 5)
    taps = [rng.normal(size=(6, 3)) for _ in range(3)]
    z = gc.aggregate_khop_centralized(X, adj, 2, gc.LaplacianCom())
    np.testing.assert_allclose(node_update(z, gcn_wiring(taps)).data, gcn_dense(X, adj, taps), atol=1e-10, rtol=0)


def test_single_agent_matches_batched_rows():
    rng = np.random.default_rng(1)
    X, adj = swarm(rng, 6)
    model = build_model(ModelConfig(K=2, seed=3))
    s = model.layers[0]
    z = gc.aggregate_khop_centralized(X, adj, 2, s.f_com)
    batched = node_update(z, s).data
    for i in range(6):
        single = gc.NeighborhoodData.from_sets(z.agent_sets(i))
        np.testing.assert_allclose(node_update(single, s).data, batched[i], atol=1e-12)


# -- DeepSets form ------------------------------------------------------------


def test_output_ignores_order_within_a_hop():
    model = build_model(ModelConfig(K=1, seed=5))
    s = model.layers[0]
    rng = np.random.default_rng(2)
    own, members = rng.normal(size=(1, 6)), rng.normal(size=(4, 6))
    base = node_update(gc.NeighborhoodData.from_sets([own, members]), s).data
    for perm in ([3, 1, 0, 2], [1, 0, 3, 2]):
        out = node_update(gc.NeighborhoodData.from_sets([own, members[perm]]), s).data
        np.testing.assert_allclose(out, base, atol=1e-14)


def test_output_depends_only_on_fpre_sum():
    # with linear f_pre, {a, b} and {a + b} have equal f_pre sums
    s = identity_set(1)
    lin = Linear(2, 2, seed=1)
    s.f_pre = [Identity(), lin]
    s.f_mid = [Identity(), lambda h: h.tanh()]
    a, b = np.array([0.3, -1.2]), np.array([2.0, 0.7])
    split = node_update(gc.NeighborhoodData.from_sets([[[0.0, 0.0]], [a, b]]), s).data
    merged = node_update(gc.NeighborhoodData.from_sets([[[0.0, 0.0]], [a + b]]), s).data
    np.testing.assert_allclose(split, merged, atol=1e-12)


# -- forward_layer ------------------------------------------------------------


def test_edgeless_identity_layer_returns_observation():
    obs = np.random.default_rng(0).normal(size=(4, 6))
    out = forward_layer(identity_set(2), [obs], np.zeros((4, 4), dtype=bool))
    np.testing.assert_array_equal(out.data, obs)


def test_forward_layer_permutes_with_agents():
    rng = np.random.default_rng(4)
    obs, adj = swarm(rng, 6)
    s = build_model(ModelConfig(K=2, seed=2)).layers[0]
    perm = rng.permutation(6)
    base = forward_layer(s, [obs], adj).data
    moved = forward_layer(s, [obs[perm]], adj[np.ix_(perm, perm)]).data
    np.testing.assert_allclose(moved, base[perm], atol=1e-12)


@pytest.mark.parametrize("variant", DECENTRALIZED)
def test_delayed_matches_centralized_after_warmup(variant):
    rng = np.random.default_rng(6)
    obs, adj = swarm(rng, 5)
    model = build_model(ModelConfig(variant=variant, K=2, seed=1))
    caches = model.reset_caches(5)
    for _ in range(3):
        out, caches = model.step_delayed(obs, adj, caches)
    np.testing.assert_array_equal(out.data, model(obs, adj).data)


def test_delayed_mode_needs_cache():
    with pytest.raises(ContractError):
        forward_layer(identity_set(1), [np.zeros((2, 6))], np.zeros((2, 2), bool), mode="delayed")


def test_multi_layer_sees_all_previous_outputs():
    model = build_model(ModelConfig(K=1, L=2, seed=0))
    first, second = model.layers
    assert first.f_pre[0].spec.layer_widths[0] == 6
    assert second.f_pre[0].spec.layer_widths[0] == 6 + 10
    obs, adj = swarm(np.random.default_rng(0), 4)
    outs = model.forward_all(obs, adj)
    assert [o.shape for o in outs] == [(4, 6), (4, 10), (4, 3)]


# -- gcn_forward -----------------------------------------------------------------


def test_gcn_identity_tap_returns_input():
    X = np.random.default_rng(0).normal(size=(4, 3))
    out = gcn_forward(X, gc.laplacian_gso(np.zeros((4, 4), bool)), [np.eye(3)], "identity")
    np.testing.assert_array_equal(out.data, X)


def test_gcn_zero_input():
    S = gc.laplacian_gso(random_graph(np.random.default_rng(0), 5))
    out = gcn_forward(np.zeros((5, 2)), S, [np.ones((2, 4))] * 3, "tanh")
    assert np.array_equal(out.data, np.zeros((5, 4)))


def test_gcn_forward_matches_node_update_wiring():
    rng = np.random.default_rng(11)
    X, adj = swarm(rng, 6, d=4)
    taps = [rng.normal(size=(4, 2)) for _ in range(4)]
    dense = gcn_forward(X, gc.laplacian_gso(adj), taps).data
    z = gc.aggregate_khop_centralized(X, adj, 3, gc.LaplacianCom())
    np.testing.assert_allclose(node_update(z, gcn_wiring(taps)).data, dense, atol=1e-10, rtol=0)


def test_gcn_tap_widths_must_agree():
    with pytest.raises(ShapeError):
        gcn_forward(np.ones((2, 2)), np.zeros((2, 2)), [np.ones((2, 3)), np.ones((2, 4))])


@given(st.integers(1, 8), st.integers(0, 3), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_gcn_model_equals_dense_formula(n, K, seed):
    rng = np.random.default_rng(seed)
    obs, adj = swarm(rng, n)
    model = build_model(ModelConfig(variant="gcn", K=K, seed=seed % 1000))
    taps = [m.weight.data for m in model.layers[0].f_mid]
    np.testing.assert_allclose(model(obs, adj).data, gcn_dense(obs, adj, taps), atol=1e-10, rtol=0)


# -- build_model ---------------------------------------------------------------


def mlp_params(widths):
    return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))


def test_modgnn_mlp_parameter_count():
    model = build_model(ModelConfig(variant="modgnn_mlp", K=2))
    expected = 3 * mlp_params([6, 32, 32, 10]) + 3 * mlp_params([10, 32, 32, 10]) + mlp_params([10, 32, 32, 3])
    assert expected == 11551
    assert sum(p.data.size for p in model.parameters()) == expected


def test_ablation_differs_only_in_fpre():
    full = {n: p.shape for n, p in build_model(ModelConfig(variant="modgnn_mlp")).named_parameters()}
    ablated = {n: p.shape for n, p in build_model(ModelConfig(variant="modgnn_mlp_no_fpre")).named_parameters()}
    assert set(full) - set(ablated) == {n for n in full if ".f_pre." in n}
    assert set(ablated) <= set(full)
    # f_mid now reads raw 6-D sums instead of 10-D messages
    reshaped = {n for n in ablated if ablated[n] != full[n]}
    assert reshaped == {f"layer0.f_mid.k{k}.W0" for k in range(3)}


def test_no_fmid_has_no_fmid_parameters():
    names = [n for n, _ in build_model(ModelConfig(variant="modgnn_mlp_no_fmid")).named_parameters()]
    assert not any(".f_mid." in n for n in names)


def test_gcn_ffinal_wiring():
    model = build_model(ModelConfig(variant="gcn_ffinal", K=1))
    layer = model.layers[0]
    assert all(isinstance(f, Identity) for f in layer.f_pre)
    assert [m.weight.shape for m in layer.f_mid] == [(6, 10), (6, 10)]
    assert layer.f_final.spec.layer_widths == (10, 32, 32, 3)


def test_central_widths_for_32_agents():
    model = build_model(ModelConfig(variant="central", n_agents=32))
    widths = model.mlp.spec.layer_widths
    assert widths[0] == 192 and widths[-1] == 96
    assert model.mlp.spec.n_layers == 4


def test_shared_hops_reuse_parameters():
    model = build_model(ModelConfig(K=3, share_hops=True))
    layer = model.layers[0]
    assert all(f is layer.f_pre[0] for f in layer.f_pre)
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names)) == 6 * 3


def test_unknown_variant():
    with pytest.raises(ContractError):
        ModelConfig(variant="transformer")


def test_init_is_seeded():
    a = build_model(ModelConfig(seed=4)).parameters()
    b = build_model(ModelConfig(seed=4)).parameters()
    c = build_model(ModelConfig(seed=5)).parameters()
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a, b))
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a, c))


# -- model_forward -----------------------------------------------------------------


@pytest.mark.parametrize("variant", DECENTRALIZED + ("central",))
def test_zero_parameters_give_zero_actions(variant):
    model = build_model(ModelConfig(variant=variant, n_agents=5))
    for p in model.parameters():
        p.data[...] = 0.0
    obs, adj = swarm(np.random.default_rng(0), 5)
    assert not model_forward(model, obs, adj).data.any()


def test_central_ignores_graph_and_checks_size():
    model = build_model(ModelConfig(variant="central", n_agents=4))
    obs, adj = swarm(np.random.default_rng(1), 4)
    np.testing.assert_array_equal(model(obs, adj).data, model(obs, np.zeros((4, 4), bool)).data)
    with pytest.raises(ContractError):
        model(np.zeros((5, 6)), None)


def test_observation_width_checked():
    with pytest.raises(ShapeError):
        build_model(ModelConfig())(np.zeros((3, 5)), np.zeros((3, 3), bool))


def test_mirrored_swarm_negates_higher_hops():
    rng = np.random.default_rng(8)
    X, adj = swarm(rng, 6)
    z = gc.aggregate_khop_centralized(X, adj, 3, gc.LaplacianCom())
    zm = gc.aggregate_khop_centralized(-X, adj, 3, gc.LaplacianCom())
    for k in range(4):
        np.testing.assert_allclose(zm.sums()[k], -z.sums()[k], atol=1e-12)
    # a zero first-hop sum is blind to the mirror image
    star = np.zeros((4, 4), dtype=bool)
    star[0, 1:] = star[1:, 0] = True
    pos = np.array([[0.0, 0.0], [2.0, 0.0], [-1.0, -1.0], [-1.0, 1.0]])
    for sign in (1.0, -1.0):
        sums = gc.aggregate_khop_centralized(sign * pos, star, 1, gc.LaplacianCom()).sums()
        assert sums[1][0].tolist() == [0.0, 0.0]


def test_modgnn_mlp_matches_loop_oracle():
    rng = np.random.default_rng(12)
    obs, adj = swarm(rng, 5)
    model = build_model(ModelConfig(K=2, seed=9))
    s = model.layers[0]

    def row_fn(mlp):
        return lambda v: loop_mlp(mlp.spec, mlp.params, v)[0]

    expected = loop_node_update(obs, adj, [row_fn(m) for m in s.f_pre], [row_fn(m) for m in s.f_mid], row_fn(s.f_final))
    np.testing.assert_allclose(model(obs, adj).data, expected, atol=1e-8, rtol=0)


def test_batched_forward_matches_per_frame():
    rng = np.random.default_rng(3)
    obs = rng.normal(size=(3, 5, 6))
    adj = np.stack([random_graph(rng, 5) for _ in range(3)])
    model = build_model(ModelConfig(K=2, seed=1))
    batched = model(obs, adj).data
    for b in range(3):
        np.testing.assert_allclose(batched[b], model(obs[b], adj[b]).data, atol=1e-12)


# -- equivariance and information loss ---------------------------------------------


@pytest.mark.parametrize("variant", DECENTRALIZED)
def test_permutation_equivariance(variant):
    rng = np.random.default_rng(hash(variant) % 2**32)
    model = build_model(ModelConfig(variant=variant, K=2, seed=4))
    for _ in range(10):
        n = int(rng.integers(2, 9))
        obs, adj = swarm(rng, n)
        perm = rng.permutation(n)
        base = model(obs, adj).data
        moved = model(obs[perm], adj[np.ix_(perm, perm)]).data
        assert np.abs(moved - base[perm]).max() < 1e-9


def star_swarm(sign):
    pos = np.zeros((4, 6))
    pos[1:, :2] = sign * np.array([[-2.0, 0.0], [1.0, 1.0], [1.0, -1.0]])
    adj = np.zeros((4, 4), dtype=bool)
    adj[0, 1:] = adj[1:, 0] = True
    return pos, adj


def agent0_gap(model):
    a = model(*star_swarm(1.0)).data[0]
    b = model(*star_swarm(-1.0)).data[0]
    return np.abs(a - b).max()


@pytest.mark.parametrize("variant", ["modgnn_mlp_no_fpre", "gcn", "gcn_ffinal"])
def test_identity_fpre_cannot_tell_mirror_sets_apart(variant):
    assert agent0_gap(build_model(ModelConfig(variant=variant, seed=3))) < 1e-12


def test_mlp_fpre_tells_mirror_sets_apart():
    gaps = [agent0_gap(build_model(ModelConfig(variant="modgnn_mlp", seed=s))) for s in range(10)]
    assert sum(g > 1e-6 for g in gaps) >= 9


# -- gradients and persistence -------------------------------------------------------


@pytest.mark.parametrize("variant", DECENTRALIZED + ("central",))
def test_gradients_match_finite_differences(variant):
    rng = np.random.default_rng(0)
    cfg = ModelConfig(variant=variant, K=1, hidden=4, msg_width=3, n_agents=3, seed=2)
    model = build_model(cfg)
    obs, adj = swarm(rng, 3)
    target = rng.normal(size=(3, 3))

    def loss_fn():
        d = model(obs, adj) - target
        return (d * d).mean()

    assert finite_difference_check(loss_fn, model.parameters()) < 1e-4


@pytest.mark.parametrize("variant", DECENTRALIZED + ("central",))
def test_save_and_load_round_trip(variant, tmp_path):
    model = build_model(ModelConfig(variant=variant, seed=7))
    path = tmp_path / "m.json"
    save_model(path, model, {"note": "x"})
    loaded, header = load_model(path)
    assert header["model_variant"] == variant and header["note"] == "x"
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), loaded.named_parameters()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
    obs, adj = swarm(np.random.default_rng(0), 8)
    np.testing.assert_array_equal(loaded(obs, adj).data, model(obs, adj).data)
