"""Forward-pass contracts of the autoencoder and classifier variant."""

import numpy as np
import pytest

from pointveil import model as M
from pointveil.data import FrameGrid
from pointveil.graph import build_temporal_graph
from pointveil.losses import LossWeights
from pointveil.util import seeded_rng

CFG = M.ModelConfig(d_h=4, d_m=4, d_k=2, d_v=2, heads=2, d_z=4, k=2, seed=0)


def zero_params(cfg=CFG, num_classes=None):
    params = (M.init_classifier(cfg, num_classes, dtype=np.float64) if num_classes
              else M.init_autoencoder(cfg, dtype=np.float64))
    return params.zeros_like()


def random_grid(seed=0, f=4, p=3):
    rng = seeded_rng(seed, "model-grid")
    return FrameGrid(rng.normal(0, 0.4, size=(f, p, 3)).astype(np.float32), 1, 2)


def relu(x):
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# encode_nodes


def test_encode_zero_params_zero_features():
    coords = np.ones((5, 3))
    out = M.encode_nodes(coords, zero_params())
    np.testing.assert_array_equal(out, np.zeros((5, 4)))


def test_encode_hand_computed():
    params = zero_params()
    w1 = np.arange(12, dtype=np.float64).reshape(3, 4) / 10
    b1 = np.array([0.1, -0.2, 0.3, -5.0])
    w2 = np.eye(4)
    params["enc.w1"] = w1
    params["enc.b1"] = b1
    params["enc.w2"] = w2
    x = np.array([[1.0, -2.0, 0.5]])
    expected = relu(relu(x @ w1 + b1) @ w2)
    np.testing.assert_allclose(M.encode_nodes(x, params), expected, atol=1e-12)


def test_encode_per_node_independence_under_permutation():
    params = M.init_autoencoder(CFG, dtype=np.float64)
    coords = seeded_rng(1, "enc").normal(size=(6, 3))
    perm = np.array([3, 1, 5, 0, 2, 4])
    np.testing.assert_allclose(M.encode_nodes(coords, params)[perm],
                               M.encode_nodes(coords[perm], params), atol=1e-12)


# ---------------------------------------------------------------------------
# generate_messages


def test_messages_equal_features_give_zero_difference_half():
    grid = random_grid(2)
    graph = build_temporal_graph(grid, 1)
    params = zero_params()
    params["msg.w1"] = np.vstack([np.eye(4), 2 * np.eye(4)])  # picks h_i and diff
    params["msg.w2"] = np.eye(4)
    h = np.tile(np.array([[0.5, 1.0, -1.0, 2.0]]), (grid.n_points, 1))
    m = M.generate_messages(graph, h, params)
    expected = relu(relu(h[graph.edges[:, 1]] @ np.eye(4)))  # diff half is zero
    np.testing.assert_allclose(m, expected, atol=1e-12)


def test_messages_single_edge_hand_computed():
    coords = np.zeros((2, 1, 3), dtype=np.float32)
    coords[1, 0] = [1, 0, 0]
    grid = FrameGrid(coords, 0, 0)
    graph = build_temporal_graph(grid, 1)
    assert graph.edges.tolist() == [[0, 1]]
    params = zero_params()
    rng = seeded_rng(3, "msg")
    params["msg.w1"] = rng.normal(size=(8, 4))
    params["msg.b1"] = rng.normal(size=4)
    params["msg.w2"] = rng.normal(size=(4, 4))
    params["msg.b2"] = rng.normal(size=4)
    h = np.array([[1.0, 2.0, 3.0, 4.0], [0.5, -1.0, 0.0, 2.0]])
    m = M.generate_messages(graph, h, params)
    x = np.concatenate([h[1], h[0] - h[1]])
    expected = relu(relu(x @ params["msg.w1"] + params["msg.b1"]) @ params["msg.w2"]
                    + params["msg.b2"])
    np.testing.assert_allclose(m[0], expected, rtol=1e-10)


def test_messages_zero_weights_constant_bias():
    grid = random_grid(4)
    graph = build_temporal_graph(grid, 2)
    params = zero_params()
    params["msg.b2"] = np.array([0.5, -1.0, 2.0, 0.0])
    h = seeded_rng(5, "msg0").normal(size=(grid.n_points, 4))
    m = M.generate_messages(graph, h, params)
    np.testing.assert_allclose(m, np.tile(relu(params["msg.b2"]), (graph.n_edges, 1)),
                               atol=1e-12)


# ---------------------------------------------------------------------------
# aggregate_attention


def attention_setup(grid, k=2):
    graph = build_temporal_graph(grid, k)
    params = M.init_autoencoder(CFG, dtype=np.float64)
    rng = seeded_rng(6, "attn")
    h = rng.normal(size=(grid.n_points, 4))
    m = rng.normal(size=(graph.n_edges, 4))
    return graph, params, h, m


def test_attention_equal_keys_uniform_weights():
    grid = random_grid(7)
    graph, params, h, m = attention_setup(grid)
    m = np.tile(m[:1], (graph.n_edges, 1))  # identical messages -> identical keys
    params["attn.out"] = np.eye(4)
    z = M.aggregate_attention(graph, h, m, params, CFG)
    deg = graph.in_degrees()
    # uniform softmax: z = mean of values = value of the shared message
    for b, lo in ((0, 0), (1, 2)):
        v = m[0] @ params[f"attn.v{b}"]
        for i in range(grid.n_points):
            if deg[i] > 0:
                np.testing.assert_allclose(z[i, lo:lo + 2], v, atol=1e-10)
            else:
                np.testing.assert_allclose(z[i, lo:lo + 2], 0.0, atol=1e-12)


def test_attention_single_edge_passes_value_through():
    coords = np.zeros((2, 1, 3), dtype=np.float32)
    coords[1, 0] = [0.3, 0, 0]
    grid = FrameGrid(coords, 0, 0)
    graph, params, h, m = attention_setup(grid, k=1)
    params["attn.out"] = np.eye(4)
    z = M.aggregate_attention(graph, h, m, params, CFG)
    expected = np.concatenate([m[0] @ params["attn.v0"], m[0] @ params["attn.v1"]])
    np.testing.assert_allclose(z[1], expected, atol=1e-10)
    np.testing.assert_allclose(z[0], 0.0, atol=1e-12)  # no incoming edge


def test_attention_softmax_numeric_logits_gap():
    # two edges with logits 10 and 0 at scaling sqrt(d_k) = 1
    cfg = M.ModelConfig(d_h=4, d_m=4, d_k=1, d_v=2, heads=2, d_z=4, k=2, seed=0)
    coords = np.zeros((2, 2, 3), dtype=np.float32)
    coords[0, 1] = [1, 0, 0]
    coords[1, 0] = [0.2, 0, 0]
    coords[1, 1] = [0.8, 0, 0]
    grid = FrameGrid(coords, 0, 0)
    graph = build_temporal_graph(grid, 2)
    params = M.init_autoencoder(cfg, dtype=np.float64).zeros_like()
    params["attn.q0"] = np.array([[1.0], [0.0], [0.0], [0.0]])
    params["attn.k0"] = np.array([[1.0], [0.0], [0.0], [0.0]])
    params["attn.v0"] = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    params["attn.out"] = np.eye(4)
    h = np.zeros((4, 4))
    h[2] = [1, 0, 0, 0]  # query of node 2 picks logit = m[:, 0]
    edges = graph.edges
    incoming2 = np.flatnonzero(edges[:, 1] == 2)
    m = np.zeros((graph.n_edges, 4))
    m[incoming2[0]] = [10.0, 1.0, 2.0, 0.0]
    m[incoming2[1]] = [0.0, 3.0, 4.0, 0.0]
    z = M.aggregate_attention(graph, h, m, params, cfg)
    a = np.exp(10.0) / (np.exp(10.0) + 1.0)
    expected = a * np.array([1.0, 2.0]) + (1 - a) * np.array([3.0, 4.0])
    np.testing.assert_allclose(z[2, :2], expected, rtol=1e-9)
    assert a == pytest.approx(0.9999546, abs=1e-6)


def test_attention_rows_sum_to_one_many_random_graphs():
    rng = seeded_rng(8, "attn-sums")
    for trial in range(100):
        f, p = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        grid = FrameGrid(rng.normal(0, 1, size=(f, p, 3)).astype(np.float32), 0, 0)
        graph = build_temporal_graph(grid, int(rng.choice([1, 2, 3])))
        params = M.init_autoencoder(CFG, dtype=np.float64)
        h = rng.normal(size=(grid.n_points, 4))
        m = rng.normal(size=(graph.n_edges, 4))
        # the hard normalization assertion lives inside the implementation
        M.aggregate_attention(graph, h, m, params, CFG)


# ---------------------------------------------------------------------------
# update_nodes / pooling / decode


def test_update_zero_weights_bias_rows():
    params = zero_params()
    params["upd.b2"] = np.array([1.0, -2.0, 0.5, 0.0])
    h = seeded_rng(9, "upd").normal(size=(5, 4))
    z = seeded_rng(10, "upd").normal(size=(5, 4))
    out = M.update_nodes(h, z, params)
    np.testing.assert_allclose(out, np.tile(relu(params["upd.b2"]), (5, 1)), atol=1e-12)


def test_update_hand_computed_and_permutation():
    params = zero_params()
    rng = seeded_rng(11, "upd2")
    params["upd.w1"] = rng.normal(size=(8, 4))
    params["upd.b1"] = rng.normal(size=4)
    params["upd.w2"] = rng.normal(size=(4, 4))
    params["upd.b2"] = rng.normal(size=4)
    h = rng.normal(size=(6, 4))
    z = rng.normal(size=(6, 4))
    out = M.update_nodes(h, z, params)
    x = np.concatenate([h, z], axis=1)
    expected = relu(relu(x @ params["upd.w1"] + params["upd.b1"]) @ params["upd.w2"]
                    + params["upd.b2"])
    np.testing.assert_allclose(out, expected, rtol=1e-10)
    perm = rng.permutation(6)
    np.testing.assert_allclose(M.update_nodes(h[perm], z[perm], params), out[perm],
                               rtol=1e-10)


def test_global_max_pool():
    np.testing.assert_array_equal(M.global_max_pool(np.array([[1.0, 5.0], [3.0, 2.0]])),
                                  [3.0, 5.0])
    rows = seeded_rng(12, "pool").normal(size=(7, 3))
    perm = seeded_rng(13, "pool").permutation(7)
    np.testing.assert_array_equal(M.global_max_pool(rows), M.global_max_pool(rows[perm]))
    np.testing.assert_array_equal(M.global_max_pool(rows[:1]), rows[0])


def test_decode_zero_weights_gives_bias_everywhere():
    params = zero_params()
    params["dec.b2"] = np.array([0.25, -0.5, 1.0])
    out = M.decode(seeded_rng(14, "dec").normal(size=(6, 3)), np.zeros(4), params)
    np.testing.assert_allclose(out, np.tile([0.25, -0.5, 1.0], (6, 1)), atol=1e-12)


def test_decode_point_count_and_hand_computed():
    params = zero_params()
    rng = seeded_rng(15, "dec2")
    params["dec.w1"] = rng.normal(size=(7, 4))
    params["dec.b1"] = rng.normal(size=4)
    params["dec.w2"] = rng.normal(size=(4, 3))
    params["dec.b2"] = rng.normal(size=3)
    coords = rng.normal(size=(9, 3))
    h_max = rng.normal(size=4)
    out = M.decode(coords, h_max, params)
    assert out.shape == (9, 3)
    x = np.concatenate([coords, np.tile(h_max, (9, 1))], axis=1)
    expected = relu(x @ params["dec.w1"] + params["dec.b1"]) @ params["dec.w2"] \
        + params["dec.b2"]
    np.testing.assert_allclose(out, expected, rtol=1e-10)


# ---------------------------------------------------------------------------
# full forward


def test_autoencoder_zero_params_constant_cloud():
    params = zero_params()
    params["dec.b2"] = np.array([1.0, 2.0, 3.0])
    out = M.autoencoder_forward(random_grid(16), params.astype(np.float32), CFG)
    np.testing.assert_allclose(out.coords.reshape(-1, 3),
                               np.tile([1.0, 2.0, 3.0], (12, 1)), atol=1e-6)


def test_autoencoder_deterministic_and_carries_labels():
    grid = random_grid(17)
    params = M.init_autoencoder(CFG)
    a = M.autoencoder_forward(grid, params, CFG)
    b = M.autoencoder_forward(grid, params, CFG)
    np.testing.assert_array_equal(a.coords, b.coords)
    assert (a.subject, a.gesture) == (grid.subject, grid.gesture)
    assert a.coords.shape == grid.coords.shape


def test_autoencoder_canonical_shape_32x32():
    rng = seeded_rng(18, "big")
    grid = FrameGrid(rng.normal(0, 0.3, size=(32, 32, 3)).astype(np.float32), 0, 0)
    cfg = M.ModelConfig(d_h=8, d_m=8, d_k=2, d_v=2, heads=4, d_z=8, k=2, seed=0)
    out = M.autoencoder_forward(grid, M.init_autoencoder(cfg), cfg)
    assert out.coords.shape == (32, 32, 3)


def test_autoencoder_matches_composed_public_ops():
    grid = random_grid(19)
    params = M.init_autoencoder(CFG, dtype=np.float64)
    graph = build_temporal_graph(grid, CFG.k)
    h = M.encode_nodes(grid.node_coords().astype(np.float64), params)
    m = M.generate_messages(graph, h, params)
    z = M.aggregate_attention(graph, h, m, params, CFG)
    h2 = M.update_nodes(h, z, params)
    pooled = M.global_max_pool(h2)
    manual = M.decode(grid.node_coords().astype(np.float64), pooled, params)
    auto = M.autoencoder_forward(grid, params, CFG)
    np.testing.assert_allclose(auto.coords.reshape(-1, 3), manual, rtol=1e-5, atol=1e-6)


def test_permuting_within_frames_permutes_outputs():
    grid = random_grid(20, f=3, p=5)
    params = M.init_autoencoder(CFG, dtype=np.float64)
    rng = seeded_rng(21, "perm")
    perm_frames = np.stack([rng.permutation(5) for _ in range(3)])
    permuted = FrameGrid(
        np.stack([grid.coords[f][perm_frames[f]] for f in range(3)]),
        grid.subject, grid.gesture)
    base = M.autoencoder_forward(grid, params, CFG).coords
    perm_out = M.autoencoder_forward(permuted, params, CFG).coords
    for f in range(3):
        np.testing.assert_allclose(perm_out[f], base[f][perm_frames[f]],
                                   rtol=1e-4, atol=1e-5)


# ---------------------------------------------------------------------------
# classifier


def test_classify_probabilities_normalized():
    grid = random_grid(22)
    for n_classes in (6, 8):
        params = M.init_classifier(CFG, n_classes)
        probs = M.classify(grid, params, CFG)
        assert probs.shape == (n_classes,)
        assert abs(probs.sum() - 1.0) < 1e-6
        assert np.all(probs > 0)


def test_classify_normalization_tight_float64():
    grid = random_grid(23)
    params = M.init_classifier(CFG, 5, dtype=np.float64)
    probs = M.classify(grid, params, CFG)
    assert abs(probs.sum() - 1.0) < 1e-9


def test_classify_frozen_params_identical_probs():
    grid = random_grid(24)
    params = M.init_classifier(CFG, 4)
    np.testing.assert_array_equal(M.classify(grid, params, CFG),
                                  M.classify(grid, params, CFG))


def test_classify_without_head_rejected():
    grid = random_grid(25)
    with pytest.raises(M.ConfigurationError, match="head"):
        M.classify(grid, M.init_autoencoder(CFG), CFG)


def test_batch_matches_single_forward():
    grids = [random_grid(s) for s in (26, 27, 28)]
    params = M.init_autoencoder(CFG)
    batch_out = M.autoencode_batch(grids, params, CFG)
    for g, got in zip(grids, batch_out):
        single = M.autoencoder_forward(g, params, CFG)
        np.testing.assert_allclose(got.coords, single.coords, rtol=1e-4, atol=1e-6)
    cls = M.init_classifier(CFG, 5)
    probs = M.classify_batch(grids, cls, CFG)
    for g, row in zip(grids, probs):
        np.testing.assert_allclose(row, M.classify(g, cls, CFG), rtol=1e-4, atol=1e-6)


# ---------------------------------------------------------------------------
# gradients-level contracts


def test_chamfer_gradient_zero_on_identical_reconstruction():
    grids = [random_grid(29)]
    params = M.init_autoencoder(CFG, dtype=np.float64)
    batch = M.make_graph_batch(grids, CFG, dtype=np.float64)
    pt = M._as_param_tensors(params, True)
    out = M._autoencoder_output(batch, pt, CFG)
    loss = M._chamfer_loss(out, out.data.copy(), batch)  # target == output
    assert float(loss.data) == 0.0
    loss.backward()
    for name in params.names:
        grad = pt[name].grad
        if grad is not None:
            np.testing.assert_array_equal(grad, np.zeros_like(grad))


def test_gate_zero_bitwise_equals_gamma_zero():
    grids = [random_grid(30), random_grid(31)]
    ae = M.init_autoencoder(CFG, dtype=np.float64)
    g_cls = M.init_classifier(CFG, 4, dtype=np.float64)
    u_cls = M.init_classifier(M.ModelConfig(d_h=4, d_m=4, d_k=2, d_v=2, heads=2,
                                            d_z=4, k=2, seed=1), 3, dtype=np.float64)
    w_gate = LossWeights(alpha=1.0, beta=2.0, gamma=1.0, delta=2.0, tau=0.5)
    w_g0 = LossWeights(alpha=1.0, beta=2.0, gamma=0.0, delta=2.0, tau=0.5)
    la, ga, _ = M.gradients(grids, ae, CFG, M.LOSS_COMBINED, weights=w_gate,
                            gate_accuracy=0.2, g_params=g_cls, g_cfg=CFG,
                            u_params=u_cls, u_cfg=CFG)
    lb, gb, _ = M.gradients(grids, ae, CFG, M.LOSS_COMBINED, weights=w_g0,
                            gate_accuracy=0.9, g_params=g_cls, g_cfg=CFG,
                            u_params=u_cls, u_cfg=CFG)
    assert la == lb
    for name in ae.names:
        np.testing.assert_array_equal(ga[name], gb[name])


def test_gradients_rejects_unknown_selector():
    with pytest.raises(M.ConfigurationError, match="selector"):
        M.gradients([random_grid(32)], M.init_autoencoder(CFG), CFG, "nope")


def test_message_count_equals_edge_count():
    grid = random_grid(33, f=5, p=4)
    graph = build_temporal_graph(grid, 3)
    params = M.init_autoencoder(CFG, dtype=np.float64)
    h = M.encode_nodes(grid.node_coords().astype(np.float64), params)
    m = M.generate_messages(graph, h, params)
    assert m.shape[0] == graph.n_edges


# ---------------------------------------------------------------------------
# parameter serialization


def test_params_roundtrip_bit_exact(tmp_path):
    params = M.init_autoencoder(CFG)
    p1, p2 = tmp_path / "a.params", tmp_path / "b.params"
    params.save(str(p1))
    loaded = M.ModelParams.load(str(p1))
    loaded.save(str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.names == params.names
    for name in params.names:
        np.testing.assert_array_equal(loaded[name], params[name])


def test_params_checksum_tracks_change():
    params = M.init_classifier(CFG, 3)
    before = params.checksum()
    assert params.checksum() == before
    params["head.b"] = params["head.b"] + 1.0
    assert params.checksum() != before


def test_params_bad_magic_rejected():
    with pytest.raises(M.ConfigurationError, match="magic"):
        M.ModelParams.from_bytes(b"XXXX" + b"\0" * 16)


def test_check_params_match_detects_wrong_layout():
    params = M.init_classifier(CFG, 3)
    with pytest.raises(M.ConfigurationError):
        M.check_params_match(params, CFG, num_classes=None)


def test_config_validation():
    with pytest.raises(M.ConfigurationError, match="d_z"):
        M.ModelConfig(d_h=4, d_m=4, d_k=2, d_v=3, heads=2, d_z=4, k=2)
    with pytest.raises(M.ConfigurationError, match="mutually exclusive"):
        M.ModelConfig(no_temporal_edges=True, no_temporal_knn=True)
