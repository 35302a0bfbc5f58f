import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamgnn import autodiff as ad
from beamgnn.gnn import ARCHS, GnnModel, GraphBatch, ModelConfig, make_batch

TINY = dict(in_dim=5, hidden=6, layers=2, heads=(2, 1), activation="silu")


def _graph(rng, n=7, extra=4):
    """Random connected graph: a path plus a few chords."""
    e = [(i, i + 1) for i in range(n - 1)]
    while len(e) < n - 1 + extra:
        a, b = sorted(rng.choice(n, 2, replace=False))
        if (a, b) not in e:
            e.append((int(a), int(b)))
    return np.array(e), rng.normal(size=(n, TINY["in_dim"]))


def _randomise(model, rng):
    for v in model.params.values():
        v[...] = rng.normal(scale=0.5, size=v.shape)


def _bind_const(model, tape):
    P = {k: tape.constant(v) for k, v in model.params.items()}
    P["_tape"] = tape
    return P


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(arch="sage")
    with pytest.raises(ValueError):
        ModelConfig(layers=3, heads=(4, 4))
    with pytest.raises(ValueError):
        ModelConfig(activation="tanh")
    assert ModelConfig(arch="GraphTransformer").arch == "transformer"
    cfg = ModelConfig(arch="gat", **TINY)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_batch_has_no_cross_graph_edges(rng):
    edges, x = _graph(rng)
    b = make_batch([x, x, x], edges)
    graph = np.searchsorted(b.offsets, np.arange(b.n_nodes), side="right") - 1
    assert np.array_equal(graph[b.src], graph[b.dst])
    assert b.src.max() < b.n_nodes and len(b.src) == 3 * 2 * len(edges)


def test_encoder_matches_dense_oracle(rng):
    model = GnnModel(ModelConfig(arch="gcn", **TINY), seed=1)
    x = rng.normal(size=(4, TINY["in_dim"]))
    tape = ad.Tape()
    h = model.encoder(_bind_const(model, tape), tape.constant(x)).value
    z = x @ model.params["enc.W"].T + model.params["enc.b"]
    np.testing.assert_allclose(h, z / (1 + np.exp(-z)), rtol=1e-14)


def test_encoder_zero_input_zero_bias():
    model = GnnModel(ModelConfig(arch="gcn", **TINY), seed=1)
    tape = ad.Tape()
    h = model.encoder(_bind_const(model, tape), tape.constant(np.zeros((3, TINY["in_dim"])))).value
    assert np.all(h == 0.0)  # silu(0) = 0


def test_param_count_tiny_mpnn_by_hand():
    d, H = 5, 6
    enc = d * H + H
    edge = (2 * H * H + H) + (H * H + H)
    node = (2 * H * H + H) + (H * H + H)
    dec = ((H + 3) * H + H) + (H * 3 + 3)
    model = GnnModel(ModelConfig(arch="mpnn", in_dim=d, hidden=H, layers=2, heads=(1, 1)))
    assert model.param_count() == enc + 2 * (edge + node) + dec


def test_param_count_ordering_at_default_width():
    counts = {a: GnnModel(ModelConfig(arch=a, in_dim=16, hidden=128, layers=3, heads=(4, 4, 1))).param_count()
              for a in ARCHS}
    assert counts["transformer"] > counts["gat"] > counts["mpnn"] > counts["gcn"]


def _identity_layer(model, name, n):
    model.params[f"{name}.W"][...] = np.eye(n)
    model.params[f"{name}.b"][...] = 0.0


def test_gcn_two_node_path_by_hand():
    cfg = ModelConfig(arch="gcn", in_dim=2, hidden=2, layers=1, heads=(1,), activation="relu")
    model = GnnModel(cfg)
    _identity_layer(model, "proc0", 2)
    h = np.array([[1.0, 2.0], [3.0, 5.0]])
    b = make_batch([h], np.array([[0, 1]]))
    tape = ad.Tape()
    out = model.layers[0](_bind_const(model, tape), tape.constant(h), b).value
    # both degrees 1, so every c_vu = sqrt(2 * 2) = 2
    np.testing.assert_allclose(out, np.array([[2.0, 3.5], [2.0, 3.5]]), rtol=1e-15)


def test_gcn_isolated_node_is_self_loop_only():
    cfg = ModelConfig(arch="gcn", in_dim=2, hidden=2, layers=1, heads=(1,), activation="relu")
    model = GnnModel(cfg)
    _identity_layer(model, "proc0", 2)
    h = np.array([[1.0, -2.0], [3.0, 5.0], [7.0, 0.5]])
    b = make_batch([h], np.array([[0, 1]]))
    tape = ad.Tape()
    out = model.layers[0](_bind_const(model, tape), tape.constant(h), b).value
    np.testing.assert_allclose(out[2], [7.0, 0.5])


def test_gcn_end_to_end_by_hand(rng):
    cfg = ModelConfig(arch="gcn", in_dim=4, hidden=3, layers=1, heads=(1,), activation="relu")
    model = GnnModel(cfg, seed=2)
    _randomise(model, rng)
    P = model.params
    x = rng.normal(size=(3, 4))
    x[:, :3] = rng.uniform(-1, 1, size=(3, 3))
    b = make_batch([x], np.array([[0, 1], [1, 2]]))
    relu = lambda z: np.maximum(z, 0)
    h0 = relu(x @ P["enc.W"].T + P["enc.b"])
    deg = np.array([1, 2, 1])
    A = np.zeros((3, 3))
    for v, u in [(0, 0), (1, 1), (2, 2), (0, 1), (1, 0), (1, 2), (2, 1)]:
        A[v, u] = 1 / np.sqrt((deg[v] + 1) * (deg[u] + 1))
    h1 = relu(A @ (h0 @ P["proc0.W"].T) + P["proc0.b"])
    z = relu(np.hstack([h1, x[:, :3]]) @ P["dec.0.W"].T + P["dec.0.b"])
    expect = z @ P["dec.1.W"].T + P["dec.1.b"]
    np.testing.assert_allclose(model.predict(b), expect, rtol=1e-12)


@pytest.mark.parametrize("arch", ["gat", "transformer"])
def test_attention_rows_sum_to_one(arch, rng):
    model = GnnModel(ModelConfig(arch=arch, **TINY), seed=3)
    _randomise(model, rng)
    edges, x = _graph(rng, n=9)
    b = make_batch([x], edges)
    tape = ad.Tape()
    P = _bind_const(model, tape)
    h = model.encoder(P, tape.constant(x))
    alpha, *rest = model.layers[0].attention(P, h, b)
    dst = rest[-1]
    sums = np.zeros((b.n_nodes, alpha.shape[1]))
    np.add.at(sums, dst, alpha.value)
    np.testing.assert_allclose(sums, 1.0, atol=1e-12)


def test_gat_identical_neighbours_uniform():
    model = GnnModel(ModelConfig(arch="gat", **TINY), seed=0)
    x = np.tile(np.arange(5.0), (4, 1))
    b = make_batch([x], np.array([[0, 1], [0, 2], [0, 3]]))
    tape = ad.Tape()
    P = _bind_const(model, tape)
    alpha, _, src, dst = model.layers[0].attention(P, model.encoder(P, tape.constant(x)), b)
    np.testing.assert_allclose(alpha.value[dst == 0], 0.25, atol=1e-15)


def test_gat_three_node_star_by_hand():
    cfg = ModelConfig(arch="gat", in_dim=2, hidden=2, layers=1, heads=(1,), activation="relu")
    model = GnnModel(cfg)
    model.params["proc0.W"][...] = np.eye(2)
    model.params["proc0.att_dst"][...] = [[1.0, 0.0]]
    model.params["proc0.att_src"][...] = [[0.0, 1.0]]
    model.params["proc0.b"][...] = 0.0
    h = np.array([[1.0, 0.0], [0.0, 2.0], [0.0, -1.0]])
    b = make_batch([h], np.array([[0, 1], [0, 2]]))
    tape = ad.Tape()
    out = model.layers[0](_bind_const(model, tape), tape.constant(h), b).value
    lrelu = lambda z: np.where(z > 0, z, 0.2 * z)
    e = lrelu(np.array([1 + 0.0, 1 + 2.0, 1 - 1.0]))  # centre scores vs self, node 1, node 2
    a = np.exp(e) / np.exp(e).sum()
    np.testing.assert_allclose(out[0], np.maximum(a @ h, 0), rtol=1e-14)


def test_transformer_zero_query_is_uniform(rng):
    model = GnnModel(ModelConfig(arch="transformer", **TINY), seed=0)
    model.params["proc0.query.W"][...] = 0.0
    model.params["proc0.query.b"][...] = 0.0
    edges, x = _graph(rng)
    b = make_batch([x], edges)
    tape = ad.Tape()
    P = _bind_const(model, tape)
    alpha, src, dst = model.layers[0].attention(P, model.encoder(P, tape.constant(x)), b)
    deg = np.bincount(dst, minlength=b.n_nodes)
    np.testing.assert_allclose(alpha.value, (1.0 / deg[dst])[:, None] * np.ones((1, 2)), atol=1e-15)


def test_transformer_two_node_by_hand():
    cfg = ModelConfig(arch="transformer", in_dim=2, hidden=2, layers=1, heads=(1,), activation="relu")
    model = GnnModel(cfg)
    for k in ("query", "key", "value", "skip"):
        model.params[f"proc0.{k}.W"][...] = np.eye(2) if k != "skip" else 0.0
        model.params[f"proc0.{k}.b"][...] = 0.0
    h = np.array([[1.0, 2.0], [0.5, -1.0]])
    b = make_batch([h], np.array([[0, 1]]))
    tape = ad.Tape()
    out = model.layers[0](_bind_const(model, tape), tape.constant(h), b).value
    s = np.array([h[0] @ h[0], h[0] @ h[1]]) / np.sqrt(2)
    a = np.exp(s) / np.exp(s).sum()
    np.testing.assert_allclose(out[0], np.maximum(a[0] * h[0] + a[1] * h[1], 0), rtol=1e-14)


def test_mpnn_no_neighbours(rng):
    model = GnnModel(ModelConfig(arch="mpnn", **TINY), seed=0)
    _randomise(model, rng)
    h = rng.normal(size=(2, 6))
    b = GraphBatch(np.zeros((2, 5)), np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
    tape = ad.Tape()
    P = _bind_const(model, tape)
    layer = model.layers[0]
    out = layer(P, tape.constant(h), b).value
    expect = h + layer.node(P, tape.constant(np.hstack([h, np.zeros((2, 6))]))).value
    np.testing.assert_allclose(out, expect, rtol=1e-14)


def test_mpnn_two_node_by_hand(rng):
    model = GnnModel(ModelConfig(arch="mpnn", in_dim=2, hidden=2, layers=1, heads=(1,), activation="relu"))
    _randomise(model, rng)
    P = model.params
    h = np.array([[0.3, -0.7], [1.1, 0.4]])
    b = make_batch([h], np.array([[0, 1]]))
    tape = ad.Tape()
    out = model.layers[0](_bind_const(model, tape), tape.constant(h), b).value
    relu = lambda z: np.maximum(z, 0)
    mlp = lambda pre, z: relu(z @ P[f"{pre}.0.W"].T + P[f"{pre}.0.b"]) @ P[f"{pre}.1.W"].T + P[f"{pre}.1.b"]
    m01 = mlp("proc0.edge", np.hstack([h[0], h[1]]))  # message into 0 from 1
    m10 = mlp("proc0.edge", np.hstack([h[1], h[0]]))
    expect = np.stack([h[0] + mlp("proc0.node", np.hstack([h[0], m01])),
                       h[1] + mlp("proc0.node", np.hstack([h[1], m10]))])
    np.testing.assert_allclose(out, expect, rtol=1e-13)


def test_mpnn_duplicate_edge_doubles_message(rng):
    model = GnnModel(ModelConfig(arch="mpnn", **TINY), seed=0)
    _randomise(model, rng)
    h = rng.normal(size=(2, 6))
    tape = ad.Tape()
    P = _bind_const(model, tape)
    layer = model.layers[0]
    agg = lambda b: (b.aggregation() @ layer.messages(P, tape.constant(h), b).value)
    one = agg(make_batch([np.zeros((2, 5))], np.array([[0, 1]])))
    two = agg(make_batch([np.zeros((2, 5))], np.array([[0, 1], [0, 1]])))
    np.testing.assert_allclose(two, 2 * one, rtol=1e-14)


@pytest.mark.parametrize("arch", ARCHS)
@settings(max_examples=5, deadline=None)
@given(seed=st.integers(0, 1000))
def test_permutation_equivariance(arch, seed):
    rng = np.random.default_rng(seed)
    model = GnnModel(ModelConfig(arch=arch, **TINY), seed=seed)
    _randomise(model, rng)
    edges, x = _graph(rng)
    perm = rng.permutation(len(x))
    inv = np.argsort(perm)
    y = model.predict(make_batch([x], edges))
    y_p = model.predict(make_batch([x[perm]], inv[edges]))
    np.testing.assert_allclose(y_p, y[perm], rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("arch", ARCHS)
def test_batch_invariance(arch, rng):
    model = GnnModel(ModelConfig(arch=arch, **TINY), seed=5)
    _randomise(model, rng)
    edges, x1 = _graph(rng)
    x2 = rng.normal(size=x1.shape)
    both = model.predict(make_batch([x1, x2], edges))
    np.testing.assert_allclose(both[:7], model.predict(make_batch([x1], edges)), rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(both[7:], model.predict(make_batch([x2], edges)), rtol=1e-12, atol=1e-14)
    same = model.predict(make_batch([x1, x1], edges))
    assert np.array_equal(same[:7], same[7:])


@pytest.mark.parametrize("arch", ARCHS)
def test_field_decoder_consistent_at_nodes(arch, rng):
    model = GnnModel(ModelConfig(arch=arch, **TINY), seed=6)
    edges, x = _graph(rng)
    b = make_batch([x], edges)
    tape = ad.Tape()
    P = _bind_const(model, tape)
    out, h = model.forward(P, b, return_latent=True)
    jet = model.decode_field_jet(P, ad.Jet2(h), ad.Jet2(tape.constant(b.pos)))
    assert np.array_equal(jet.v.value, out.value)


def test_zero_decoder_gives_zero_field(rng):
    model = GnnModel(ModelConfig(arch="mpnn", **TINY), seed=0)
    for k in model.params:
        if k.startswith("dec."):
            model.params[k][...] = 0.0
    edges, x = _graph(rng)
    assert np.all(model.predict(make_batch([x], edges)) == 0.0)


def test_decoder_position_jet_vs_fd(rng):
    model = GnnModel(ModelConfig(arch="gcn", **TINY), seed=8)
    _randomise(model, rng)
    lat = rng.normal(size=(3, 6))
    pos = rng.uniform(-1, 1, size=(3, 3))

    def value(p):
        tape = ad.Tape()
        P = _bind_const(model, tape)
        return model.decode(P, tape.constant(lat), tape.constant(p)).value

    tape = ad.Tape()
    P = _bind_const(model, tape)
    lanes = [tape.constant(np.tile(np.eye(3)[k], (3, 1))) for k in range(3)]
    jet = model.decode_field_jet(P, ad.Jet2(tape.constant(lat)), ad.Jet2(tape.constant(pos), lanes))
    eps = 1e-6
    for k in range(3):
        dp = np.zeros_like(pos)
        dp[:, k] = eps
        fd = (value(pos + dp) - value(pos - dp)) / (2 * eps)
        assert np.max(np.abs(fd - jet.g[k].value)) < 1e-6
