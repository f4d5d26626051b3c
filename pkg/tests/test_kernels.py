import numpy as np
import pytest

import hygrec.kernels as K
from hygrec.errors import (
    DisconnectedLoss,
    EmptySelection,
    HeadDivisibility,
    ShapeMismatch,
    ZeroVector,
)
from hygrec.hypergraph import Hyperedge, build_incidence, induce_line_graph_fast

from conftest import finite_difference, make_random_hypergraph


def dense_hgconv(g, o0, weights):
    """Independent dense matrix-chain evaluation of the hypergraph layer."""
    H = g.incidence_dense()
    d = H.sum(axis=1)
    delta = H.sum(axis=0)
    inv_d = np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)
    P = np.diag(inv_d) @ H @ np.diag(1.0 / delta) @ H.T
    P[d == 0] = np.eye(g.node_count)[d == 0]
    out = o0
    for w in weights:
        out = P @ out @ w
    return out


def dense_gconv(lg, o0, weights, activation="rectifier"):
    N = lg.adjacency_dense() + np.eye(lg.hyperedge_count)
    dinv = np.diag(1.0 / np.sqrt(N.sum(axis=1)))
    act = {
        "rectifier": lambda x: np.maximum(x, 0.0),
        "identity": lambda x: x,
        "tanh": np.tanh,
    }[activation]
    out = o0
    for w in weights:
        out = act(dinv @ N @ dinv @ out @ w)
    return out


class TestParameterStore:
    def test_init_independent_of_creation_order(self):
        s1 = K.ParameterStore(99)
        a1 = s1.get("a", (3, 4)).value.copy()
        b1 = s1.get("b", (2, 2)).value.copy()
        s2 = K.ParameterStore(99)
        b2 = s2.get("b", (2, 2)).value.copy()
        a2 = s2.get("a", (3, 4)).value.copy()
        assert np.array_equal(a1, a2)
        assert np.array_equal(b1, b2)

    def test_glorot_bound(self):
        v = K.glorot(1, "w", 50, 30)
        bound = np.sqrt(6.0 / 80.0)
        assert np.all(np.abs(v) <= bound)

    def test_shape_conflict(self):
        s = K.ParameterStore(0)
        s.get("w", (2, 2))
        with pytest.raises(ShapeMismatch):
            s.get("w", (3, 2))

    def test_checkpoint_roundtrip_bitexact(self, tmp_path):
        s = K.ParameterStore(5)
        s.get("alpha/w", (4, 3))
        s.get("beta/emb", (7, 2))
        path = tmp_path / "ckpt.bin"
        s.save(path)
        loaded = K.ParameterStore.load(path)
        assert loaded.seed == 5
        assert set(loaded.params) == set(s.params)
        for name, p in s.params.items():
            assert np.array_equal(loaded.params[name].value, p.value)
        # byte-stable: saving the loaded store reproduces the file
        path2 = tmp_path / "ckpt2.bin"
        loaded.save(path2)
        assert path.read_bytes() == path2.read_bytes()


class TestAdam:
    def test_zero_gradient_no_change(self):
        s = K.ParameterStore(1)
        p = s.get("w", (2, 2))
        before = p.value.copy()
        K.adam_step(s)
        assert np.array_equal(p.value, before)

    def test_first_step_is_signed_unit_update(self):
        s = K.ParameterStore(1)
        p = s.get("w", (2, 2))
        before = p.value.copy()
        p.grad[...] = np.array([[3.0, -0.5], [1e-3, -7.0]])
        expected = before - 1e-3 * np.sign(p.grad)
        K.adam_step(s, lr=1e-3)
        # bias-corrected first step is lr * g / (|g| + eps)
        assert np.allclose(p.value, expected, atol=1e-8)
        assert np.all(p.grad == 0.0)

    def test_deterministic(self):
        def run():
            s = K.ParameterStore(3)
            p = s.get("w", (3, 3))
            for step in range(5):
                p.grad[...] = np.sin(step + p.value)
                K.adam_step(s, lr=1e-2)
            return p.value.copy()

        assert np.array_equal(run(), run())


class TestBackwardBasics:
    def test_sum_of_entries_gives_ones(self):
        s = K.ParameterStore(0)
        p = s.get("w", (3, 2))
        tape = K.Tape()
        loss = K.sum_all(tape.leaf(p))
        K.backward(tape, loss)
        assert np.array_equal(p.grad, np.ones((3, 2)))

    def test_quadratic_closed_form(self):
        s = K.ParameterStore(0)
        p = s.get("w", (3, 3))
        x = np.array([[1.0], [2.0], [-1.0]])
        tape = K.Tape()
        wt = tape.leaf(p)
        wx = K.matmul(wt, tape.constant(x))
        loss = K.sum_all(K.mul(wx, wx))
        K.backward(tape, loss)
        assert np.allclose(p.grad, 2.0 * (p.value @ x) @ x.T, atol=1e-12)

    def test_disconnected_loss(self):
        tape1, tape2 = K.Tape(), K.Tape()
        t = tape1.constant(np.ones((1, 1)))
        with pytest.raises(DisconnectedLoss):
            K.backward(tape2, t)

    def test_non_scalar_loss(self):
        tape = K.Tape()
        t = tape.constant(np.ones((2, 2)))
        with pytest.raises(ShapeMismatch):
            K.backward(tape, t)


class TestPrimitiveGradients:
    """Central finite differences over every primitive the model uses."""

    def _check(self, build, shapes, seed=0, tol=1e-6):
        rng = np.random.default_rng(seed)
        store = K.ParameterStore(0)
        params = []
        for i, shape in enumerate(shapes):
            p = store.get(f"p{i}", shape)
            p.value[...] = rng.normal(size=shape)
            params.append(p)

        def loss_fn():
            tape = K.Tape()
            leaves = [tape.leaf(p) for p in params]
            return tape, build(tape, *leaves)

        assert finite_difference(loss_fn, params) < tol

    def test_matmul_transpose(self):
        self._check(
            lambda tape, a, b: K.sum_all(K.mul(K.matmul(a, K.transpose(b)), K.matmul(a, K.transpose(b)))),
            [(3, 4), (5, 4)],
        )

    def test_add_broadcast_bias(self):
        self._check(
            lambda tape, a, b: K.sum_all(K.mul(K.add(a, b), K.add(a, b))),
            [(4, 3), (1, 3)],
        )

    def test_sub_mul_scale(self):
        self._check(
            lambda tape, a, b: K.sum_all(K.scale(K.mul(K.sub(a, b), a), 0.7)),
            [(3, 3), (3, 3)],
        )

    def test_activations_and_elementwise(self):
        def build(tape, a):
            out = K.add(K.relu(a), K.tanh_act(a))
            out = K.add(out, K.exp(K.scale(a, 0.3)))
            return K.sum_all(K.mul(out, out))

        self._check(build, [(4, 4)], seed=3)

    def test_log_sqrt_clamp(self):
        def build(tape, a):
            pos = K.add(K.mul(a, a), tape.constant(np.full((3, 3), 0.5)))
            return K.sum_all(K.add(K.log(pos), K.sqrt(K.clamp(pos, 0.6, 50.0))))

        self._check(build, [(3, 3)], seed=4)

    def test_softmax_and_sums(self):
        def build(tape, a, m):
            sm = K.row_softmax(a)
            return K.sum_all(
                K.add(K.row_sum(K.mul(sm, m)), K.col_sum(K.mul(sm, m)))
            )

        self._check(build, [(4, 5), (4, 5)], seed=5)

    def test_row_normalize(self):
        self._check(
            lambda tape, a, m: K.sum_all(K.mul(K.row_normalize(a), m)),
            [(4, 3), (4, 3)],
            seed=6,
        )

    def test_gather_concat_slice(self):
        def build(tape, a, b):
            g = K.gather_rows(a, [0, 2, 2, 1])
            c = K.concat_rows([g, b])
            cc = K.concat_cols([c, c])
            s = K.slice_cols(cc, 1, 4)
            return K.sum_all(K.mul(s, s))

        self._check(build, [(3, 3), (2, 3)], seed=7)

    def test_mean_pool(self):
        self._check(
            lambda tape, a: K.sum_all(K.mul(K.mean_pool(a, [0, 3, 1]), K.mean_pool(a, [2, 1]))),
            [(4, 4)],
            seed=8,
        )

    def test_graph_primitives(self):
        rng = np.random.default_rng(9)
        g = make_random_hypergraph(rng, max_nodes=12, max_edges=8)
        lg = induce_line_graph_fast(g)
        m = rng.normal(size=(g.edge_count, 3))

        def build(tape, a):
            h = K.hyper_propagate(g, a)
            e = K.edge_mean(g, a)
            l = K.line_propagate(lg, e)
            return K.add(
                K.sum_all(K.mul(h, h)),
                K.sum_all(K.mul(l, tape.constant(m))),
            )

        store = K.ParameterStore(0)
        p = store.get("emb", (g.node_count, 3))

        def loss_fn():
            tape = K.Tape()
            return tape, build(tape, tape.leaf(p))

        assert finite_difference(loss_fn, [p]) < 1e-6


class TestHGConv:
    def test_identity_incidence_passthrough(self):
        g = build_incidence([Hyperedge([i]) for i in range(4)], 4)
        tape = K.Tape()
        o0 = tape.constant(np.arange(8.0).reshape(4, 2))
        out = K.hgconv_forward(g, o0, [tape.constant(np.eye(2))])
        assert np.array_equal(out.value, o0.value)

    def test_single_full_hyperedge_averages(self):
        g = build_incidence([Hyperedge(range(5))], 5)
        tape = K.Tape()
        o0 = tape.constant(np.random.default_rng(0).normal(size=(5, 3)))
        out = K.hgconv_forward(g, o0, [tape.constant(np.eye(3))])
        mean = o0.value.mean(axis=0)
        assert np.allclose(out.value, np.tile(mean, (5, 1)), atol=1e-12)

    def test_matches_dense_oracle_two_layers(self):
        rng = np.random.default_rng(21)
        for _ in range(10):
            g = make_random_hypergraph(rng, max_nodes=50, max_edges=30)
            o0 = rng.normal(size=(g.node_count, 4))
            ws = [rng.normal(size=(4, 4)) for _ in range(2)]
            tape = K.Tape()
            out = K.hgconv_forward(
                g, tape.constant(o0), [tape.constant(w) for w in ws]
            )
            assert np.max(np.abs(out.value - dense_hgconv(g, o0, ws))) < 1e-10

    def test_row_stochastic_preserves_constants(self):
        rng = np.random.default_rng(22)
        g = make_random_hypergraph(rng, max_nodes=30, max_edges=20)
        tape = K.Tape()
        ones = tape.constant(np.ones((g.node_count, 2)))
        out = K.hgconv_forward(g, ones, [tape.constant(np.eye(2))])
        assert np.allclose(out.value, 1.0, atol=1e-12)

    def test_isolated_nodes_pass_through(self):
        g = build_incidence([Hyperedge([0, 1])], 4)  # nodes 2, 3 isolated
        tape = K.Tape()
        o0 = tape.constant(np.arange(8.0).reshape(4, 2))
        out = K.hgconv_forward(g, o0, [tape.constant(np.eye(2))])
        assert np.array_equal(out.value[2:], o0.value[2:])

    def test_shape_mismatch(self):
        g = build_incidence([Hyperedge([0, 1])], 2)
        tape = K.Tape()
        with pytest.raises(ShapeMismatch):
            K.hgconv_forward(g, tape.constant(np.ones((3, 2))), [tape.constant(np.eye(2))])


class TestGConv:
    def test_edgeless_line_graph_is_activation(self):
        g = build_incidence([Hyperedge([0]), Hyperedge([1])], 2)
        lg = induce_line_graph_fast(g)
        tape = K.Tape()
        o0 = tape.constant(np.array([[1.0, -2.0], [-3.0, 4.0]]))
        out = K.gconv_forward(lg, o0, [tape.constant(np.eye(2))])
        assert np.array_equal(out.value, np.maximum(o0.value, 0.0))

    def test_two_nodes_unit_edge_averages(self):
        g = build_incidence([Hyperedge([0, 1]), Hyperedge([0, 1])], 2)
        lg = induce_line_graph_fast(g)
        assert lg.adjacency_dense()[0, 1] == 1.0
        tape = K.Tape()
        o0 = tape.constant(np.array([[1.0, 2.0], [5.0, 6.0]]))
        out = K.gconv_forward(lg, o0, [tape.constant(np.eye(2))])
        mean = o0.value.mean(axis=0)
        assert np.allclose(out.value, np.tile(mean, (2, 1)), atol=1e-12)

    @pytest.mark.parametrize("activation", ["rectifier", "identity", "tanh"])
    def test_matches_dense_oracle(self, activation):
        rng = np.random.default_rng(31)
        for _ in range(5):
            g = make_random_hypergraph(rng, max_nodes=40, max_edges=25)
            lg = induce_line_graph_fast(g)
            o0 = rng.normal(size=(lg.hyperedge_count, 3))
            ws = [rng.normal(size=(3, 3))]
            tape = K.Tape()
            out = K.gconv_forward(
                lg, tape.constant(o0), [tape.constant(w) for w in ws], activation
            )
            oracle = dense_gconv(lg, o0, ws, activation)
            assert np.max(np.abs(out.value - oracle)) < 1e-10


class TestMultiHeadAttention:
    def _weights(self, tape, d, identity=False):
        if identity:
            return tuple(tape.constant(np.eye(d)) for _ in range(4))
        rng = np.random.default_rng(5)
        return tuple(tape.constant(rng.normal(size=(d, d))) for _ in range(4))

    def test_single_key_returns_projected_row(self):
        tape = K.Tape()
        wq, wk, wv, wo = self._weights(tape, 4)
        q = tape.constant(np.random.default_rng(1).normal(size=(3, 4)))
        kv = tape.constant(np.random.default_rng(2).normal(size=(1, 4)))
        out = K.multi_head_attention(q, kv, kv, wq, wk, wv, wo, heads=2)
        expected = (kv.value @ wv.value) @ wo.value
        assert np.allclose(out.value, np.tile(expected, (3, 1)), atol=1e-12)

    def test_orthogonal_query_uniform_mean(self):
        tape = K.Tape()
        wq, wk, wv, wo = self._weights(tape, 3, identity=True)
        q = tape.constant(np.array([[1.0, 0.0, 0.0]]))
        keys = tape.constant(
            np.array([[0.0, 2.0, 0.0], [0.0, 0.0, 3.0], [0.0, -1.0, 1.0]])
        )
        out = K.multi_head_attention(q, keys, keys, wq, wk, wv, wo, heads=1)
        assert np.allclose(out.value, keys.value.mean(axis=0, keepdims=True), atol=1e-12)

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(8)
        tape = K.Tape()
        wq, wk, wv, wo = self._weights(tape, 6)
        q = tape.constant(rng.normal(size=(5, 6)))
        kv = tape.constant(rng.normal(size=(7, 6)))
        _out, mats = K.multi_head_attention(
            q, kv, kv, wq, wk, wv, wo, heads=3, return_weights=True
        )
        assert len(mats) == 3
        for attn in mats:
            assert np.max(np.abs(attn.value.sum(axis=1) - 1.0)) < 1e-12

    def test_head_divisibility(self):
        tape = K.Tape()
        wq, wk, wv, wo = self._weights(tape, 4)
        q = tape.constant(np.ones((2, 4)))
        with pytest.raises(HeadDivisibility):
            K.multi_head_attention(q, q, q, wq, wk, wv, wo, heads=3)

    def test_key_value_rows_must_match(self):
        tape = K.Tape()
        wq, wk, wv, wo = self._weights(tape, 4)
        q = tape.constant(np.ones((2, 4)))
        k = tape.constant(np.ones((3, 4)))
        v = tape.constant(np.ones((2, 4)))
        with pytest.raises(ShapeMismatch):
            K.multi_head_attention(q, k, v, wq, wk, wv, wo, heads=2)


class TestMeanPool:
    def test_identical_rows(self):
        tape = K.Tape()
        m = tape.constant(np.tile([[2.0, 3.0]], (4, 1)))
        assert np.allclose(K.mean_pool(m, [0, 1, 2]).value, [[2.0, 3.0]])

    def test_single_row(self):
        tape = K.Tape()
        m = tape.constant(np.arange(6.0).reshape(3, 2))
        assert np.array_equal(K.mean_pool(m, [1]).value, [[2.0, 3.0]])

    def test_random_matches_oracle(self):
        rng = np.random.default_rng(12)
        m_val = rng.normal(size=(8, 5))
        rows = [1, 4, 6]
        tape = K.Tape()
        out = K.mean_pool(tape.constant(m_val), rows)
        assert np.allclose(out.value, m_val[rows].sum(axis=0, keepdims=True) / 3, atol=1e-12)

    def test_empty_selection(self):
        tape = K.Tape()
        with pytest.raises(EmptySelection):
            K.mean_pool(tape.constant(np.ones((2, 2))), [])


class TestRowNormalize:
    def test_zero_row_rejected(self):
        tape = K.Tape()
        with pytest.raises(ZeroVector):
            K.row_normalize(tape.constant(np.array([[1.0, 0.0], [0.0, 0.0]])))
