import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from icgd_forge.kernels import BACKENDS, Triplets
from icgd_forge.layers import (
    AttnWeights,
    EwmlWeights,
    HeadStack,
    MlpWeights,
    TokenLayout,
    attn_forward,
    decode_prompt,
    encode_prompt,
    ewml_forward,
    layer_from_json,
    layer_to_json,
    mlp_forward,
    param_norm,
    softmax_attn_forward,
)
from icgd_forge.network import Dataset, NetworkShape, random_instance
from oracles import naive_attention, naive_ewml, naive_mlp


def heads_from_dense(mats):
    """HeadStack from a list of dense (Q, K, V)."""
    D = mats[0][0].shape[0]
    parts = {"q": [], "k": [], "v": []}
    for m, triple in enumerate(mats):
        for name, M in zip("qkv", triple):
            r, c = np.nonzero(M)
            parts[name].append(Triplets.build(np.full(r.size, m), r, c, M[r, c]))
    return HeadStack(D, len(mats), *(Triplets.concat(parts[p]) for p in "qkv"))


def random_heads(rng, D, M, density=0.5):
    mats = []
    for _ in range(M):
        trip = []
        for _ in range(3):
            A = rng.normal(size=(D, D))
            A[rng.random((D, D)) > density] = 0.0
            trip.append(A)
        mats.append(tuple(trip))
    return mats


class TestLayout:
    def test_slots_cover_embedding(self):
        s = NetworkShape(3, 2, 4, 3, 5)
        lay = TokenLayout(s)
        chain = (s.N - 1) * s.K + s.d_y
        assert lay.D == s.d_x + s.d_y + s.n_params + 3 * chain + s.d_y + 2
        covered = np.zeros(lay.D, dtype=int)
        for start, size in lay.offsets.values():
            covered[start:start + size] += 1
        assert np.all(covered == 1)

    def test_chain_blocks(self):
        s = NetworkShape(3, 2, 4, 3, 5)
        lay = TokenLayout(s)
        blocks = np.concatenate([lay.pbar(j) for j in range(1, s.N + 1)])
        assert np.array_equal(blocks, np.arange(*lay.slot("pbar").indices(lay.D)))
        assert lay.rpbar(s.N).size == s.d_y and lay.sbar(1).size == s.K
        assert np.array_equal(lay.pbar(0), np.arange(*lay.slot("x").indices(lay.D)))

    def test_w_rows(self):
        s = NetworkShape(3, 2, 4, 3, 5)
        lay = TokenLayout(s)
        rows = np.concatenate([lay.w_row(j, k) for j in range(1, s.N + 1) for k in range(s.rows(j))])
        assert np.array_equal(rows, np.arange(*lay.slot("w").indices(lay.D)))


class TestPrompt:
    def test_small_example(self):
        s = NetworkShape(1, 1, 1, 2, 1)
        data = Dataset(np.array([[0.3]]), np.array([[0.7]]), np.array([0.1]))
        P = encode_prompt(data, np.zeros(2), TokenLayout(s))
        assert list(P.get("flag")[0]) == [1.0, 0.0]
        assert list(P.get("y")[0]) == [0.7, 0.0]
        assert list(P.get("x")[0]) == [0.3, 0.1]
        assert np.all(P.get("one") == 1.0)

    def test_all_zero_dataset(self):
        s = NetworkShape(2, 2, 3, 3, 4)
        lay = TokenLayout(s)
        data = Dataset(np.zeros((4, 2)), np.zeros((4, 2)), np.zeros(2), B_x=1.0, B_y=1.0)
        H = encode_prompt(data, np.zeros(s.n_params), lay).H
        mask = np.ones(lay.D, dtype=bool)
        mask[[lay.one, lay.flag]] = False
        assert np.all(H[mask] == 0.0)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        s = NetworkShape(int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(2, 4)), int(rng.integers(1, 6)))
        data = random_instance(s, rng)
        w0 = rng.normal(size=s.n_params)
        back, w = decode_prompt(encode_prompt(data, w0, TokenLayout(s)))
        assert np.array_equal(back.X, data.X) and np.array_equal(back.Y, data.Y)
        assert np.array_equal(back.x_test, data.x_test) and np.array_equal(w, w0)

    def test_dimension_mismatch(self):
        s = NetworkShape(2, 2, 3, 3, 4)
        data = random_instance(NetworkShape(3, 2, 3, 3, 4), np.random.default_rng(0))
        with pytest.raises(ValueError):
            encode_prompt(data, np.zeros(s.n_params), TokenLayout(s))

    def test_csv_has_one_column_per_token(self):
        s = NetworkShape(1, 1, 1, 2, 2)
        P = encode_prompt(random_instance(s, np.random.default_rng(1)), np.zeros(2), TokenLayout(s))
        lines = P.to_csv().strip().splitlines()
        assert lines[0] == "token0,token1,token2"
        assert len(lines) == 1 + P.layout.D


@pytest.mark.parametrize("backend", BACKENDS)
class TestAttention:
    def test_zero_weights_identity(self, backend, rng):
        H = rng.normal(size=(3, 4))
        layer = AttnWeights(heads_from_dense([(np.zeros((3, 3)),) * 3]))
        assert np.array_equal(attn_forward(H, layer, backend), H)

    def test_hand_example(self, backend):
        H = np.array([[1.0, 2.0]])
        one = np.ones((1, 1))
        out = attn_forward(H, AttnWeights(heads_from_dense([(one, one, one)])), backend)
        assert out.tolist() == [[3.5, 7.0]]

    def test_negative_scores_vanish(self, backend):
        H = np.array([[1.0, 2.0]])
        one = np.ones((1, 1))
        out = attn_forward(H, AttnWeights(heads_from_dense([(-one, one, one)])), backend)
        assert np.array_equal(out, H)

    def test_against_naive(self, backend, rng):
        for _ in range(5):
            D, M, T = 6, 4, 5
            mats = random_heads(rng, D, M)
            H = rng.normal(size=(D, T))
            got = attn_forward(H, AttnWeights(heads_from_dense(mats)), backend)
            assert np.max(np.abs(got - naive_attention(H, mats))) <= 1e-12

    def test_matrix_form_with_transposed_scores(self, backend, rng):
        # per-token form h_i + (1/T) sum_s relu(<Q h_i, K h_s>) V h_s is
        # H + (1/T) V H relu((K H)^T (Q H)) in matrix form
        D, T = 5, 4
        mats = random_heads(rng, D, 3)
        H = rng.normal(size=(D, T))
        ref = H + sum((V @ H) @ np.maximum((K @ H).T @ (Q @ H), 0) for Q, K, V in mats) / T
        got = attn_forward(H, AttnWeights(heads_from_dense(mats)), backend)
        assert np.max(np.abs(got - ref)) <= 1e-12

    def test_permutation_equivariance(self, backend, rng):
        D, T = 6, 6
        mats = random_heads(rng, D, 3)
        layer = AttnWeights(heads_from_dense(mats))
        H = rng.normal(size=(D, T))
        perm = np.append(rng.permutation(T - 1), T - 1)
        out = attn_forward(H, layer, backend)
        out_p = attn_forward(H[:, perm], layer, backend)
        assert np.max(np.abs(out_p - out[:, perm])) <= 1e-12

    def test_hooked_activation(self, backend, rng):
        from icgd_forge.activation import sigmoid

        D, T = 4, 3
        mats = random_heads(rng, D, 2)
        H = rng.normal(size=(D, T))
        got = attn_forward(H, AttnWeights(heads_from_dense(mats), "sigmoid"), backend)
        assert np.max(np.abs(got - naive_attention(H, mats, act=lambda z: float(sigmoid(z))))) <= 1e-12


@pytest.mark.parametrize("backend", BACKENDS)
class TestEwml:
    def test_zero_value_identity(self, backend, rng):
        H = rng.normal(size=(3, 4))
        Q = rng.normal(size=(3, 3))
        layer = EwmlWeights(heads_from_dense([(Q, Q, np.zeros((3, 3)))]))
        assert np.array_equal(ewml_forward(H, layer, backend), H)

    def test_self_product(self, backend):
        # token [a; b; 1]: Q picks a, K picks b, V copies the constant into slot 1
        Q = np.zeros((3, 3)); Q[0, 0] = 1
        K = np.zeros((3, 3)); K[0, 1] = 1
        V = np.zeros((3, 3)); V[1, 2] = 1
        H = np.array([[3.0], [4.0], [1.0]])
        out = ewml_forward(H, EwmlWeights(heads_from_dense([(Q, K, V)])), backend)
        assert out[1, 0] - H[1, 0] == 12.0

    def test_token_independence(self, backend, rng):
        mats = random_heads(rng, 5, 3)
        layer = EwmlWeights(heads_from_dense(mats))
        H = rng.normal(size=(5, 4))
        H2 = H.copy()
        H2[:, 2] = rng.normal(size=5)
        a, b = ewml_forward(H, layer, backend), ewml_forward(H2, layer, backend)
        keep = [0, 1, 3]
        assert np.array_equal(a[:, keep], b[:, keep])

    def test_against_naive(self, backend, rng):
        mats = random_heads(rng, 6, 4)
        H = rng.normal(size=(6, 5))
        got = ewml_forward(H, EwmlWeights(heads_from_dense(mats)), backend)
        assert np.max(np.abs(got - naive_ewml(H, mats))) <= 1e-12


class TestMlp:
    def test_zero_output_weights(self, rng):
        H = rng.normal(size=(4, 3))
        layer = MlpWeights(rng.normal(size=(5, 4)), np.zeros((4, 5)))
        assert np.array_equal(mlp_forward(H, layer), H)

    def test_against_naive(self, rng):
        W1, W2 = rng.normal(size=(7, 5)), rng.normal(size=(5, 7))
        H = rng.normal(size=(5, 4))
        assert np.max(np.abs(mlp_forward(H, MlpWeights(W1, W2)) - naive_mlp(H, W1, W2))) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            MlpWeights(np.zeros((3, 4)), np.zeros((4, 2)))


class TestNorms:
    def test_zero_layer(self):
        z = np.zeros((3, 3))
        assert param_norm(AttnWeights(heads_from_dense([(z, z, z)]))) == 0.0
        assert param_norm(MlpWeights(np.zeros((2, 3)), np.zeros((3, 2)))) == 0.0

    def test_attention_norm_against_dense(self, rng):
        mats = random_heads(rng, 5, 3)
        l1 = lambda A: np.max(np.sum(np.abs(A), axis=0))  # noqa: E731
        ref = max(max(l1(Q), l1(K)) for Q, K, _ in mats) + sum(l1(V) for _, _, V in mats)
        assert param_norm(AttnWeights(heads_from_dense(mats))) == pytest.approx(ref, rel=1e-14)
        ref2 = max(max(np.linalg.norm(Q, 2), np.linalg.norm(K, 2)) for Q, K, _ in mats) + sum(np.linalg.norm(V, 2) for _, _, V in mats)
        assert param_norm(AttnWeights(heads_from_dense(mats)), "spectral") == pytest.approx(ref2, rel=1e-12)

    def test_ewml_norm_is_max(self, rng):
        mats = random_heads(rng, 5, 3)
        l1 = lambda A: np.max(np.sum(np.abs(A), axis=0))  # noqa: E731
        ref = max(l1(A) for triple in mats for A in triple)
        assert param_norm(EwmlWeights(heads_from_dense(mats))) == pytest.approx(ref, rel=1e-14)

    def test_mlp_norm(self, rng):
        W1, W2 = rng.normal(size=(7, 5)), rng.normal(size=(5, 7))
        ref = np.max(np.sum(np.abs(W1), axis=0)) + np.max(np.sum(np.abs(W2), axis=0))
        assert param_norm(MlpWeights(W1, W2)) == pytest.approx(ref, rel=1e-14)

    def test_appending_zero_heads(self, rng):
        mats = random_heads(rng, 4, 2)
        z = np.zeros((4, 4))
        a = param_norm(AttnWeights(heads_from_dense(mats)))
        b = param_norm(AttnWeights(heads_from_dense(mats + [(z, z, z)] * 3)))
        assert a == b


class TestSerialization:
    def test_round_trip_each_kind(self, rng):
        mats = random_heads(rng, 4, 3)
        layers = [
            AttnWeights(heads_from_dense(mats), "sigmoid", "a"),
            EwmlWeights(heads_from_dense(mats), "e"),
            MlpWeights(sp.csr_matrix(rng.normal(size=(3, 4))), sp.csr_matrix(rng.normal(size=(4, 3))), "m"),
        ]
        H = rng.normal(size=(4, 3))
        from icgd_forge.layers import layer_forward

        for layer in layers:
            back = layer_from_json(layer_to_json(layer))
            assert back.kind == layer.kind and back.label == layer.label
            assert np.array_equal(layer_forward(H, back), layer_forward(H, layer))


class TestSoftmax:
    def test_weights_sum_to_one(self, rng):
        D, T = 5, 7
        H = rng.normal(size=(D, T)) * 3
        Q, K, V = (rng.normal(size=(D, D)) for _ in range(3))
        _, W = softmax_attn_forward(H, Q, K, V)
        assert np.max(np.abs(W.sum(axis=0) - 1.0)) <= 1e-12
        assert np.all(W >= 0)
