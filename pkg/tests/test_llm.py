import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nashnet.llm import (
    AttentionHead,
    DecoderBlock,
    attention_layer,
    decoder,
    decoder_fixpoint,
    embed,
    jacobian_probe,
    layer_norm,
    masked_softmax,
    random_block,
    unembed,
)
from nashnet.network import layer

scores = st.integers(1, 6).flatmap(
    lambda n: arrays(np.float64, (n, n), elements=st.floats(-50, 50, allow_nan=False)))


def zero_block(d=2, n_tokens=3):
    zero = np.zeros((d, d))
    return DecoderBlock([AttentionHead(zero, zero)], layer(zero, np.zeros(d), "tanh"),
                        np.zeros(d), np.zeros(d), n_tokens=n_tokens)


class TestSoftmax:
    def test_global_zero(self):
        assert np.allclose(masked_softmax(np.zeros((2, 2)), "paper_global"), [[1 / 3, 0], [1 / 3, 1 / 3]], atol=1e-15)

    def test_rowwise_zero(self):
        assert np.allclose(masked_softmax(np.zeros((2, 2)), "rowwise"), [[1, 0], [0.5, 0.5]], atol=1e-15)

    @pytest.mark.parametrize("mode", ["paper_global", "rowwise"])
    @pytest.mark.parametrize("v", [-700.0, 0.0, 3.5, 1e300])
    def test_one_by_one(self, mode, v):
        assert masked_softmax([[v]], mode).tolist() == [[1.0]]

    @given(scores)
    def test_global_sums_to_one(self, A):
        S = masked_softmax(A, "paper_global")
        assert abs(S.sum() - 1.0) <= 1e-12 and np.all(np.triu(S, 1) == 0)

    @given(scores)
    def test_rowwise_rows_sum_to_one(self, A):
        S = masked_softmax(A, "rowwise")
        assert np.all(np.abs(S.sum(axis=1) - 1.0) <= 1e-12) and np.all(np.triu(S, 1) == 0)

    @given(scores, st.floats(-100, 100))
    def test_shift_invariant(self, A, c):
        assert np.allclose(masked_softmax(A + c), masked_softmax(A), atol=1e-12)

    def test_future_scores_ignored(self):
        A = np.zeros((3, 3))
        B = A.copy()
        B[0, 2] = 100.0
        assert np.array_equal(masked_softmax(A), masked_softmax(B))

    def test_bad_input(self):
        with pytest.raises(ValueError):
            masked_softmax(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            masked_softmax(np.zeros((2, 2)), "columnwise")


class TestAttention:
    @given(arrays(np.float64, (3, 2), elements=st.floats(-10, 10)))
    def test_zero_weights_identity(self, x):
        head = AttentionHead(np.zeros((2, 2)), np.zeros((2, 2)))
        assert np.array_equal(attention_layer(x, [head]), x)

    def test_no_heads_identity(self):
        x = np.arange(6.0).reshape(3, 2)
        assert np.array_equal(attention_layer(x, []), x)

    def test_single_token(self):
        x = np.array([[1.0, -2.0]])
        w_ov = np.array([[0.5, 0.1], [0.0, 2.0]])
        head = AttentionHead(np.eye(2), w_ov)
        assert np.allclose(attention_layer(x, [head]), x + x @ w_ov.T)

    def test_identical_heads_equal_doubled_head(self):
        rng = np.random.default_rng(0)
        qk, ov = rng.standard_normal((2, 3, 3))
        x = rng.standard_normal((4, 3))
        two = attention_layer(x, [AttentionHead(qk, ov), AttentionHead(qk, ov)])
        doubled = attention_layer(x, [AttentionHead(qk, 2 * ov)])
        assert np.allclose(two, doubled, atol=1e-14)

    def test_causality(self):
        rng = np.random.default_rng(1)
        head = AttentionHead(rng.standard_normal((2, 2)), rng.standard_normal((2, 2)))
        x = rng.standard_normal((4, 2))
        y = x.copy()
        y[3] += 1.0
        a, b = attention_layer(x, [head], "rowwise"), attention_layer(y, [head], "rowwise")
        assert np.array_equal(a[:3], b[:3])

    def test_width_mismatch(self):
        with pytest.raises(ValueError):
            attention_layer(np.zeros((2, 3)), [AttentionHead(np.eye(2), np.eye(2))])


class TestLayerNorm:
    def test_hand_example(self):
        out = layer_norm([1.0, 3.0], 0.0, 1.0)
        assert np.allclose(out, [-0.7071, 0.7071], atol=1e-4)

    def test_constant_input(self):
        assert np.allclose(layer_norm([5.0, 5.0, 5.0], [1.0, 2.0, 3.0], 1.0), [1.0, 2.0, 3.0])

    @given(arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)))
    def test_zero_scale_gives_rho(self, x):
        rho = np.array([0.1, -0.2, 0.3, 0.4])
        assert np.array_equal(layer_norm(x, rho, 0.0), rho)

    def test_too_short(self):
        with pytest.raises(ValueError):
            layer_norm([1.0], 0.0, 1.0)

    @given(arrays(np.float64, (2, 5), elements=st.floats(-1e3, 1e3)))
    def test_output_centered(self, x):
        out = layer_norm(x, 0.0, 1.0)
        assert np.all(np.abs(out.mean(axis=-1)) <= 1e-9)


class TestDecoder:
    def test_zero_block_one_step(self):
        rep = decoder_fixpoint([zero_block()], np.arange(6.0))
        assert rep.certified and rep.trace.converged and rep.trace.n_steps == 1
        assert np.array_equal(rep.trace.x_final, np.zeros(6))

    def test_small_weights_certify_and_converge(self):
        rep = decoder_fixpoint([random_block(3, 4, 1e-3, seed=0)], np.ones(12))
        assert rep.certified and rep.trace.converged and rep.trace.final_residual <= 1e-8
        assert rep.nash is not None and rep.nash.is_equilibrium

    def test_large_weights_not_certifiable(self):
        rep = decoder_fixpoint([random_block(3, 4, 10.0, seed=0)], np.ones(12), max_iter=200)
        assert not rep.certified and rep.gamma is None and "not certifiable" in rep.warning
        assert rep.lipschitz_estimates[0] > 1

    def test_two_small_blocks(self):
        blocks = [random_block(3, 2, 1e-2, seed=s) for s in (1, 2)]
        rep = decoder_fixpoint(blocks, np.zeros(6))
        assert rep.certified and rep.trace.converged
        assert rep.gamma >= max(rep.block_gammas)

    def test_decoder_order(self):
        a, b = random_block(2, 2, 0.1, seed=3), random_block(2, 2, 0.1, seed=4)
        v = np.arange(4.0)
        assert np.array_equal(decoder([a, b])(v), b(a(v)))

    def test_batch_rows(self):
        blk = random_block(2, 3, 0.1, seed=5)
        V = np.random.default_rng(0).standard_normal((4, 6))
        assert np.allclose(blk(V), np.stack([blk(v) for v in V]), atol=1e-15)

    def test_config_round_trip(self):
        blk = random_block(3, 2, 0.2, seed=6)
        again = DecoderBlock.from_config(blk.to_config())
        v = np.linspace(-1, 1, 6)
        assert np.array_equal(blk(v), again(v))

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            decoder_fixpoint([random_block(2, 2, 0.1)], np.ones(3))
        with pytest.raises(ValueError):
            DecoderBlock([], None, [0.0], [1.0])

    def test_embedding_is_linear(self):
        E = np.array([[1.0, 2.0], [0.0, 1.0], [1.0, 0.0]])
        u = np.array([[1.0, -1.0]])
        assert np.array_equal(embed(u, E), [[-1.0, -1.0, 1.0]])
        assert unembed(embed(u, E), E.T).shape == (1, 2)

    def test_jacobian_probe_finite(self):
        blk = random_block(2, 3, 0.5, seed=7)
        assert np.isfinite(jacobian_probe(blk, np.ones(6), n_points=4))
