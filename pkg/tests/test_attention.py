# tests/test_attention.py
import math

import numpy as np
import pytest

from app.attention import (
    AttentionConfig,
    EfficientDualBlock,
    ProjectionSet,
    SkipCrossAttention,
    efficient_attention,
    efficient_cross_attention,
    merge_heads,
    scaled_dot_attention,
    split_heads,
    transpose_attention,
)
from app.errors import ShapeError
from app.tensor import RngStream, Tensor, grad_check, grad_check_parameter, softmax


@pytest.mark.unit
class TestScaledDotAttention:
    """Masked scaled-dot attention"""

    def test_weights_normalized_and_masked(self, np_rng):
        """Fuzzed inputs: rows sum to one and masked keys get nothing"""
        for _ in range(200):
            n = int(np_rng.integers(2, 6))
            q, k, v = (np_rng.normal(0.0, 3.0, (2, n, 4)) for _ in range(3))
            mask = (np_rng.random((2, n)) < 0.6).astype(int)
            mask[:, 0] = 1
            _, weights = scaled_dot_attention(q, k, v, mask=mask)
            w = weights.data
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-9)
            assert (w[np.broadcast_to(mask[:, None, :] == 0, w.shape)] == 0.0).all()

    def test_single_key_returns_its_value(self, np_rng):
        v = np_rng.normal(size=(1, 3))
        out, _ = scaled_dot_attention(np_rng.normal(size=(2, 3)), np_rng.normal(size=(1, 3)), v)
        np.testing.assert_allclose(out.data, np.repeat(v, 2, axis=0))

    def test_mask_must_be_binary(self, np_rng):
        x = np_rng.normal(size=(3, 2))
        with pytest.raises(ValueError):
            scaled_dot_attention(x, x, x, mask=np.array([1, 2, 0]))

    def test_width_mismatch(self, np_rng):
        with pytest.raises(ShapeError):
            scaled_dot_attention(np_rng.normal(size=(3, 2)), np_rng.normal(size=(3, 4)), np_rng.normal(size=(3, 4)))


@pytest.mark.unit
class TestEfficientAttention:
    """Linear-complexity spatial attention"""

    def test_output_within_context_bounds(self, rng, np_rng):
        """Each output row is a convex mix of the global context rows"""
        proj = ProjectionSet(4, 3, rng, output=False)
        for _ in range(100):
            x = np_rng.normal(0.0, 2.0, (int(np_rng.integers(1, 8)), 4))
            k, v = proj.keys(x).data, proj.values(x).data
            context = softmax(Tensor(k), axis=0).data.T @ v
            out = efficient_attention(x, proj).data
            assert (out >= context.min(axis=0) - 1e-9).all()
            assert (out <= context.max(axis=0) + 1e-9).all()

    def test_equals_explicit_formula(self, rng, np_rng):
        proj = ProjectionSet(4, 4, rng)
        x = np_rng.normal(size=(5, 4))
        q, k, v = x @ proj.wq.data, x @ proj.wk.data, x @ proj.wv.data
        rho_q = np.exp(q) / np.exp(q).sum(axis=1, keepdims=True)
        rho_k = np.exp(k) / np.exp(k).sum(axis=0, keepdims=True)
        expected = rho_q @ (rho_k.T @ v) @ proj.wo.data
        np.testing.assert_allclose(efficient_attention(x, proj).data, expected, atol=1e-12)

    def test_token_permutation_equivariance(self, rng, np_rng):
        """Permuting tokens permutes the output rows"""
        proj = ProjectionSet(4, 4, rng)
        x = np_rng.normal(size=(6, 4))
        order = np_rng.permutation(6)
        np.testing.assert_allclose(efficient_attention(x[order], proj).data, efficient_attention(x, proj).data[order], atol=1e-12)

    def test_gradients(self, rng, np_rng):
        proj = ProjectionSet(3, 4, rng)
        weights = np_rng.normal(size=(5, 3))
        assert grad_check(lambda x: (efficient_attention(x, proj) * weights).sum(), np_rng.normal(size=(5, 3)), step=1e-5) < 1e-4

    def test_cross_gradients_through_both_inputs(self, rng, np_rng):
        proj = ProjectionSet(3, 3, rng)
        query, context = np_rng.normal(size=(4, 3)), np_rng.normal(size=(4, 3))
        weights = np_rng.normal(size=(4, 3))
        assert grad_check(lambda q: (efficient_cross_attention(q, context, proj) * weights).sum(), query, step=1e-5) < 1e-4
        assert grad_check(lambda c: (efficient_cross_attention(query, c, proj) * weights).sum(), context, step=1e-5) < 1e-4


@pytest.mark.unit
class TestTransposeAttention:
    """Channel attention over the feature axis"""

    def test_mixing_rows_sum_to_one(self, rng, np_rng):
        proj = ProjectionSet(4, 4, rng, output=False)
        x = np_rng.normal(size=(7, 4))
        q, k = x @ proj.wq.data, x @ proj.wk.data
        mixing = softmax(Tensor(q.T @ k / 2.0), axis=-1).data
        np.testing.assert_allclose(mixing.sum(axis=-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(transpose_attention(x, proj, 2.0).data, (x @ proj.wv.data) @ mixing.T, atol=1e-12)

    def test_temperature_must_be_positive(self, rng, np_rng):
        with pytest.raises(ValueError):
            transpose_attention(np_rng.normal(size=(3, 4)), ProjectionSet(4, 4, rng), 0.0)

    def test_gradients(self, rng, np_rng):
        proj = ProjectionSet(3, 3, rng)
        weights = np_rng.normal(size=(6, 3))
        assert grad_check(lambda x: (transpose_attention(x, proj, math.sqrt(3)) * weights).sum(), np_rng.normal(size=(6, 3)), step=1e-5) < 1e-4


@pytest.mark.unit
class TestBlocks:
    """Dual attention block, skip cross attention and multi-head plumbing"""

    def test_dual_block_shape_and_gradients(self, rng, np_rng):
        block = EfficientDualBlock(AttentionConfig(d_model=4), rng)
        x = np_rng.normal(size=(2, 5, 4))
        assert block(x).shape == (2, 5, 4)
        weights = np_rng.normal(size=(2, 5, 4))
        assert grad_check(lambda t: (block(t) * weights).sum(), x, step=1e-5) < 1e-4
        assert grad_check_parameter(lambda: (block(Tensor(x)) * weights).sum(), block.spatial.wq, step=1e-5) < 1e-4

    def test_dual_block_rejects_wrong_width(self, rng, np_rng):
        with pytest.raises(ShapeError):
            EfficientDualBlock(AttentionConfig(d_model=4), rng)(np_rng.normal(size=(5, 3)))

    def test_skip_cross_attention(self, rng, np_rng):
        """Output keeps the skip shape; gradients flow through both inputs"""
        scca = SkipCrossAttention(6, 4, rng)
        decoder, skip = np_rng.normal(size=(5, 6)), np_rng.normal(size=(5, 4))
        assert scca(decoder, skip).shape == (5, 4)
        weights = np_rng.normal(size=(5, 4))
        assert grad_check(lambda d: (scca(d, skip) * weights).sum(), decoder, step=1e-5) < 1e-4
        assert grad_check(lambda s: (scca(decoder, s) * weights).sum(), skip, step=1e-5) < 1e-4

    def test_skip_cross_attention_token_mismatch(self, rng, np_rng):
        with pytest.raises(ShapeError):
            SkipCrossAttention(6, 4, rng)(np_rng.normal(size=(3, 6)), np_rng.normal(size=(5, 4)))

    def test_split_merge_heads_round_trip(self, np_rng):
        x = Tensor(np_rng.normal(size=(2, 5, 8)))
        heads = split_heads(x, 2)
        assert heads.shape == (2, 2, 5, 4)
        np.testing.assert_array_equal(merge_heads(heads, 2).data, x.data)

    def test_multi_head_block(self, np_rng):
        block = EfficientDualBlock(AttentionConfig(d_model=8, heads=2), RngStream(3))
        assert block(np_rng.normal(size=(4, 8))).shape == (4, 8)

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            AttentionConfig(d_model=6, heads=4)
