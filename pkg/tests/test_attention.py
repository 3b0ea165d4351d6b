import numpy as np
import pytest

import bidicap.numerics as nx
from bidicap.attention import (
    NEG_INF,
    AttentionMask,
    HeadProjection,
    bidir_interactive_attention,
    multi_head,
    scaled_dot_attention,
)
from bidicap.errors import MaskError, ShapeError
from bidicap.numerics import Tensor

from oracles import causal_additive_mask, reference_attention, reference_bidir_heads, reference_multi_head


def t(x):
    return Tensor(np.asarray(x, dtype=np.float64))


def random_proj(rng, d_model, n_heads, d_k=None, d_v=None):
    d_k = d_k or d_model // n_heads
    d_v = d_v or d_model // n_heads
    return HeadProjection(
        t(rng.normal(size=(d_model, n_heads * d_k))),
        t(rng.normal(size=(d_model, n_heads * d_k))),
        t(rng.normal(size=(d_model, n_heads * d_v))),
        t(rng.normal(size=(n_heads * d_v, d_model))),
        n_heads,
    )


class TestScaledDotAttention:
    def test_single_key_returns_value_exactly(self, rng):
        q = t(rng.normal(size=(1, 4)))
        k = t(rng.normal(size=(1, 4)))
        v = t(rng.normal(size=(1, 3)))
        out = scaled_dot_attention(q, k, v)
        assert np.array_equal(out.data, v.data)

    def test_zero_scores_average_values(self, rng):
        q = t(np.zeros((2, 4)))
        k = t(rng.normal(size=(3, 4)))
        v = t(rng.normal(size=(3, 5)))
        out = scaled_dot_attention(q, k, v)
        assert np.allclose(out.data, v.data.mean(axis=0), atol=1e-12)

    def test_two_by_two_against_direct_formula(self, rng):
        q = rng.normal(size=(2, 2))
        k = rng.normal(size=(2, 2))
        v = rng.normal(size=(2, 2))
        out = scaled_dot_attention(t(q), t(k), t(v))
        assert np.allclose(out.data, reference_attention(q, k, v), atol=1e-12)

    def test_causal_mask_matches_reference(self, rng):
        q = rng.normal(size=(4, 3))
        k = rng.normal(size=(4, 3))
        v = rng.normal(size=(4, 2))
        mask = AttentionMask.causal(4, np.float64)
        out = scaled_dot_attention(t(q), t(k), t(v), mask)
        ref = reference_attention(q, k, v, causal_additive_mask(4))
        assert np.allclose(out.data, ref, atol=1e-12)

    def test_depth_mismatch(self):
        with pytest.raises(ShapeError, match="depth mismatch"):
            scaled_dot_attention(t(np.zeros((2, 3))), t(np.zeros((2, 4))),
                                 t(np.zeros((2, 4))))

    def test_fully_blocked_row_raises(self):
        mask = AttentionMask("custom", np.full((2, 2), NEG_INF))
        with pytest.raises(MaskError):
            scaled_dot_attention(t(np.zeros((2, 3))), t(np.zeros((2, 3))),
                                 t(np.zeros((2, 3))), mask)

    def test_causal_mask_is_lower_triangular(self):
        m = AttentionMask.causal(5).matrix
        for i in range(5):
            for j in range(5):
                assert (m[i, j] == 0) == (j <= i)


class TestMultiHead:
    def test_identity_projections_reduce_to_plain_attention(self, rng):
        d = 4
        eye = t(np.eye(d))
        proj = HeadProjection(eye, eye, eye, eye, 1)
        x = t(rng.normal(size=(3, d)))
        out = multi_head(x, x, x, None, proj)
        ref = scaled_dot_attention(x, x, x)
        assert np.allclose(out.data, ref.data, atol=1e-12)

    def test_zero_output_projection_annihilates(self, rng):
        proj = random_proj(rng, 6, 2)
        proj.wo = t(np.zeros((6, 6)))
        x = t(rng.normal(size=(4, 6)))
        assert np.array_equal(multi_head(x, x, x, None, proj).data, np.zeros((4, 6)))

    def test_two_heads_against_per_head_oracle(self, rng):
        proj = random_proj(rng, 6, 2)
        q = rng.normal(size=(3, 6))
        k = rng.normal(size=(5, 6))
        v = rng.normal(size=(5, 6))
        out = multi_head(t(q), t(k), t(v), None, proj)
        ref = reference_multi_head(q, k, v, None, proj.wq.data, proj.wk.data,
                                   proj.wv.data, proj.wo.data, 2)
        assert np.allclose(out.data, ref, atol=1e-12)

    def test_batched_input_matches_per_example(self, rng):
        proj = random_proj(rng, 6, 3)
        xb = rng.normal(size=(4, 5, 6))
        out = multi_head(t(xb), t(xb), t(xb), None, proj)
        for i in range(4):
            one = multi_head(t(xb[i]), t(xb[i]), t(xb[i]), None, proj)
            assert np.allclose(out.data[i], one.data, atol=1e-12)


class TestBidirInteractive:
    def test_lam_zero_is_bitwise_two_independent_attentions(self, rng):
        proj = random_proj(rng, 8, 2)
        mask = AttentionMask.causal(5, np.float64)
        xf = t(rng.normal(size=(5, 8)))
        xb = t(rng.normal(size=(5, 8)))
        hf, hb = bidir_interactive_attention(xf, xb, proj, 0.0, "relu", mask)
        assert np.array_equal(hf.data, multi_head(xf, xf, xf, mask, proj).data)
        assert np.array_equal(hb.data, multi_head(xb, xb, xb, mask, proj).data)

    def test_equal_flows_give_equal_outputs(self, rng):
        proj = random_proj(rng, 8, 2)
        mask = AttentionMask.causal(4, np.float64)
        x = t(rng.normal(size=(4, 8)))
        hf, hb = bidir_interactive_attention(x, x, proj, 0.0, "relu", mask)
        assert np.array_equal(hf.data, hb.data)

    @pytest.mark.parametrize("af", ["relu", "tanh"])
    def test_small_case_against_direct_fusion_formula(self, rng, af):
        proj = random_proj(rng, 2, 1, d_k=2, d_v=2)
        mask = AttentionMask.causal(2, np.float64)
        xf = rng.normal(size=(2, 2))
        xb = rng.normal(size=(2, 2))
        hf, hb = bidir_interactive_attention(t(xf), t(xb), proj, 0.1, af, mask)
        rf, rb = reference_bidir_heads(xf, xb, proj.wq.data, proj.wk.data,
                                       proj.wv.data, proj.wo.data, 1, 0.1, af,
                                       causal_additive_mask(2))
        assert np.allclose(hf.data, rf, atol=1e-12)
        assert np.allclose(hb.data, rb, atol=1e-12)

    def test_flow_symmetry_swapping_inputs_swaps_outputs(self, rng):
        proj = random_proj(rng, 8, 2)
        mask = AttentionMask.causal(3, np.float64)
        xf = t(rng.normal(size=(3, 8)))
        xb = t(rng.normal(size=(3, 8)))
        hf, hb = bidir_interactive_attention(xf, xb, proj, 0.4, "tanh", mask)
        hb2, hf2 = bidir_interactive_attention(xb, xf, proj, 0.4, "tanh", mask)
        assert np.array_equal(hf.data, hf2.data)
        assert np.array_equal(hb.data, hb2.data)

    @pytest.mark.parametrize("seed", range(20))
    def test_causality_of_both_terms(self, seed):
        g = np.random.default_rng(seed)
        proj = random_proj(g, 6, 2)
        mask = AttentionMask.causal(5, np.float64)
        xf = g.normal(size=(5, 6))
        xb = g.normal(size=(5, 6))
        hf, hb = bidir_interactive_attention(t(xf), t(xb), proj, 0.3, "relu", mask)
        cut = int(g.integers(0, 4))
        for arrs in ((xf.copy(), xb), (xf, xb.copy())):
            pf, pb = (a.copy() for a in arrs)
            which = g.integers(0, 2)
            target = pf if which == 0 else pb
            target[cut + 1 :] += g.normal(size=target[cut + 1 :].shape)
            nf, nb2 = bidir_interactive_attention(t(pf), t(pb), proj, 0.3, "relu", mask)
            assert np.abs(nf.data[: cut + 1] - hf.data[: cut + 1]).max() < 1e-6
            assert np.abs(nb2.data[: cut + 1] - hb.data[: cut + 1]).max() < 1e-6

    def test_continuity_at_zero_cross_weight(self, rng):
        proj = random_proj(rng, 8, 2)
        mask = AttentionMask.causal(4, np.float64)
        xf = t(rng.normal(size=(4, 8)))
        xb = t(rng.normal(size=(4, 8)))
        h0, _ = bidir_interactive_attention(xf, xb, proj, 0.0, "relu", mask)
        h1, _ = bidir_interactive_attention(xf, xb, proj, 1e-8, "relu", mask)
        assert np.abs(h0.data - h1.data).max() < 1e-6

    def test_flow_shape_mismatch(self, rng):
        proj = random_proj(rng, 8, 2)
        mask = AttentionMask.causal(3, np.float64)
        with pytest.raises(ShapeError):
            bidir_interactive_attention(t(np.zeros((3, 8))), t(np.zeros((4, 8))),
                                        proj, 0.1, "relu", mask)

    def test_gradients_flow_through_fusion(self, rng):
        d, h = 4, 2
        make = lambda shape: Tensor(rng.normal(size=shape), requires_grad=True)
        proj = HeadProjection(make((d, d)), make((d, d)), make((d, d)), make((d, d)), h)
        mask = AttentionMask.causal(3, np.float64)
        xf = Tensor(rng.normal(size=(3, d)), requires_grad=True)
        xb = Tensor(rng.normal(size=(3, d)), requires_grad=True)
        w = rng.normal(size=(3, d))

        def loss():
            hf, hb = bidir_interactive_attention(xf, xb, proj, 0.2, "tanh", mask)
            return nx.tsum(nx.mul(nx.add(hf, hb), Tensor(w)))

        report = nx.grad_check(loss, [("xf", xf), ("xb", xb), ("wq", proj.wq),
                                      ("wk", proj.wk), ("wv", proj.wv),
                                      ("wo", proj.wo)], tolerance=1e-4)
        assert report.passed, str(report)
