"""Encoder branch tests: equation-level oracle, invariants, fusion."""

import numpy as np
import pytest

from lmacnet import autodiff as ad
from lmacnet import encoder as enc


def make_cfg(**kw):
    base = dict(modality="rgb", dim=8, n_queries=2, n_layers=1,
                self_attn_heads=2, dropout=0.0)
    base.update(kw)
    return enc.BranchConfig(**base)


def make_branch(seed=0, **kw):
    cfg = make_cfg(**kw)
    return enc.init_branch(cfg, ad.RngState(seed))


def zero_residual_contributions(layer):
    """Silence value projection, FFN output and self-attention output."""
    layer.w_v.data[:] = 0.0
    layer.ffn_w2.data[:] = 0.0
    layer.ffn_b2.data[:] = 0.0
    layer.self_attn.w_o.data[:] = 0.0


def layer_oracle(prev, feats, layer, cfg):
    """Independent float64 re-evaluation of one decoder layer."""
    def ln(x, g, b):
        mu = x.mean(-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(-1, keepdims=True)
        return xc / np.sqrt(var + 1e-5) * g + b

    f64 = lambda t: t.data.astype(np.float64)
    x = prev.astype(np.float64)
    feats = feats.astype(np.float64)
    q_in = ln(x, f64(layer.ln1_gain), f64(layer.ln1_bias)) if cfg.layer_norm else x
    q_hat = q_in + f64(layer.atomic_queries)
    q_t = q_hat @ f64(layer.w_q)
    keys = feats @ (f64(layer.w_v) if cfg.attn_logits == "values" else f64(layer.w_k))
    vals = feats @ f64(layer.w_v)
    logits = q_t @ keys.T / float(layer.tau.data)
    e = np.exp(logits - logits.max(-1, keepdims=True))
    attn = e / e.sum(-1, keepdims=True)
    x = x + attn @ vals

    h = ln(x, f64(layer.ln2_gain), f64(layer.ln2_bias)) if cfg.layer_norm else x
    h = np.maximum(h @ f64(layer.ffn_w1) + f64(layer.ffn_b1), 0.0)
    h = h @ f64(layer.ffn_w2) + f64(layer.ffn_b2)
    x = x + h

    s = ln(x, f64(layer.ln3_gain), f64(layer.ln3_bias)) if cfg.layer_norm else x
    sp = layer.self_attn
    qp, kp, vp = s @ f64(sp.w_q), s @ f64(sp.w_k), s @ f64(sp.w_v)
    dh = cfg.dim // cfg.self_attn_heads
    ctx = np.zeros_like(s)
    for hd in range(cfg.self_attn_heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        lg = qp[:, sl] @ kp[:, sl].T / np.sqrt(dh)
        ee = np.exp(lg - lg.max(-1, keepdims=True))
        a = ee / ee.sum(-1, keepdims=True)
        ctx[:, sl] = a @ vp[:, sl]
    x = x + ctx @ f64(sp.w_o)
    return x, attn


class TestInitBranch:
    def test_parameter_count_matches_closed_form(self):
        # paper-scale configuration: 5 queries, width 512, 2 layers, 8 heads
        k, d, layers = 5, 512, 2
        branch = make_branch(dim=d, n_queries=k, n_layers=layers, self_attn_heads=8)
        actual = sum(t.size for _, t, _ in branch.named())
        per_layer = k * d + 15 * d * d + (11 * d) + 1
        assert actual == layers * per_layer
        assert actual == enc.parameter_count(branch.config)

    def test_fixed_seed_is_bit_identical(self):
        a, b = make_branch(seed=7), make_branch(seed=7)
        for (na, ta, _), (nb, tb, _) in zip(a.named(), b.named()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            make_cfg(dim=6, self_attn_heads=4)

    def test_init_distributions(self):
        branch = make_branch(dim=64, n_queries=5)
        layer = branch.layers[0]
        bound = 1 / np.sqrt(64)
        assert np.max(np.abs(layer.w_q.data)) <= bound
        assert float(layer.tau.data) == pytest.approx(0.07)
        np.testing.assert_array_equal(layer.ln1_gain.data, np.ones(64))
        np.testing.assert_array_equal(layer.ffn_b1.data, np.zeros(256))
        # atomic queries are tight around zero
        assert np.std(layer.atomic_queries.data) < 0.1


class TestDecodeLayer:
    def test_single_segment_attention_is_one(self):
        branch = make_branch(seed=3)
        layer = branch.layers[0]
        zero_residual_contributions(layer)
        rng = ad.RngState(5)
        feats = ad.constant(rng.normal((1, 8)))
        prev = ad.constant(rng.normal((2, 8)))
        out, attn = enc.decode_layer(prev, feats, layer, branch.config)
        np.testing.assert_array_equal(attn.data, np.ones((2, 1)))
        # with all contributions silenced the layer is the identity
        np.testing.assert_allclose(out.data, prev.data, atol=1e-7)

    def test_single_segment_preffn_update_is_value_plus_prev(self):
        branch = make_branch(seed=3)
        layer = branch.layers[0]
        layer.ffn_w2.data[:] = 0.0
        layer.ffn_b2.data[:] = 0.0
        layer.self_attn.w_o.data[:] = 0.0
        rng = ad.RngState(5)
        feats = ad.constant(rng.normal((1, 8)))
        prev = ad.constant(rng.normal((2, 8)))
        out, _ = enc.decode_layer(prev, feats, layer, branch.config)
        v1 = feats.data @ layer.w_v.data
        np.testing.assert_allclose(out.data, prev.data + v1, atol=1e-6)

    def test_zero_features_zero_prev_give_uniform_attention(self):
        for layer_norm in (False, True):
            branch = make_branch(seed=1, layer_norm=layer_norm)
            feats = ad.zeros((4, 8))
            prev = ad.zeros((2, 8))
            _, attn = enc.decode_layer(prev, feats, branch.layers[0], branch.config)
            np.testing.assert_allclose(attn.data, np.full((2, 4), 0.25), atol=1e-6)

    @pytest.mark.parametrize("layer_norm", [False, True])
    @pytest.mark.parametrize("attn_logits", ["keys", "values"])
    def test_matches_equation_oracle(self, layer_norm, attn_logits):
        with ad.precision(np.float64):
            branch = make_branch(seed=11, dim=8, n_queries=2,
                                 layer_norm=layer_norm, attn_logits=attn_logits)
            layer = branch.layers[0]
            rng = ad.RngState(17)
            feats_np = rng.normal((4, 8))
            prev_np = rng.normal((2, 8))
            out, attn = enc.decode_layer(ad.constant(prev_np), ad.constant(feats_np),
                                         layer, branch.config)
            want_out, want_attn = layer_oracle(prev_np, feats_np, layer, branch.config)
        np.testing.assert_allclose(attn.data, want_attn, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(out.data, want_out, rtol=1e-9, atol=1e-12)

    def test_values_variant_ignores_w_k(self):
        branch = make_branch(seed=2, attn_logits="values")
        layer = branch.layers[0]
        rng = ad.RngState(3)
        feats = ad.constant(rng.normal((5, 8)))
        prev = ad.constant(rng.normal((2, 8)))
        _, attn_before = enc.decode_layer(prev, feats, layer, branch.config)
        layer.w_k.data[:] = 99.0   # must have no effect on the literal-values variant
        _, attn_after = enc.decode_layer(prev, feats, layer, branch.config)
        np.testing.assert_array_equal(attn_before.data, attn_after.data)


class TestRunBranch:
    def _seq(self, t_len=6, dim=8, seed=4, modality="rgb"):
        return enc.ModalitySequence(modality, ad.constant(ad.RngState(seed).normal((t_len, dim))))

    def test_one_layer_branch_equals_single_decode_call(self):
        branch = make_branch(seed=9, n_layers=1)
        seq = self._seq()
        out = enc.run_branch(seq, branch)
        direct, attn = enc.decode_layer(ad.zeros((2, 8)), seq.features,
                                        branch.layers[0], branch.config)
        np.testing.assert_array_equal(out.query_features.data, direct.data)
        np.testing.assert_array_equal(out.attention[0].data, attn.data)

    def test_attention_recorded_per_layer(self):
        branch = make_branch(seed=9, n_layers=3)
        out = enc.run_branch(self._seq(), branch)
        assert len(out.attention) == 3
        for attn in out.attention:
            assert attn.shape == (2, 6)
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-5)

    def test_permuting_segments_permutes_attention_columns(self):
        branch = make_branch(seed=13, n_layers=2)
        feats = ad.RngState(29).normal((6, 8))
        perm = np.array([3, 0, 5, 1, 4, 2])
        out = enc.run_branch(enc.ModalitySequence("rgb", ad.constant(feats)), branch)
        out_p = enc.run_branch(enc.ModalitySequence("rgb", ad.constant(feats[perm])), branch)
        for a, ap in zip(out.attention, out_p.attention):
            np.testing.assert_allclose(ap.data, a.data[:, perm], rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(out_p.query_features.data, out.query_features.data,
                                   rtol=1e-4, atol=1e-6)

    def test_positional_encoding_breaks_permutation_equivariance(self):
        branch = make_branch(seed=13, n_layers=1, positional_encoding=True)
        feats = ad.RngState(29).normal((6, 8))
        perm = np.array([3, 0, 5, 1, 4, 2])
        out = enc.run_branch(enc.ModalitySequence("rgb", ad.constant(feats)), branch)
        out_p = enc.run_branch(enc.ModalitySequence("rgb", ad.constant(feats[perm])), branch)
        assert not np.allclose(out_p.attention[0].data, out.attention[0].data[:, perm], atol=1e-4)

    def test_residual_identity_when_contributions_zeroed(self):
        branch = make_branch(seed=21, n_layers=2)
        for layer in branch.layers:
            zero_residual_contributions(layer)
        out = enc.run_branch(self._seq(), branch)
        np.testing.assert_array_equal(out.query_features.data, np.zeros((2, 8)))

    def test_first_layer_equals_atomic_queries_alone(self):
        # with zero previous features the additive query formula degenerates
        branch = make_branch(seed=31, n_layers=1)
        layer = branch.layers[0]
        seq = self._seq(seed=37)
        out = enc.run_branch(seq, branch)
        q_hat = layer.atomic_queries.data   # LN(0) is exactly the (zero) bias at init
        q_tilde = q_hat @ layer.w_q.data
        keys = seq.features.data @ layer.w_k.data
        logits = q_tilde @ keys.T / float(layer.tau.data)
        e = np.exp(logits - logits.max(-1, keepdims=True))
        np.testing.assert_allclose(out.attention[0].data, e / e.sum(-1, keepdims=True),
                                   rtol=1e-5, atol=1e-7)

    def test_modality_and_dim_validation(self):
        branch = make_branch()
        with pytest.raises(ValueError, match="modality"):
            enc.run_branch(self._seq(modality="flow"), branch)
        with pytest.raises(ValueError, match="dim"):
            enc.run_branch(enc.ModalitySequence("rgb", ad.zeros((4, 16))), branch)

    def test_training_mode_requires_rng(self):
        branch = make_branch(dropout=0.1)
        with pytest.raises(ValueError, match="rng"):
            enc.run_branch(self._seq(), branch, training=True)

    def test_multi_head_cross_attention_records_head_average(self):
        branch = make_branch(seed=17, cross_heads=2)
        out = enc.run_branch(self._seq(), branch)
        for attn in out.attention:
            assert attn.shape == (2, 6)
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-5)
        # single-head and two-head runs disagree (different attention pattern)
        single = enc.run_branch(self._seq(), make_branch(seed=17, cross_heads=1))
        assert not np.allclose(out.attention[0].data, single.attention[0].data)


class TestFuse:
    def _outputs(self, dims=(16, 16, 8), k=5, seed=2):
        rng = ad.RngState(seed)
        outs = {}
        for m, d in zip(enc.MODALITIES, dims):
            outs[m] = enc.BranchOutput(query_features=ad.constant(rng.normal((k, d))),
                                       attention=[])
        return outs

    def test_concat_dims(self):
        fused = enc.fuse(self._outputs(), enc.FUSION_CONCAT)
        assert fused.shape == (5, 40)

    def test_concat_order_and_split_recovery(self):
        outs = self._outputs()
        fused = enc.fuse(outs, enc.FUSION_CONCAT)
        np.testing.assert_array_equal(fused.data[:, :16], outs["rgb"].query_features.data)
        np.testing.assert_array_equal(fused.data[:, 16:32], outs["flow"].query_features.data)
        np.testing.assert_array_equal(fused.data[:, 32:], outs["audio"].query_features.data)

    def test_summation_doubles_duplicated_branch(self):
        outs = self._outputs(dims=(8, 8, 8))
        outs["flow"] = outs["rgb"]
        outs.pop("audio")
        fused = enc.fuse(outs, enc.FUSION_SUM)
        np.testing.assert_allclose(fused.data, 2 * outs["rgb"].query_features.data, rtol=1e-6)

    def test_summation_rejects_unequal_dims(self):
        with pytest.raises(ValueError, match="equal dims"):
            enc.fuse(self._outputs(), enc.FUSION_SUM)

    def test_single_modality_concat_passthrough(self):
        outs = {"rgb": self._outputs()["rgb"]}
        fused = enc.fuse(outs, enc.FUSION_CONCAT)
        np.testing.assert_array_equal(fused.data, outs["rgb"].query_features.data)
