import numpy as np
import pytest

from mvgate import tensor as tc
from mvgate.logs import CLS, PAD
from mvgate.model import (
    Batch, ModelConfig, ParamStore, attention_logits, embed_views, encoder_forward, forward,
    gated_attention_layer, init_params, param_shapes, risk_gate, _layer_params,
)
from mvgate.tensor import Tensor


def _cfg(**kw):
    base = dict(vocab_size=10, max_len=16, d_model=8, n_heads=2, n_layers=2, mlp_layers=3, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def _batch(B=2, T=5, seed=0):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(3, 10, size=(B, T))
    tokens[:, 0] = CLS
    mask = np.ones((B, T), bool)
    mask[1, T - 2:] = False
    tokens[~mask] = PAD
    status = rng.integers(0, 4, size=(B, T))
    freq = rng.uniform(-1, 3, size=(B, T))
    return Batch(tokens, status, freq, mask, np.array([0, 1][:B] * B)[:B])


def _params(cfg, seed=0, dtype=np.float64):
    return init_params(cfg, np.random.default_rng(seed), dtype=dtype)


class TestEmbedViews:
    def test_shapes(self):
        e_z, e_s, e_f = embed_views(_batch(), _params(_cfg()))
        assert e_z.shape == e_s.shape == e_f.shape == (2, 5, 8)

    def test_zero_status_gives_bias_row(self):
        cfg = _cfg()
        p = _params(cfg)
        p["status_b"].data[:] = np.arange(8)
        b = _batch()
        b.status[:] = 0
        _, e_s, _ = embed_views(b, p)
        np.testing.assert_array_equal(e_s.data, np.broadcast_to(np.arange(8.0), (2, 5, 8)))

    def test_zero_projection_gives_bias_row(self):
        p = _params(_cfg())
        p["freq_w"].data[:] = 0.0
        p["freq_b"].data[:] = 0.5
        _, _, e_f = embed_views(_batch(), p)
        np.testing.assert_array_equal(e_f.data, 0.5)

    def test_sequence_longer_than_max_len(self):
        with pytest.raises(ValueError):
            embed_views(_batch(T=20), _params(_cfg()))


class TestRiskGate:
    def _views(self, B=2, T=4, d=3):
        rng = np.random.default_rng(1)
        return Tensor(rng.normal(size=(B, T, d))), Tensor(rng.normal(size=(B, T, d)))

    def test_zero_weights_give_half_except_cls_and_pad(self):
        e_s, e_f = self._views()
        ev = np.array([[False, True, True, True], [False, True, False, False]])
        g = risk_gate(e_s, e_f, Tensor(np.zeros((6, 1))), Tensor(np.zeros(1)), ev).data
        np.testing.assert_array_equal(g[ev], 0.5)
        np.testing.assert_array_equal(g[~ev], 1.0)

    def test_saturation(self):
        e_s, e_f = self._views()
        g = risk_gate(e_s, e_f, Tensor(np.zeros((6, 1))), Tensor(np.array([20.0])), np.ones((2, 4), bool)).data
        np.testing.assert_allclose(g, 1.0, atol=1e-8)

    def test_hand_set_scalar_case(self):
        g = risk_gate(Tensor(np.array([[[2.0]]])), Tensor(np.array([[[-1.0]]])),
                      Tensor(np.array([[0.5], [0.25]])), Tensor(np.zeros(1)), np.ones((1, 1), bool))
        assert g.data[0, 0] == pytest.approx(0.679179, abs=1e-6)
        assert g.data[0, 0] == pytest.approx(1 / (1 + np.exp(-0.75)), abs=1e-15)


class TestGatedAttention:
    def _setup(self):
        cfg = _cfg()
        p = _params(cfg)
        h = Tensor(np.random.default_rng(2).normal(size=(2, 5, 8)))
        return cfg, p, h, _layer_params(p, 0)

    def test_unit_gate_matches_ungated_bitwise(self):
        cfg, p, h, lp = self._setup()
        mask = np.ones((2, 5), bool)
        a = gated_attention_layer(h, Tensor(np.ones((2, 5))), lp, mask, 2).data
        b = gated_attention_layer(h, None, lp, mask, 2).data
        np.testing.assert_array_equal(a, b)

    def test_logits_scale_linearly_in_gate(self):
        cfg, p, h, lp = self._setup()
        g = np.random.default_rng(3).uniform(0.01, 1.0, size=(2, 5))
        base, _ = attention_logits(h, Tensor(np.ones((2, 5))), lp, 2)
        gated, _ = attention_logits(h, Tensor(g), lp, 2)
        np.testing.assert_allclose(gated.data, base.data * g[:, None, None, :], rtol=1e-12, atol=1e-15)

    def test_single_position_hand_evaluated(self):
        cfg, p, _, lp = self._setup()
        x = np.random.default_rng(4).normal(size=(1, 1, 8))
        out = gated_attention_layer(Tensor(x), Tensor(np.array([[0.3]])), lp, np.ones((1, 1), bool), 2).data
        a = {k: v.data for k, v in lp.items()}

        def ln(v, g, b):
            return (v - v.mean(-1, keepdims=True)) / np.sqrt(v.var(-1, keepdims=True) + 1e-5) * g + b

        # one position: attention weight is 1, so the context is just the value
        h1 = ln(x + (x @ a["w_v"]) @ a["w_o"], a["ln1_g"], a["ln1_b"])
        ff = np.maximum(h1 @ a["ffn_w1"] + a["ffn_b1"], 0) @ a["ffn_w2"] + a["ffn_b2"]
        np.testing.assert_allclose(out, ln(h1 + ff, a["ln2_g"], a["ln2_b"]), atol=1e-10)

    def test_padded_keys_get_no_attention(self):
        cfg = _cfg()
        trace = {}
        encoder_forward(_batch(), _params(cfg), cfg, trace=trace)
        for attn in trace["attn"]:
            assert np.all(attn[1, :, :, 3:] == 0.0)


class TestEncoderAndHead:
    def test_gate_disabled_forces_unit_gate(self):
        cfg = _cfg(gate_enabled=False)
        p, b = _params(cfg), _batch()
        trace = {}
        h1, _, _ = encoder_forward(b, p, cfg, trace=trace)
        np.testing.assert_array_equal(trace["gate"], 1.0)
        h2, _, _ = encoder_forward(b, p, _cfg(), gate_override=np.ones((2, 5)))
        np.testing.assert_array_equal(h1.data, h2.data)

    def test_deterministic_with_dropout_seed(self):
        cfg = _cfg(dropout=0.3)
        p, b = _params(cfg), _batch()
        a = encoder_forward(b, p, cfg, rng=np.random.default_rng(7))[0].data
        c = encoder_forward(b, p, cfg, rng=np.random.default_rng(7))[0].data
        np.testing.assert_array_equal(a, c)

    def test_all_zero_params_give_half(self):
        cfg = _cfg()
        p = ParamStore.from_arrays({k: np.zeros(s) for k, s in param_shapes(cfg).items()})
        np.testing.assert_array_equal(forward(_batch(), p, cfg).data, 0.5)

    def test_fused_width(self):
        shapes = param_shapes(_cfg())
        assert shapes["head.0.w"][0] == 24
        assert param_shapes(_cfg(status_enabled=False))["head.0.w"][0] == 24

    def test_status_ablation_zeroes_pooled_status(self):
        cfg = _cfg(status_enabled=False)
        _, e_s, _ = encoder_forward(_batch(), _params(cfg), cfg)
        np.testing.assert_array_equal(e_s.data, 0.0)

    def test_output_probabilities(self):
        cfg = _cfg()
        y = forward(_batch(), _params(cfg), cfg).data
        assert y.shape == (2,) and np.all((y > 0) & (y < 1))

    def test_gate_weights_receive_gradient(self):
        cfg = _cfg()
        p = _params(cfg)
        tc.backward(tc.bce(forward(_batch(), p, cfg), np.array([1, 0])), leaves=p.tensors())
        assert np.abs(p["gate_w"].grad).sum() > 0
        assert np.abs(p["gate_b"].grad).sum() > 0

    def test_ungated_model_gives_gate_no_gradient(self):
        cfg = _cfg(gate_enabled=False)
        p = _params(cfg)
        tc.backward(tc.bce(forward(_batch(), p, cfg), np.array([1, 0])), leaves=p.tensors())
        np.testing.assert_array_equal(p["gate_w"].grad, 0.0)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(d_model=7), dict(n_heads=3), dict(n_layers=0),
                                    dict(max_len=1), dict(vocab_size=3), dict(dropout=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            _cfg(**kw)

    def test_dict_round_trip_and_unknown_keys(self):
        c = _cfg(mlp_hidden=64)
        assert ModelConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            ModelConfig.from_dict({**c.to_dict(), "bogus": 1})

    def test_init_statistics(self):
        cfg = _cfg(vocab_size=2000, d_model=32)
        p = _params(cfg)
        assert p["token_emb"].data.std() == pytest.approx(0.02, rel=0.05)
        for name in p:
            if name.endswith(("_b", ".b", "_b1", "_b2")) and not name.startswith(("status", "freq")):
                np.testing.assert_array_equal(p[name].data, 0.0, err_msg=name)
        assert init_params(cfg, np.random.default_rng(0))["token_emb"].dtype == np.float32
