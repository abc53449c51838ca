import json
import unittest

import numpy as np
import pytest

from firstlayer.engine import reference_values
from firstlayer.engine.analyzer import get_preset, preset_configs
from firstlayer.engine.model import (
    KVCache,
    ModelConfig,
    ModelWeights,
    attention_block,
    count_weights,
    embed,
    expected_shapes,
    ffn_block,
    forward_decode,
    forward_prefill,
    init_toy_weights,
    kv_dim,
    select_experts,
    seeded_uniform,
    toy_config,
)
from firstlayer.engine.metering import Meter
from firstlayer.engine.numerics import rope_rotate
from firstlayer.errors import CacheOverflowError, ConfigError, InputError, ShapeMismatchError


def big(n_kv_heads):
    return ModelConfig(dim=4096, n_layers=1, n_heads=32, n_kv_heads=n_kv_heads,
                       hidden_dim=16, vocab_size=8)


class TestConfig(unittest.TestCase):
    """ModelConfig validation and kv width"""

    def test_kv_dim_mha_gqa_mqa(self):
        self.assertEqual(kv_dim(big(32)), 4096)
        self.assertEqual(kv_dim(big(8)), 1024)
        self.assertEqual(kv_dim(big(1)), 128)

    def test_invalid_head_layouts(self):
        with self.assertRaises(ConfigError):
            toy_config(n_heads=3)
        with self.assertRaises(ConfigError):
            toy_config(n_heads=4, n_kv_heads=3)

    def test_other_validation(self):
        with self.assertRaises(ConfigError):
            toy_config(experts_top_k=2)
        with self.assertRaises(ConfigError):
            toy_config(layout="sideways")
        with self.assertRaises(ConfigError):
            toy_config(dim=0)

    def test_json_round_trip(self):
        config = toy_config(layout="parallel", n_experts=4, experts_top_k=2)
        self.assertEqual(ModelConfig.from_json(config.to_json()), config)

    def test_presets_round_trip(self):
        for config in preset_configs():
            with self.subTest(preset=config.name):
                self.assertEqual(ModelConfig.from_json(config.to_json()), config)

    def test_moe_defaults_to_top_two(self):
        self.assertEqual(toy_config(n_experts=4).experts_top_k, 2)
        self.assertEqual(toy_config(n_experts=4, experts_top_k=1).experts_top_k, 1)
        self.assertEqual(toy_config().experts_top_k, 1)
        data = toy_config().to_dict()
        del data["experts_top_k"]
        data["n_experts"] = 8
        self.assertEqual(ModelConfig.from_dict(data).experts_top_k, 2)

    def test_unknown_keys_rejected(self):
        data = toy_config().to_dict()
        data["dropout"] = 0.1
        with self.assertRaises(ConfigError):
            ModelConfig.from_json(json.dumps(data))

    def test_bad_json(self):
        with self.assertRaises(ConfigError):
            ModelConfig.from_json("{not json")


class TestCountWeights(unittest.TestCase):
    """Weight counts of the preset models"""

    def test_presets(self):
        for name, expected in reference_values.WEIGHT_COUNTS.items():
            with self.subTest(preset=name):
                self.assertEqual(count_weights(get_preset(name)).to_dict(), expected)

    def test_rounded_totals(self):
        for name, billions in reference_values.TOTAL_BILLIONS.items():
            total = count_weights(get_preset(name)).total
            self.assertEqual(round(total / 1e9, 1), billions)


def test_toy_init_is_deterministic():
    config = toy_config()
    a = init_toy_weights(config, seed=5)
    b = init_toy_weights(config, seed=5)
    c = init_toy_weights(config, seed=6)
    for name in expected_shapes(config):
        np.testing.assert_array_equal(a[name], b[name])
    assert not np.array_equal(a["embed.in"], c["embed.in"])


def test_seeded_uniform_range():
    values = seeded_uniform(123, 0, 10_000)
    assert values.dtype == np.float32
    assert values.min() >= -0.05 and values.max() <= 0.05
    assert abs(float(values.mean())) < 0.005


def test_gains_start_near_one():
    weights = init_toy_weights(toy_config(), seed=0)
    gain = weights["layer0.norm1.gain"]
    assert np.all(np.abs(gain - 1.0) <= 0.05 + 1e-6)


def test_weights_are_read_only(serial_weights):
    with pytest.raises(ValueError):
        serial_weights["embed.in"][0, 0] = 1.0


def test_wrong_tensor_set_rejected(serial_config, serial_weights):
    tensors = dict(serial_weights.tensors)
    del tensors["layer1.wq"]
    with pytest.raises(ShapeMismatchError):
        ModelWeights(serial_config, tensors)
    tensors = dict(serial_weights.tensors)
    tensors["layer1.wq"] = np.zeros((3, 3), dtype=np.float32)
    with pytest.raises(ShapeMismatchError):
        ModelWeights(serial_config, tensors)


class TestEmbed(unittest.TestCase):

    def setUp(self):
        self.weights = init_toy_weights(toy_config(), seed=0)

    def test_row_verbatim(self):
        np.testing.assert_array_equal(embed(self.weights, 0), self.weights["embed.in"][0])
        np.testing.assert_array_equal(embed(self.weights, 96), self.weights["embed.in"][96])

    def test_out_of_range(self):
        with self.assertRaises(InputError):
            embed(self.weights, 97)
        with self.assertRaises(InputError):
            embed(self.weights, -1)

    def test_metered_reads(self):
        meter = Meter()
        embed(self.weights, 3, meter)
        self.assertEqual(meter.embedding, 64)


def oracle_attention(config, tensors, x):
    """Direct per-head causal attention in float64 (q/k/v from x, no cache)."""
    seq = x.shape[0]
    hd = config.head_dim
    group = config.n_heads // config.n_kv_heads
    q = x.astype(np.float64) @ tensors["layer0.wq"]
    k = x.astype(np.float64) @ tensors["layer0.wk"]
    v = x.astype(np.float64) @ tensors["layer0.wv"]
    out = np.zeros((seq, config.dim))
    for h in range(config.n_heads):
        g = h // group
        qh = np.stack([rope_rotate(q[r, h * hd:(h + 1) * hd], r) for r in range(seq)]).astype(np.float64)
        kh = np.stack([rope_rotate(k[r, g * hd:(g + 1) * hd], r) for r in range(seq)]).astype(np.float64)
        vh = v[:, g * hd:(g + 1) * hd]
        for r in range(seq):
            scores = qh[r] @ kh[:r + 1].T / np.sqrt(hd)
            w = np.exp(scores - scores.max())
            w /= w.sum()
            out[r, h * hd:(h + 1) * hd] = w @ vh[:r + 1]
    return out @ tensors["layer0.wp"]


@pytest.mark.parametrize("n_kv_heads", [2, 1])
def test_attention_matches_per_head_oracle(n_kv_heads):
    config = ModelConfig(dim=8, n_layers=1, n_heads=2, n_kv_heads=n_kv_heads, hidden_dim=16,
                         vocab_size=11, max_seq_len=8)
    weights = init_toy_weights(config, seed=9)
    x = np.random.default_rng(0).standard_normal((5, 8)).astype(np.float32)
    got = attention_block(config, weights.tensors, 0, KVCache(config), 0, normed=x)
    np.testing.assert_allclose(got, oracle_attention(config, weights.tensors, x), atol=1e-6)


def test_single_token_attention_is_value_path():
    config = toy_config(n_kv_heads=4)
    weights = init_toy_weights(config, seed=0)
    x = np.random.default_rng(1).standard_normal((1, 64)).astype(np.float32)
    got = attention_block(config, weights.tensors, 0, KVCache(config), 0, normed=x)
    want = (x.astype(np.float64) @ weights["layer0.wv"]) @ weights["layer0.wp"]
    np.testing.assert_allclose(got, want, atol=1e-6)


def test_attention_cache_position_checked(serial_config, serial_weights):
    cache = KVCache(serial_config)
    with pytest.raises(InputError):
        attention_block(serial_config, serial_weights.tensors, 0, cache, 3,
                        normed=np.zeros((1, 64), dtype=np.float32))


class TestFFN(unittest.TestCase):

    def test_zero_input(self):
        config = toy_config()
        weights = init_toy_weights(config, seed=0)
        zeros = np.zeros((2, 64), dtype=np.float32)
        np.testing.assert_array_equal(ffn_block(config, weights.tensors, 0, zeros), zeros)

    def test_mlp2_scalar_oracle(self):
        config = ModelConfig(dim=8, n_layers=1, n_heads=2, n_kv_heads=2, hidden_dim=16, vocab_size=5)
        weights = init_toy_weights(config, seed=4)
        x = np.random.default_rng(2).standard_normal((1, 8)).astype(np.float32)
        up, down = weights["layer0.ffn.up"], weights["layer0.ffn.down"]
        hidden = [sum(float(x[0, i]) * float(up[i, j]) for i in range(8)) for j in range(16)]
        hidden = [h / (1.0 + np.exp(-h)) for h in hidden]
        want = [sum(hidden[j] * float(down[j, o]) for j in range(16)) for o in range(8)]
        np.testing.assert_allclose(ffn_block(config, weights.tensors, 0, x)[0], want, atol=1e-6)

    def test_swiglu_uses_gate(self):
        config = toy_config(ffn_kind="swiglu")
        weights = init_toy_weights(config, seed=0)
        self.assertIn("layer0.ffn.gate", weights.tensors)
        x = np.random.default_rng(0).standard_normal((1, 64)).astype(np.float32)
        self.assertEqual(ffn_block(config, weights.tensors, 0, x).shape, (1, 64))

    def test_expert_selection(self):
        order, gates = select_experts(np.array([0.1, 0.4, 0.1, 0.4]), 2)
        self.assertEqual(order.tolist(), [1, 3])
        np.testing.assert_allclose(gates, [0.5, 0.5])
        order, gates = select_experts(np.array([1.0]), 1)
        self.assertEqual(order.tolist(), [0])
        self.assertEqual(float(gates[0]), 1.0)

    def test_moe_block_runs(self):
        config = toy_config(layout="parallel", n_experts=4, experts_top_k=2)
        weights = init_toy_weights(config, seed=0)
        x = np.random.default_rng(0).standard_normal((3, 64)).astype(np.float32)
        out = ffn_block(config, weights.tensors, 0, x)
        self.assertEqual(out.shape, (3, 64))
        self.assertTrue(np.all(np.isfinite(out)))


def test_one_layer_scalar_reference():
    """d=4 single-token forward against a float64 reimplementation"""
    config = ModelConfig(dim=4, n_layers=1, n_heads=2, n_kv_heads=2, hidden_dim=8,
                         vocab_size=6, max_seq_len=4)
    w = {k: v.astype(np.float64) for k, v in init_toy_weights(config, seed=11).tensors.items()}

    def rms(x, gain):
        return gain * x / np.sqrt(np.mean(x * x) + 1e-5)

    x = w["embed.in"][2]
    h = rms(x, w["layer0.norm1.gain"])
    y = x + (h @ w["layer0.wv"]) @ w["layer0.wp"]
    up = rms(y, w["layer0.norm2.gain"]) @ w["layer0.ffn.up"]
    y = y + (up / (1.0 + np.exp(-up))) @ w["layer0.ffn.down"]
    want = rms(y, w["norm.final.gain"]) @ w["embed.out"]

    logits, _ = forward_prefill(config, init_toy_weights(config, seed=11), [2])
    np.testing.assert_allclose(logits[0], want, atol=1e-5)


@pytest.mark.parametrize("config_name", ["serial_config", "parallel_config", "moe_config"])
def test_prefill_decode_consistency(request, config_name):
    config = request.getfixturevalue(config_name)
    weights = init_toy_weights(config, seed=21)
    tokens = np.random.default_rng(4).integers(0, config.vocab_size, size=12).tolist()
    full, _ = forward_prefill(config, weights, tokens)

    _, cache = forward_prefill(config, weights, tokens[:5])
    for i, t in enumerate(tokens[5:], start=5):
        assert cache.length == i
        step = forward_decode(config, weights, t, cache)
        np.testing.assert_allclose(step, full[i], atol=1e-5)
    assert cache.length == len(tokens)


def test_causality(parallel_config, parallel_weights):
    tokens = [5, 9, 1, 40, 33, 2]
    altered = tokens[:3] + [7, 8, 90]
    a, _ = forward_prefill(parallel_config, parallel_weights, tokens)
    b, _ = forward_prefill(parallel_config, parallel_weights, altered)
    np.testing.assert_array_equal(a[:3], b[:3])
    assert not np.array_equal(a[3:], b[3:])


def test_layouts_differ(serial_config, parallel_config):
    tokens = [1, 2, 3]
    s, _ = forward_prefill(serial_config, init_toy_weights(serial_config, seed=0), tokens)
    p, _ = forward_prefill(parallel_config, init_toy_weights(parallel_config, seed=0), tokens)
    assert not np.allclose(s, p)


def test_absolute_pe_model_runs():
    config = toy_config(pos_encoding="absolute")
    weights = init_toy_weights(config, seed=0)
    logits, cache = forward_prefill(config, weights, [3, 4, 5])
    assert logits.shape == (3, 97)
    assert forward_decode(config, weights, 6, cache).shape == (97,)


def test_prefill_input_errors(serial_config, serial_weights):
    with pytest.raises(InputError):
        forward_prefill(serial_config, serial_weights, [])
    with pytest.raises(InputError):
        forward_prefill(serial_config, serial_weights, [97])
    with pytest.raises(CacheOverflowError):
        forward_prefill(serial_config, serial_weights, [1] * 65)


def test_decode_past_max_seq_len():
    config = toy_config(max_seq_len=3, n_layers=1)
    weights = init_toy_weights(config, seed=0)
    _, cache = forward_prefill(config, weights, [1, 2, 3])
    with pytest.raises(CacheOverflowError):
        forward_decode(config, weights, 4, cache)
    assert cache.length == 3


def test_config_mismatch(serial_config, parallel_weights):
    with pytest.raises(ConfigError):
        forward_prefill(serial_config, parallel_weights, [1])
