"""
Transformer model: configuration, weights and the baseline forward pass

Covers the three first-layer shapes the precompute trick cares about:
- parallel attention/FFN with one shared pre-norm (GPT-J, Pythia style)
- serial layer with RoPE (Llama, Mistral, Mixtral style)
- serial layer with absolute sinusoidal encoding (vanilla transformer)

Attention is grouped-query attention; MHA (n_kv_heads = n_heads) and MQA
(n_kv_heads = 1) are its two degenerate cases. The FFN is a two-layer MLP,
a SwiGLU MLP, or a switch FFN with a top-k router.

Key Algorithms:
1. Pre-norm residual layer, parallel or serial arrangement
2. RoPE applied per head after the Q/K projections
3. Causal scaled dot-product attention over a per-layer KV cache
4. Prefill and one-token decode that share every kernel

Implementation Notes:
- Weights live in a flat name -> tensor mapping; the names are the
  checkpoint tensor names (embed.in, layer{i}.wq, ..., embed.out).
- A metering context can be passed to every forward function; when it is
  None nothing is counted.
- Engine processes one sequence at a time. Batches exist only in metering.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from types import MappingProxyType
from typing import Mapping, Optional

import numpy as np

from ..errors import CacheOverflowError, ConfigError, InputError, ShapeMismatchError
from .numerics import (
    ACTIVATIONS,
    DTYPE,
    fixed_sum,
    layernorm,
    matmul,
    rmsnorm,
    rope_rotate,
    silu,
    sinusoidal_pe,
    softmax_row,
)

logger = logging.getLogger(__name__)

PARALLEL = "parallel"
SERIAL = "serial"
LAYOUTS = (PARALLEL, SERIAL)
ROPE = "rope"
ABSOLUTE = "absolute"
POS_ENCODINGS = (ROPE, ABSOLUTE)
NORM_KINDS = ("rmsnorm", "layernorm")
FFN_KINDS = ("mlp2", "swiglu")
DEFAULT_EXPERTS_TOP_K = 2

TOY_INIT_SCALE = 0.05


@dataclass(frozen=True)
class ModelConfig:
    """Architecture descriptor. Validated on construction."""

    dim: int
    n_layers: int
    n_heads: int
    n_kv_heads: int
    hidden_dim: int
    vocab_size: int
    n_experts: int = 1
    experts_top_k: Optional[int] = None
    layout: str = SERIAL
    pos_encoding: str = ROPE
    norm_kind: str = "rmsnorm"
    ffn_kind: str = "mlp2"
    activation: str = "silu"
    rope_base: float = 10000.0
    pe_base: float = 10000.0
    norm_eps: float = 1e-5
    max_seq_len: int = 64
    bias: bool = False
    name: str = "custom"
    precomputed: bool = False

    def __post_init__(self):
        if self.experts_top_k is None:
            top_k = min(DEFAULT_EXPERTS_TOP_K, self.n_experts) if isinstance(self.n_experts, int) else 1
            object.__setattr__(self, "experts_top_k", top_k)
        for attr in ("dim", "n_layers", "n_heads", "n_kv_heads", "hidden_dim",
                     "vocab_size", "n_experts", "experts_top_k", "max_seq_len"):
            value = getattr(self, attr)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{attr} must be a positive integer, got {value!r}")
        _choice("layout", self.layout, LAYOUTS)
        _choice("pos_encoding", self.pos_encoding, POS_ENCODINGS)
        _choice("norm_kind", self.norm_kind, NORM_KINDS)
        _choice("ffn_kind", self.ffn_kind, FFN_KINDS)
        _choice("activation", self.activation, tuple(ACTIVATIONS))
        if self.experts_top_k > self.n_experts:
            raise ConfigError(
                f"experts_top_k={self.experts_top_k} exceeds n_experts={self.n_experts}")
        if self.rope_base <= 0 or self.pe_base <= 0:
            raise ConfigError("positional bases must be positive")
        if self.norm_eps < 0:
            raise ConfigError("norm_eps must be non-negative")
        kv_dim(self)
        if self.pos_encoding == ROPE and self.head_dim % 2:
            raise ConfigError(f"RoPE needs an even head width, got {self.head_dim}")
        if self.pos_encoding == ABSOLUTE and self.dim % 2:
            raise ConfigError(f"sinusoidal encoding needs an even dim, got {self.dim}")

    @property
    def head_dim(self):
        return self.dim // self.n_heads

    @property
    def kv_dim(self):
        return kv_dim(self)

    @property
    def is_moe(self):
        return self.n_experts >= 2

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, Mapping):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    def save_json(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def _choice(attr, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{attr} must be one of {allowed}, got {value!r}")


def kv_dim(config):
    """
    Width e of the K and V projections.

    e = d for MHA, d / n_heads for MQA, d · n_kv_heads / n_heads for GQA.
    """
    d, n_heads, n_kv = config.dim, config.n_heads, config.n_kv_heads
    if n_heads < 1 or n_kv < 1 or d % n_heads or n_heads % n_kv:
        raise ConfigError(
            f"dim={d}, n_heads={n_heads}, n_kv_heads={n_kv} is not a valid head layout")
    return d * n_kv // n_heads


def toy_config(**overrides):
    """Desk-scale default: d=64, 4 heads, 2 kv-heads, hidden 128, vocab 97, 3 layers."""
    base = dict(dim=64, n_layers=3, n_heads=4, n_kv_heads=2, hidden_dim=128,
                vocab_size=97, max_seq_len=64, name="toy")
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# Tensor naming
# ---------------------------------------------------------------------------

def _norm_shapes(config, prefix):
    shapes = {f"{prefix}.gain": (config.dim,)}
    if config.norm_kind == "layernorm":
        shapes[f"{prefix}.bias"] = (config.dim,)
    return shapes


def _linear_shapes(config, name, rows, cols):
    shapes = {name: (rows, cols)}
    if config.bias:
        shapes[f"{name}.bias"] = (cols,)
    return shapes


def _mlp_shapes(config, prefix):
    d, hidden = config.dim, config.hidden_dim
    shapes = {}
    if config.ffn_kind == "swiglu":
        shapes.update(_linear_shapes(config, f"{prefix}.gate", d, hidden))
    shapes.update(_linear_shapes(config, f"{prefix}.up", d, hidden))
    shapes.update(_linear_shapes(config, f"{prefix}.down", hidden, d))
    return shapes


def ffn_shapes(config, layer):
    prefix = f"layer{layer}.ffn"
    if not config.is_moe:
        return _mlp_shapes(config, prefix)
    shapes = {f"{prefix}.router": (config.dim, config.n_experts)}
    for j in range(config.n_experts):
        shapes.update(_mlp_shapes(config, f"{prefix}.expert{j}"))
    return shapes


def layer_shapes(config, layer):
    d, e = config.dim, config.kv_dim
    p = f"layer{layer}"
    shapes = dict(_norm_shapes(config, f"{p}.norm1"))
    shapes.update(_linear_shapes(config, f"{p}.wq", d, d))
    shapes.update(_linear_shapes(config, f"{p}.wk", d, e))
    shapes.update(_linear_shapes(config, f"{p}.wv", d, e))
    shapes.update(_linear_shapes(config, f"{p}.wp", d, d))
    if config.layout == SERIAL:
        shapes.update(_norm_shapes(config, f"{p}.norm2"))
    shapes.update(ffn_shapes(config, layer))
    return shapes


def expected_shapes(config):
    """Ordered name -> shape mapping of a baseline checkpoint."""
    shapes = {"embed.in": (config.vocab_size, config.dim)}
    for i in range(config.n_layers):
        shapes.update(layer_shapes(config, i))
    shapes.update(_norm_shapes(config, "norm.final"))
    shapes["embed.out"] = (config.dim, config.vocab_size)
    return shapes


def freeze_tensors(tensors):
    frozen = {}
    for name, value in tensors.items():
        arr = np.array(value, dtype=DTYPE, copy=True, order="C")
        arr.setflags(write=False)
        frozen[name] = arr
    return MappingProxyType(frozen)


def check_tensor_set(tensors, shapes):
    missing = [n for n in shapes if n not in tensors]
    extra = [n for n in tensors if n not in shapes]
    if missing or extra:
        raise ShapeMismatchError(
            f"tensor set does not match config (missing: {missing[:5]}, unexpected: {extra[:5]})")
    for name, shape in shapes.items():
        if tuple(tensors[name].shape) != tuple(shape):
            raise ShapeMismatchError(
                f"{name}: expected shape {tuple(shape)}, got {tuple(tensors[name].shape)}")


@dataclass(frozen=True)
class ModelWeights:
    """Immutable baseline weights (untied input/output embeddings)."""

    config: ModelConfig
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.config.precomputed:
            raise ConfigError("baseline weights cannot carry a precomputed config")
        object.__setattr__(self, "tensors", freeze_tensors(self.tensors))
        check_tensor_set(self.tensors, expected_shapes(self.config))

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def n_scalars(self):
        return sum(t.size for t in self.tensors.values())


@dataclass(frozen=True)
class WeightCount:
    qp_per_layer: int
    kv_per_layer: int
    ffn_per_layer: int
    embed_total: int
    total: int

    def to_dict(self):
        return asdict(self)


def count_weights(config):
    """
    Weight count with the two-matrix accounting used for the model comparison:
    Q+P = 2·d·d, K+V = 2·d·d/n_heads·n_kv_heads, FFN = 2·d·hidden·n_experts,
    embeddings = 2·d·vocab. Norms and biases are not counted; the SwiGLU gate
    is not counted either.
    """
    d = config.dim
    qp = 2 * d * d
    kv = 2 * d * d // config.n_heads * config.n_kv_heads
    ffn = 2 * d * config.hidden_dim * config.n_experts
    embed_total = 2 * d * config.vocab_size
    total = embed_total + config.n_layers * (qp + kv + ffn)
    return WeightCount(qp, kv, ffn, embed_total, total)


# ---------------------------------------------------------------------------
# Seeded toy weights
# ---------------------------------------------------------------------------

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_MUL2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed, start, count):
    """Outputs start+1 .. start+count of the splitmix64 stream for seed."""
    with np.errstate(over="ignore"):
        idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
        z = np.uint64(seed % (1 << 64)) + idx * _SM_GAMMA
        z = (z ^ (z >> np.uint64(30))) * _SM_MUL1
        z = (z ^ (z >> np.uint64(27))) * _SM_MUL2
        return z ^ (z >> np.uint64(31))


def seeded_uniform(seed, start, count, scale=TOY_INIT_SCALE):
    """Uniform float32 values in [-scale, scale) drawn from splitmix64."""
    bits = splitmix64(seed, start, count) >> np.uint64(11)
    unit = bits.astype(np.float64) * (1.0 / (1 << 53))
    return ((2.0 * unit - 1.0) * scale).astype(DTYPE)


def init_toy_weights(config, seed):
    """Deterministic random weights; norm gains are 1 + u, everything else u."""
    tensors = {}
    offset = 0
    for name, shape in expected_shapes(config).items():
        n = math.prod(shape)
        values = seeded_uniform(seed, offset, n)
        offset += n
        if name.endswith(".gain"):
            values = DTYPE(1.0) + values
        tensors[name] = values.reshape(shape)
    logger.debug("initialized %d toy tensors (%d scalars) with seed %d",
                 len(tensors), offset, seed)
    return ModelWeights(config, tensors)


# ---------------------------------------------------------------------------
# KV cache
# ---------------------------------------------------------------------------

class KVCache:
    """Per-layer rotated keys and values for one generation session."""

    def __init__(self, config):
        self.n_layers = config.n_layers
        self.max_seq_len = config.max_seq_len
        e = config.kv_dim
        self.keys = [np.zeros((self.max_seq_len, e), dtype=DTYPE) for _ in range(self.n_layers)]
        self.values = [np.zeros((self.max_seq_len, e), dtype=DTYPE) for _ in range(self.n_layers)]
        self.length = 0

    def reserve(self, n_new):
        if n_new < 1:
            raise InputError("no tokens to process")
        if self.length + n_new > self.max_seq_len:
            raise CacheOverflowError(
                f"sequence of {self.length + n_new} tokens exceeds max_seq_len={self.max_seq_len}")

    def write(self, layer, start, keys, values):
        end = start + keys.shape[0]
        if end > self.max_seq_len:
            raise CacheOverflowError(f"cache write up to {end} past max_seq_len={self.max_seq_len}")
        self.keys[layer][start:end] = keys
        self.values[layer][start:end] = values

    def advance(self, n):
        self.reserve(n)
        self.length += n


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def linear(tensors, name, x, layer, meter=None):
    """x · W (+ bias). Counts the weight fetch and FLOPs when metered."""
    w = tensors[name]
    if meter is not None:
        meter.weight_read(name, w)
        meter.add_flops(layer, 2 * x.shape[0] * w.size, name)
    y = matmul(x, w)
    b = tensors.get(f"{name}.bias")
    if b is not None:
        y = y + b
    return y


def apply_norm(config, tensors, prefix, x):
    gain = tensors[f"{prefix}.gain"]
    if config.norm_kind == "layernorm":
        return layernorm(x, gain, tensors[f"{prefix}.bias"], config.norm_eps)
    return rmsnorm(x, gain, config.norm_eps)


def check_tokens(config, tokens):
    tokens = [int(t) for t in tokens]
    if not tokens:
        raise InputError("empty token list")
    for t in tokens:
        if t < 0 or t >= config.vocab_size:
            raise InputError(f"token id {t} outside vocabulary of {config.vocab_size}")
    return tokens


def embed(weights, token_id, meter=None):
    """Row token_id of the input embedding table (a plain memory read of d values)."""
    config = weights.config
    (token_id,) = check_tokens(config, [token_id])
    if meter is not None:
        meter.embedding_reads(config.dim)
    return weights.tensors["embed.in"][token_id]


def embed_rows(config, tensors, tokens, meter=None):
    if meter is not None:
        meter.embedding_reads(config.dim * len(tokens))
    return np.array(tensors["embed.in"][tokens], dtype=DTYPE)


def attention_block(config, tensors, layer, cache, start_pos, normed=None, qkv=None, meter=None):
    """
    Attention branch of one layer, including the output projection P.

    Either `normed` (rows of the normalized layer input) or precomputed
    `qkv` = (q[seq×d], k[seq×e], v[seq×e]) before rotation must be given.
    Rotated keys and raw values for positions start_pos.. are written to
    the cache; cache.length must equal start_pos.
    """
    p = f"layer{layer}"
    if qkv is None:
        if normed is None:
            raise InputError("attention needs normalized input or precomputed q/k/v")
        q = linear(tensors, f"{p}.wq", normed, layer, meter)
        k = linear(tensors, f"{p}.wk", normed, layer, meter)
        v = linear(tensors, f"{p}.wv", normed, layer, meter)
    else:
        q, k, v = (np.asarray(t, dtype=DTYPE) for t in qkv)
    if cache.length != start_pos:
        raise InputError(f"cache holds {cache.length} positions, expected {start_pos}")

    seq = q.shape[0]
    n_heads, n_kv, hd = config.n_heads, config.n_kv_heads, config.head_dim
    group = n_heads // n_kv
    qh = q.reshape(seq, n_heads, hd)
    kh = k.reshape(seq, n_kv, hd)
    if config.pos_encoding == ROPE:
        qh = np.stack([rope_rotate(qh[r], start_pos + r, config.rope_base) for r in range(seq)])
        kh = np.stack([rope_rotate(kh[r], start_pos + r, config.rope_base) for r in range(seq)])
    cache.write(layer, start_pos, kh.reshape(seq, -1), v)

    scale = DTYPE(1.0 / math.sqrt(hd))
    out = np.empty((seq, config.dim), dtype=DTYPE)
    for r in range(seq):
        n_ctx = start_pos + r + 1
        keys = cache.keys[layer][:n_ctx].reshape(n_ctx, n_kv, hd)
        values = cache.values[layer][:n_ctx].reshape(n_ctx, n_kv, hd)
        for h in range(n_heads):
            g = h // group
            scores = matmul(qh[r, h][None, :], keys[:, g, :].T) * scale
            weights = softmax_row(scores)
            out[r, h * hd:(h + 1) * hd] = matmul(weights, values[:, g, :])[0]
        if meter is not None:
            meter.add_flops(layer, 4 * n_heads * n_ctx * hd)
    return linear(tensors, f"{p}.wp", out, layer, meter)


def mlp(config, tensors, prefix, x, layer, meter=None):
    """Dense FFN: down(act(up(x))) or down(silu(gate(x)) ⊙ up(x))."""
    if config.ffn_kind == "swiglu":
        hidden = silu(linear(tensors, f"{prefix}.gate", x, layer, meter)) * \
            linear(tensors, f"{prefix}.up", x, layer, meter)
    else:
        hidden = ACTIVATIONS[config.activation](linear(tensors, f"{prefix}.up", x, layer, meter))
    return linear(tensors, f"{prefix}.down", hidden, layer, meter)


def select_experts(probs, top_k):
    """
    Top-k experts of one row of router probabilities.

    Ties resolve to the lower expert index; selected scores are
    renormalized to sum to 1.
    """
    order = np.argsort(-np.asarray(probs, dtype=DTYPE), kind="stable")[:top_k]
    chosen = np.asarray(probs, dtype=DTYPE)[order]
    return order, chosen / fixed_sum(chosen)


def ffn_block(config, tensors, layer, normed, meter=None):
    prefix = f"layer{layer}.ffn"
    if not config.is_moe:
        return mlp(config, tensors, prefix, normed, layer, meter)
    if meter is not None:
        for name in ffn_shapes(config, layer):
            meter.bank_read(name, tensors[name], normed.shape[0])
    probs = softmax_row(linear(tensors, f"{prefix}.router", normed, layer, meter))
    out = np.empty_like(normed)
    for r in range(normed.shape[0]):
        experts, gates = select_experts(probs[r], config.experts_top_k)
        acc = np.zeros(config.dim, dtype=DTYPE)
        for j, gate in zip(experts, gates):
            acc = acc + gate * mlp(config, tensors, f"{prefix}.expert{j}", normed[r:r + 1], layer, meter)[0]
        out[r] = acc
    return out


def transformer_layer(config, tensors, layer, x, cache, start_pos, meter=None):
    """One pre-norm layer; parallel shares norm1 between attention and FFN."""
    normed = apply_norm(config, tensors, f"layer{layer}.norm1", x)
    attn = attention_block(config, tensors, layer, cache, start_pos, normed=normed, meter=meter)
    if config.layout == PARALLEL:
        return x + attn + ffn_block(config, tensors, layer, normed, meter)
    y = x + attn
    return y + ffn_block(config, tensors, layer, apply_norm(config, tensors, f"layer{layer}.norm2", y), meter)


def run_layers(config, tensors, x, cache, start_pos, first_layer=0, meter=None):
    for layer in range(first_layer, config.n_layers):
        x = transformer_layer(config, tensors, layer, x, cache, start_pos, meter)
    return x


def output_head(config, tensors, x):
    return matmul(apply_norm(config, tensors, "norm.final", x), tensors["embed.out"])


def positional_rows(config, start_pos, n):
    return np.stack([sinusoidal_pe(start_pos + r, config.dim, config.pe_base) for r in range(n)])


def _forward(config, tensors, tokens, cache, meter):
    start = cache.length
    cache.reserve(len(tokens))
    x = embed_rows(config, tensors, tokens, meter)
    if config.pos_encoding == ABSOLUTE:
        x = x + positional_rows(config, start, len(tokens))
    x = run_layers(config, tensors, x, cache, start, 0, meter)
    logits = output_head(config, tensors, x)
    cache.advance(len(tokens))
    return logits


def _check_config(config, weights):
    if config != weights.config:
        raise ConfigError("config does not match the weights' config")


def forward_prefill(config, weights, tokens, meter=None):
    """Processes a whole prompt; returns logits [seq × vocab] and the filled cache."""
    _check_config(config, weights)
    tokens = check_tokens(config, tokens)
    cache = KVCache(config)
    logits = _forward(config, weights.tensors, tokens, cache, meter)
    return logits, cache


def forward_decode(config, weights, token_id, cache, meter=None):
    """One autoregressive step at position cache.length; returns logits [vocab]."""
    _check_config(config, weights)
    tokens = check_tokens(config, [token_id])
    return _forward(config, weights.tensors, tokens, cache, meter)[0]
