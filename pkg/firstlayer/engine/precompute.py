"""
First-layer precompute for RoPE transformers

In a RoPE model the inputs of the first layer's norm, Q, K, V (and, with
parallel attention/FFN, the FFN) depend only on the token id: position enters
later, when RoPE rotates q and k. So for every token in the vocabulary the
values

    [ q_pre (d) | k_pre (e) | v_pre (e) | skip_pre (d) ]      2(d+e) values

can be computed once, offline, and stored instead of the input embedding.

    parallel layout: skip_pre = x + FFN(norm1(x))
    serial layout:   skip_pre = x          (the FFN needs the attention output)

At runtime layer 0 only rotates q_pre/k_pre by the actual position, runs
attention with the cache, projects through P and adds skip_pre. Layers 1..
and the output head are unchanged.

Absolute positional encoding is added right after the embedding, which makes
the first layer's inputs position dependent; such models are rejected.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, IneligibleArchitecture, InputError
from .model import (
    ABSOLUTE,
    PARALLEL,
    KVCache,
    ModelWeights,
    apply_norm,
    check_tensor_set,
    check_tokens,
    expected_shapes,
    ffn_block,
    forward_decode,
    forward_prefill,
    freeze_tensors,
    layer_shapes,
    linear,
    output_head,
    run_layers,
    attention_block,
)
from .analyzer import eliminated_weights
from .numerics import DTYPE

logger = logging.getLogger(__name__)

TABLE_NAME = "layer0.precompute"
DEFAULT_TOLERANCE = 1e-4
TABLE_CHUNK_ROWS = 256


def check_eligible(config):
    if config.pos_encoding == ABSOLUTE:
        raise IneligibleArchitecture(IneligibleArchitecture.EXPLANATION)


def table_width(config):
    return 2 * (config.dim + config.kv_dim)


def table_columns(config):
    """Column slices of a table row: q, k, v, skip."""
    d, e = config.dim, config.kv_dim
    return {
        "q": slice(0, d),
        "k": slice(d, d + e),
        "v": slice(d + e, d + 2 * e),
        "skip": slice(d + 2 * e, 2 * d + 2 * e),
    }


def eliminated_tensor_shapes(config):
    """Layer-0 tensors folded into the table (the input embedding excluded)."""
    shapes = {}
    for name, shape in layer_shapes(config, 0).items():
        stem = name.split(".bias")[0]
        if stem in ("layer0.wq", "layer0.wk", "layer0.wv") or name.startswith("layer0.norm1."):
            shapes[name] = shape
        elif config.layout == PARALLEL and name.startswith("layer0.ffn."):
            shapes[name] = shape
    return shapes


def transformed_shapes(config):
    """Ordered name -> shape mapping of a precomputed checkpoint."""
    base = expected_shapes(config)
    dropped = set(eliminated_tensor_shapes(config)) | {"embed.in"}
    shapes = {TABLE_NAME: (config.vocab_size, table_width(config))}
    shapes.update((n, s) for n, s in base.items() if n not in dropped)
    return shapes


@dataclass(frozen=True)
class PrecomputeTable:
    """Per-token rows [q_pre | k_pre | v_pre | skip_pre], q/k not yet rotated."""

    config: object
    rows: np.ndarray = field(repr=False)

    def lookup(self, tokens):
        """Table rows of `tokens`, split into q, k, v and skip parts."""
        rows = self.rows[tokens]
        return {part: rows[..., cols] for part, cols in table_columns(self.config).items()}


def build_table(config, weights, chunk_rows=TABLE_CHUNK_ROWS):
    """
    Runs norm1, Q, K, V (and the parallel FFN + skip) of layer 0 for every
    vocabulary token. Rows are independent; they are processed in chunks.
    """
    check_eligible(config)
    if weights.config != config:
        raise ConfigError("config does not match the weights' config")
    tensors = weights.tensors
    vocab = config.vocab_size
    rows = np.empty((vocab, table_width(config)), dtype=DTYPE)
    cols = table_columns(config)
    logger.debug("building precompute table: %d tokens x %d values", vocab, rows.shape[1])
    for start in range(0, vocab, chunk_rows):
        end = min(start + chunk_rows, vocab)
        x = np.array(tensors["embed.in"][start:end], dtype=DTYPE)
        normed = apply_norm(config, tensors, "layer0.norm1", x)
        rows[start:end, cols["q"]] = linear(tensors, "layer0.wq", normed, 0)
        rows[start:end, cols["k"]] = linear(tensors, "layer0.wk", normed, 0)
        rows[start:end, cols["v"]] = linear(tensors, "layer0.wv", normed, 0)
        if config.layout == PARALLEL:
            rows[start:end, cols["skip"]] = x + ffn_block(config, tensors, 0, normed)
        else:
            rows[start:end, cols["skip"]] = x
    rows.setflags(write=False)
    return PrecomputeTable(config, rows)


@dataclass(frozen=True)
class TransformedModel:
    """Model whose input embedding and first-layer Q/K/V(/FFN) became a table."""

    config: object
    tensors: Mapping[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        if not self.config.precomputed:
            raise ConfigError("transformed model needs a config flagged precomputed")
        check_eligible(self.config)
        object.__setattr__(self, "tensors", freeze_tensors(self.tensors))
        check_tensor_set(self.tensors, transformed_shapes(self.config))

    @property
    def table(self):
        return PrecomputeTable(self.config, self.tensors[TABLE_NAME])

    @property
    def eliminated_convention(self):
        return eliminated_weights(self.config)

    @property
    def eliminated_actual(self):
        return sum(int(np.prod(s)) for s in eliminated_tensor_shapes(self.config).values())

    @property
    def table_size(self):
        return self.config.vocab_size * table_width(self.config)

    @property
    def n_scalars(self):
        return sum(t.size for t in self.tensors.values())


def transform_model(config, weights):
    """Builds the table and drops every tensor it replaces."""
    table = build_table(config, weights)
    new_config = config.replace(precomputed=True)
    dropped = set(eliminated_tensor_shapes(config)) | {"embed.in"}
    tensors = {TABLE_NAME: table.rows}
    tensors.update((n, t) for n, t in weights.tensors.items() if n not in dropped)
    model = TransformedModel(new_config, tensors)
    logger.info("transformed %s: eliminated %d weights (cost-model convention), %d scalars actual",
                config.name, model.eliminated_convention, model.eliminated_actual)
    return model


def forward_precomputed(transformed, tokens, cache=None, meter=None):
    """
    Runs tokens at positions cache.length.. through the fast path and returns
    logits [n × vocab]. Without a cache the tokens are a fresh prompt.
    Layer 0 reads one table row per token.
    """
    config = transformed.config
    tensors = transformed.tensors
    tokens = check_tokens(config, tokens)
    if cache is None:
        cache = KVCache(config)
    start = cache.length
    cache.reserve(len(tokens))

    parts = transformed.table.lookup(tokens)
    if meter is not None:
        meter.table_reads(len(tokens) * table_width(config))
    qkv = (parts["q"], parts["k"], parts["v"])
    attn = attention_block(config, tensors, 0, cache, start, qkv=qkv, meter=meter)
    y = parts["skip"] + attn
    if config.layout != PARALLEL:
        y = y + ffn_block(config, tensors, 0, apply_norm(config, tensors, "layer0.norm2", y), meter)

    x = run_layers(config, tensors, y, cache, start, first_layer=1, meter=meter)
    logits = output_head(config, tensors, x)
    cache.advance(len(tokens))
    return logits


def prefill_precomputed(transformed, tokens, meter=None):
    cache = KVCache(transformed.config)
    return forward_precomputed(transformed, tokens, cache, meter), cache


def decode_precomputed(transformed, token_id, cache, meter=None):
    return forward_precomputed(transformed, [token_id], cache, meter)[0]


# Dispatch on whichever model kind a checkpoint holds

def prefill(model, tokens, meter=None):
    if isinstance(model, TransformedModel):
        return prefill_precomputed(model, tokens, meter)
    return forward_prefill(model.config, model, tokens, meter)


def decode(model, token_id, cache, meter=None):
    if isinstance(model, TransformedModel):
        return decode_precomputed(model, token_id, cache, meter)
    return forward_decode(model.config, model, token_id, cache, meter)


def greedy_generate(model, tokens, steps, meter_factory=None):
    """
    Greedy argmax continuation. Returns (generated ids, per-step meters);
    meter_factory, when given, creates one fresh meter per decode step.
    """
    if steps < 0:
        raise InputError("steps must be non-negative")
    if steps and len(tokens) + steps - 1 > model.config.max_seq_len:
        raise InputError(f"prompt + {steps} steps exceeds max_seq_len={model.config.max_seq_len}")
    logits, cache = prefill(model, tokens)
    generated, meters = [], []
    for step in range(steps):
        next_id = int(np.argmax(logits[-1] if logits.ndim == 2 else logits))
        generated.append(next_id)
        if step == steps - 1:
            break
        meter = meter_factory() if meter_factory is not None else None
        logits = decode(model, next_id, cache, meter)
        meters.append(meter)
    return generated, meters


@dataclass(frozen=True)
class EquivalenceReport:
    max_abs_diff: float
    max_rel_diff: float
    max_abs_baseline: float
    tolerance: float
    n_prompts: int
    n_comparisons: int
    passed: bool

    def to_dict(self):
        return asdict(self)


def verify_equivalence(config, weights, transformed, n_prompts=100, seq_len=32, seed=0,
                       tol=DEFAULT_TOLERANCE):
    """
    Compares baseline and precomputed logits on seeded random prompts, for a
    full prefill and for token-by-token decode. Passes iff
    max |Δ| ≤ tol · (1 + max |baseline|).
    """
    if transformed.config != config.replace(precomputed=True):
        raise ConfigError("transformed model was not built from this config")
    if not isinstance(weights, ModelWeights):
        raise ConfigError("baseline weights expected")
    seq_len = min(seq_len, config.max_seq_len)
    if seq_len < 1 or n_prompts < 1:
        raise InputError("need at least one prompt of at least one token")
    rng = np.random.default_rng(seed)
    max_diff = 0.0
    max_base = 0.0
    finite = True
    n_cmp = 0

    def compare(base, fast):
        nonlocal max_diff, max_base, finite, n_cmp
        base = np.asarray(base, dtype=np.float64)
        fast = np.asarray(fast, dtype=np.float64)
        if not (np.all(np.isfinite(base)) and np.all(np.isfinite(fast))):
            finite = False
            return
        max_diff = max(max_diff, float(np.max(np.abs(base - fast))))
        max_base = max(max_base, float(np.max(np.abs(base))))
        n_cmp += 1

    for p in range(n_prompts):
        length = int(rng.integers(1, seq_len + 1))
        tokens = rng.integers(0, config.vocab_size, size=length).tolist()
        base_logits, _ = forward_prefill(config, weights, tokens)
        fast_logits, _ = prefill_precomputed(transformed, tokens)
        compare(base_logits, fast_logits)

        base_cache = KVCache(config)
        fast_cache = KVCache(transformed.config)
        for t in tokens:
            compare(forward_decode(config, weights, t, base_cache),
                    decode_precomputed(transformed, t, fast_cache))
        if (p + 1) % 25 == 0:
            logger.debug("verified %d/%d prompts, max diff so far %.3e", p + 1, n_prompts, max_diff)

    bound = tol * (1.0 + max_base)
    passed = finite and max_diff <= bound
    rel = max_diff / (1.0 + max_base) if finite else float("inf")
    return EquivalenceReport(max_diff if finite else float("inf"), rel, max_base, tol,
                             n_prompts, n_cmp, passed)
