"""
Dense math kernels for the inference engine

Every forward path (baseline, precomputed, metered) is built from the
functions in this module. They know nothing about models.

Mathematical Foundations:
- Matrix product with a fixed left-to-right float32 accumulation order
- RMSNorm and LayerNorm (pre-normalization boxes of a transformer layer)
- Max-subtracted softmax
- Rotary position embedding on adjacent (2i, 2i+1) pairs
- SiLU, exact GELU and the interleaved sinusoidal positional encoding

Implementation Notes:
- All tensors are float32. Sums are never delegated to BLAS or to numpy's
  pairwise reduction: both reorder additions, which would make the baseline
  and the precomputed path round differently on identical expressions.
- Kernels take a trailing feature axis and any number of leading row axes.
  Row r of a batched call is bit-identical to the unbatched call on row r.
- Pure functions, no shared state; safe to call from several threads.
"""

import numpy as np
from scipy.special import erf, expit

from ..errors import ShapeError

DTYPE = np.float32
DEFAULT_EPS = 1e-5
DEFAULT_ROPE_BASE = 10000.0
# upper bound on the a·b product buffer matmul allocates at once
MATMUL_BLOCK_ELEMENTS = 1 << 22


def matmul(a, b, block_elements=MATMUL_BLOCK_ELEMENTS):
    """
    Matrix product a[m×k] · b[k×n] with deterministic summation order.

    Each output element is accumulated over k strictly left to right in
    float32, so the result equals a scalar triple-loop oracle bit for bit.
    Rows of a are processed in blocks so the m×k×n product buffer stays
    under `block_elements` (one row at a time at minimum).
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    if k == 0:
        return np.zeros((m, n), dtype=DTYPE)
    out = np.empty((m, n), dtype=DTYPE)
    rows = max(1, block_elements // max(1, k * n))
    for start in range(0, m, rows):
        products = a[start:start + rows, :, None] * b[None, :, :]
        # accumulate runs sequentially along k
        out[start:start + rows] = np.add.accumulate(products, axis=1, dtype=DTYPE)[:, -1, :]
    return out


def fixed_sum(x):
    """Left-to-right float32 sum over the last axis."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] == 0:
        return np.zeros(x.shape[:-1], dtype=DTYPE)
    return np.add.accumulate(x, axis=-1, dtype=DTYPE)[..., -1]


def rmsnorm(x, gain, eps=DEFAULT_EPS):
    """
    Root-mean-square normalization.

    y_i = gain_i · x_i / sqrt(mean(x²) + eps)
    """
    x = np.asarray(x, dtype=DTYPE)
    gain = np.asarray(gain, dtype=DTYPE)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,):
        raise ShapeError(f"rmsnorm: x {x.shape} does not match gain {gain.shape}")
    mean_sq = fixed_sum(x * x) / DTYPE(d)
    denom = np.sqrt(mean_sq + DTYPE(eps))
    return (x / denom[..., None]) * gain


def layernorm(x, gain, bias, eps=DEFAULT_EPS):
    """Mean-centred, variance-normalized affine transform."""
    x = np.asarray(x, dtype=DTYPE)
    gain = np.asarray(gain, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    d = x.shape[-1]
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layernorm: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mean = fixed_sum(x) / DTYPE(d)
    centred = x - mean[..., None]
    var = fixed_sum(centred * centred) / DTYPE(d)
    denom = np.sqrt(var + DTYPE(eps))
    return (centred / denom[..., None]) * gain + bias


def softmax_row(x):
    """Numerically stable softmax over the last axis."""
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] == 0:
        raise ShapeError("softmax of an empty row")
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / fixed_sum(ex)[..., None]


def rope_angles(position, h, base=DEFAULT_ROPE_BASE):
    """cos/sin tables (float32, length h/2) for a single position."""
    if h % 2:
        raise ShapeError(f"RoPE needs an even width, got {h}")
    if base <= 0:
        raise ShapeError(f"RoPE base must be positive, got {base}")
    i = np.arange(h // 2, dtype=np.float64)
    theta = float(position) * np.power(float(base), -2.0 * i / h)
    return np.cos(theta).astype(DTYPE), np.sin(theta).astype(DTYPE)


def rope_rotate(x, position, base=DEFAULT_ROPE_BASE):
    """
    Rotates adjacent pairs (x_2i, x_2i+1) by θ_i = position · base^(−2i/h).

    The last axis is the head width h; leading axes (e.g. heads) share the
    same position.
    """
    x = np.asarray(x, dtype=DTYPE)
    h = x.shape[-1]
    cos, sin = rope_angles(position, h, base)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def silu(x):
    x = np.asarray(x, dtype=DTYPE)
    return x * expit(x)


def gelu(x):
    """Exact (erf) GELU."""
    x = np.asarray(x, dtype=DTYPE)
    return DTYPE(0.5) * x * (DTYPE(1.0) + erf(x / DTYPE(np.sqrt(2.0))).astype(DTYPE))


ACTIVATIONS = {"silu": silu, "gelu": gelu}


def sinusoidal_pe(position, d, base=DEFAULT_ROPE_BASE):
    """
    Absolute positional encoding with interleaved slots:
    pe[2i] = sin(position · base^(−2i/d)), pe[2i+1] = cos(same angle).
    """
    if d % 2:
        raise ShapeError(f"sinusoidal encoding needs an even width, got {d}")
    i = np.arange(d // 2, dtype=np.float64)
    angle = float(position) * np.power(float(base), -2.0 * i / d)
    pe = np.empty(d, dtype=DTYPE)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return pe
