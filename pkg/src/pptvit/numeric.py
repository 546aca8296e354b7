"""Numeric kernels shared by the engine and the compression policies.

Features are stored as float32 arrays. Products and reductions are carried
out in float64 and rounded back to float32, which keeps sums stable across
BLAS builds.
"""

from __future__ import annotations

import math

import numpy as np

NORM_EPS = 1e-12
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _as_f64(x):
    return np.asarray(x, dtype=np.float64)


def matmul(a, b):
    """``a @ b`` with float64 accumulation, returned as float32."""
    return np.matmul(_as_f64(a), _as_f64(b)).astype(np.float32)


def transpose(a):
    return np.ascontiguousarray(np.swapaxes(np.asarray(a), -1, -2))


def layernorm(x, gamma, beta, eps=1e-6):
    x = _as_f64(x)
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    out = (x - mean) / np.sqrt(var + eps) * _as_f64(gamma) + _as_f64(beta)
    return out.astype(np.float32)


def gelu(x):
    """Tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _as_f64(x)
    out = 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + 0.044715 * x**3)))
    return out.astype(np.float32)


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite values")


def softmax_size_biased(logits, sizes):
    """Softmax over the last axis of ``logits + log(sizes)``.

    ``sizes`` broadcasts against the last axis of ``logits``; a key that
    stands for ``m`` merged tokens gets ``m`` times the weight of a single
    token with the same logit.
    """
    logits = _as_f64(logits)
    sizes = _as_f64(sizes)
    if sizes.ndim != 1 or sizes.shape[0] != logits.shape[-1]:
        raise ValueError(
            f"sizes length {sizes.shape} does not match logits {logits.shape}"
        )
    _check_finite(logits, "logits")
    _check_finite(sizes, "sizes")
    if np.any(sizes < 1):
        raise ValueError("token sizes must be >= 1")
    z = logits + np.log(sizes)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def row_softmax(logits):
    logits = np.asarray(logits)
    return softmax_size_biased(logits, np.ones(logits.shape[-1]))


def size_biased_attention(q, k, v, sizes, scale=None):
    """Single-head attention ``softmax(q k^T * scale + log s) v``.

    ``q`` is (M, dh), ``k`` and ``v`` are (N, dh), ``sizes`` has length N.
    Returns the (M, dh) output and the (M, N) attention matrix.
    """
    q, k, v = _as_f64(q), _as_f64(k), _as_f64(v)
    if scale is None:
        scale = q.shape[-1] ** -0.5
    attn = softmax_size_biased(q @ k.T * scale, sizes)
    return matmul(attn, v), attn


def cosine_similarity(a, b):
    """Cosine of the angle between two vectors; 0 when either norm < 1e-12."""
    a, b = _as_f64(a).ravel(), _as_f64(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def cosine_similarity_matrix(a, b):
    """Pairwise cosine similarity between the rows of ``a`` and ``b``."""
    a, b = _as_f64(a), _as_f64(b)
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    an = np.divide(a, na, out=np.zeros_like(a), where=na >= NORM_EPS)
    bn = np.divide(b, nb, out=np.zeros_like(b), where=nb >= NORM_EPS)
    return np.clip(an @ bn.T, -1.0, 1.0)


def population_variance(values):
    """Mean squared deviation from the mean (divides by N)."""
    values = _as_f64(values).ravel()
    if values.size == 0:
        raise ValueError("variance of an empty vector")
    mean = values.sum() / values.size
    return float(((values - mean) ** 2).sum() / values.size)


_GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _splitmix_mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    The state starts at ``seed mod 2**64``. Each draw adds the constant
    0x9E3779B97F4A7C15 to the state (mod 2**64) and returns the state passed
    through the SplitMix64 finalizer (shift 30, multiply 0xBF58476D1CE4E5B9,
    shift 27, multiply 0x94D049BB133111EB, shift 31). Because output ``k`` depends
    only on ``seed + k * gamma``, blocks of draws are computed vectorized and
    still match the one-at-a-time sequence bit for bit.

    Uniform floats use the top 53 bits: ``(u >> 11) * 2**-53``. Normal
    draws use Box-Muller on consecutive pairs ``(u1, u2)`` and keep only the
    cosine branch: ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``.
    """

    def __init__(self, seed=0):
        self.state = int(seed) & _MASK

    def next_u64_block(self, n):
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _splitmix_mix(z)
        self.state = (self.state + n * _GAMMA) & _MASK
        return out

    def next_u64(self):
        return int(self.next_u64_block(1)[0])

    def random(self, n):
        u = self.next_u64_block(n)
        return (u >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))

    def normal(self, n, std=1.0):
        u = self.random(2 * n).reshape(n, 2)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:, 0]))
        return std * r * np.cos(2.0 * np.pi * u[:, 1])

    def coin(self):
        return bool(self.next_u64() >> 63)

    def integers(self, low, high, n):
        """Uniform integers in ``[low, high)``."""
        return low + np.floor(self.random(n) * (high - low)).astype(np.int64)
