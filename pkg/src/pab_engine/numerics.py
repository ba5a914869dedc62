"""Dense numeric kernels with a fixed reduction order, plus a seeded PRNG.

Matrices are float ndarrays (row-major, float32 by default, float64 for
high-precision runs); the last two axes are the matrix, leading axes are
batch. Every contraction runs in ascending index order, so results are
reproducible bit-for-bit at a given precision and are unchanged when a batch
axis is sliced — worker-sharded runs reproduce single-worker arithmetic
exactly.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)

try:  # optional acceleration; the numpy path below is bit-identical
    if os.environ.get("PAB_ENGINE_DISABLE_NUMBA"):
        raise ImportError
    import numba

    @numba.njit(cache=True)
    def _mm_shared(a3, b2, out3):
        for bi in range(a3.shape[0]):
            ab = a3[bi]
            ob = out3[bi]
            for i in range(ab.shape[0]):
                row = ob[i]
                for j in range(b2.shape[1]):
                    row[j] = 0.0
                for k in range(ab.shape[1]):
                    aik = ab[i, k]
                    brow = b2[k]
                    for j in range(b2.shape[1]):
                        row[j] += aik * brow[j]

    @numba.njit(cache=True)
    def _mm_batched(a3, b3, out3):
        for bi in range(a3.shape[0]):
            ab = a3[bi]
            bb = b3[bi]
            ob = out3[bi]
            for i in range(ab.shape[0]):
                row = ob[i]
                for j in range(bb.shape[1]):
                    row[j] = 0.0
                for k in range(ab.shape[1]):
                    aik = ab[i, k]
                    brow = bb[k]
                    for j in range(bb.shape[1]):
                        row[j] += aik * brow[j]

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via PAB_ENGINE_DISABLE_NUMBA
    _HAVE_NUMBA = False


def _matmul_numpy(a: np.ndarray, b: np.ndarray, out: np.ndarray) -> np.ndarray:
    tmp = np.empty_like(out)
    for k in range(a.shape[-1]):
        np.multiply(a[..., :, k : k + 1], b[..., k : k + 1, :], out=tmp)
        out += tmp
    return out


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with ascending-k accumulation (bit-reproducible).

    Each output element accumulates a[i, k] * b[k, j] in ascending k with a
    single accumulator, exactly like a naive triple loop; the jitted path and
    the numpy path perform the identical sequence of roundings.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    dtype = np.result_type(a, b)
    out_shape = batch + (a.shape[-2], b.shape[-1])
    if _HAVE_NUMBA and dtype in (np.float32, np.float64):
        out = np.empty(out_shape, dtype=dtype)
        out3 = out.reshape((-1,) + out.shape[-2:])
        if b.ndim == 2:
            a3 = np.ascontiguousarray(
                np.broadcast_to(a, batch + a.shape[-2:]).reshape(out3.shape[0], *a.shape[-2:]),
                dtype=dtype,
            )
            _mm_shared(a3, np.ascontiguousarray(b, dtype=dtype), out3)
            return out
        if a.shape[:-2] == batch and b.shape[:-2] == batch:
            a3 = np.ascontiguousarray(a.reshape((-1,) + a.shape[-2:]), dtype=dtype)
            b3 = np.ascontiguousarray(b.reshape((-1,) + b.shape[-2:]), dtype=dtype)
            _mm_batched(a3, b3, out3)
            return out
    out = np.zeros(out_shape, dtype=dtype)
    return _matmul_numpy(a, b, out)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis, max-shifted for stability."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Normalize each row of the last axis to zero mean / unit variance, then affine."""
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"affine params must have shape ({x.shape[-1]},), got {gamma.shape} and {beta.shape}"
        )
    if not eps > 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return centered * inv * gamma + beta


def scaled_dot_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    capture_scores: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """softmax(q k^T / sqrt(d)) v; optionally also return the score matrix."""
    q = np.asarray(q)
    k = np.asarray(k)
    v = np.asarray(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"q/k feature dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"k/v row counts differ: {k.shape} vs {v.shape}")
    logits = matmul(q, np.swapaxes(k, -1, -2))
    logits *= 1.0 / math.sqrt(q.shape[-1])
    scores = softmax_rows(logits)
    out = matmul(scores, v)
    return out, (scores if capture_scores else None)


def gelu(x: np.ndarray) -> np.ndarray:
    """Elementwise GELU, tanh approximation."""
    x = np.asarray(x)
    inner = SQRT_2_OVER_PI * (x + 0.044715 * (x * x * x))
    return 0.5 * x * (1.0 + np.tanh(inner))


_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK64 = (1 << 64) - 1


def _mix_arr(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    return z ^ (z >> np.uint64(31))


@dataclass
class RandomStream:
    """splitmix64 generator; advancing is a pure function of the state."""

    state: int

    def __post_init__(self):
        self.state &= _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def _raw(self, n: int) -> np.ndarray:
        # uint64 array arithmetic wraps mod 2^64, matching next_u64 exactly
        steps = np.arange(1, n + 1, dtype=np.uint64)
        states = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
        self.state = (self.state + n * _GOLDEN) & _MASK64
        return _mix_arr(states)

    def uniform(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        """n doubles in [lo, hi), from the top 53 bits of each draw."""
        if not lo < hi:
            raise ValidationError(f"uniform needs lo < hi, got [{lo}, {hi})")
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return lo + u * (hi - lo)

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller on consecutive uniform pairs."""
        pairs = (n + 1) // 2
        raw = self._raw(2 * pairs) >> np.uint64(11)
        # +1 keeps u1 in (0, 1] so the log never sees zero
        u1 = (raw[:pairs].astype(np.float64) + 1.0) * 2.0**-53
        u2 = raw[pairs:].astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]
