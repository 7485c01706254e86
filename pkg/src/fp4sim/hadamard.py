"""Tiled random Hadamard transforms for spreading outliers before encoding.

A d x d orthonormal Hadamard matrix (Sylvester construction, every entry
+-1/sqrt(d)), optionally with sign-randomized rows, is applied to each
d-length segment along the dot-product dimension of a GEMM operand.  Because
H @ H.T = I, applying H to the K-segments of A and H.T to the matching
K-segments of B leaves A @ B unchanged in exact arithmetic while making the
individual operand entries closer to Gaussian, which is what the block
encoders prefer.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .rng import stream_key, uniforms


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class HadamardSpec:
    """Transform size and sign-randomization identity.

    d must be a power of two >= 2.  When randomized, the row-sign vector is
    drawn from a stream keyed by sign_seed, so equal specs build identical
    transforms in every process.
    """

    d: int = 16
    sign_seed: int = 0
    randomized: bool = True

    def __post_init__(self):
        if self.d < 2 or self.d & (self.d - 1):
            raise DimensionError("transform size must be a power of two >= 2")


def sign_vector(spec: HadamardSpec) -> np.ndarray:
    """Row signs in {-1, +1}; all ones when randomization is off."""
    if not spec.randomized:
        return np.ones(spec.d)
    u = uniforms(stream_key("rht-sign", spec.sign_seed, spec.d), spec.d)
    return np.where(u < 0.5, -1.0, 1.0)


@functools.lru_cache(maxsize=64)
def _build_hadamard_cached(spec: HadamardSpec) -> np.ndarray:
    h = np.array([[1.0]])
    size = 1
    while size < spec.d:
        h = np.block([[h, h], [h, -h]])
        size *= 2
    h = h / np.sqrt(spec.d)
    h = sign_vector(spec)[:, None] * h
    h.setflags(write=False)
    return h


def build_hadamard(spec: HadamardSpec) -> np.ndarray:
    """Orthonormal (sign-randomized) Hadamard matrix for the spec.

    Sylvester doubling from [[1]]; each entry is +-1/sqrt(d), and rows are
    flipped by the spec's sign vector.  Deterministic in the spec alone
    (and cached on it; the returned array is read-only).
    """
    return _build_hadamard_cached(spec)


def apply_rht_tiled(x, spec: HadamardSpec, h: np.ndarray | None = None) -> np.ndarray:
    """Multiply every d-length segment along the last axis by H.

    Each row segment v becomes v @ H.  Accumulation runs in ascending input
    index so the result is bitwise reproducible regardless of tiling or
    batching.  The last axis must be a multiple of d (callers pad first).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError("expected a 2-D operand")
    m, k = x.shape
    if k % spec.d:
        raise DimensionError(
            f"last axis {k} is not a multiple of the transform size {spec.d}")
    if h is None:
        h = build_hadamard(spec)
    xr = x.reshape(m, k // spec.d, spec.d)
    out = np.zeros_like(xr)
    for i in range(spec.d):
        out += xr[:, :, i, None] * h[i]
    return out.reshape(m, k)


def rht_pair_identity_check(a, b, spec: HadamardSpec) -> float:
    """Max absolute deviation of (A H)(H^T B) from A B.

    a is (m, k), b is (k, n); both sides use the same transform, so the
    deviation is pure float rounding (zero in exact arithmetic).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ta = apply_rht_tiled(a, spec)
    tb = apply_rht_tiled(b.T, spec).T  # (H^T tiles) applied down the rows
    return float(np.abs(ta @ tb - a @ b).max())
