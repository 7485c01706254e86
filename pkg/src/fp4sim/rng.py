"""Counter-based randomness: every draw is addressed by (stream key, position).

A stream is an immutable 128-bit Philox key derived from a tuple of identity
parts (seed, layer index, step, role tag, ...).  The uniform at position i is
a pure function of (key, i): it does not depend on how many other positions
were generated, or in what order.  That property is what makes stochastic
rounding reproducible under any evaluation schedule.
"""

from __future__ import annotations

import hashlib

import numpy as np

# Philox-4x64 emits four 64-bit words per counter block; Generator.random
# consumes one word per double, so advance(1) skips four draw positions.
_DRAWS_PER_BLOCK = 4


def stream_key(*parts) -> np.ndarray:
    """Derive a 128-bit Philox key (2 x uint64) from identity parts.

    Parts are formatted with repr and joined with an unambiguous separator,
    so ("a", 1) and ("a1",) key different streams.
    """
    payload = "\x1f".join(repr(p) for p in parts).encode()
    digest = hashlib.blake2b(payload, digest_size=16).digest()
    return np.frombuffer(digest, dtype=np.uint64).copy()


def uniforms(key: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Uniforms in [0, 1) at stream positions start .. start+count-1."""
    if count < 0 or start < 0:
        raise ValueError("count and start must be non-negative")
    block, offset = divmod(int(start), _DRAWS_PER_BLOCK)
    bg = np.random.Philox(key=key)
    if block:
        bg.advance(block)
    return np.random.Generator(bg).random(offset + int(count))[offset:]


def uniforms_at(key: np.ndarray, positions) -> np.ndarray:
    """Uniforms addressed by an arbitrary array of stream positions.

    Gather form: generates the prefix up to max(positions) and indexes into
    it, so it is meant for dense position sets (e.g. a permutation of an
    element index space), not sparse ones.
    """
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return np.zeros(positions.shape, dtype=np.float64)
    if positions.min() < 0:
        raise ValueError("positions must be non-negative")
    prefix = uniforms(key, int(positions.max()) + 1)
    return prefix[positions]


def normals(key: np.ndarray, shape) -> np.ndarray:
    """Standard normals for a fresh stream (whole-tensor draws, not
    position-addressed; key the stream by tensor identity instead)."""
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(shape)
