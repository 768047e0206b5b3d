"""Pure-NumPy implementations of the hot kernels.

Bit-identical to the compiled versions in ``_ext.pyx``: all integer work is
uint64 with wrapping semantics, and the float accumulation sums only +-1.0
values, which float64 adds exactly regardless of order.
"""
from __future__ import annotations

import numpy as np

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_R30 = np.uint64(30)
_R27 = np.uint64(27)
_R31 = np.uint64(31)

# Rows per broadcast block in minhash_mix; bounds peak memory at
# roughly _BLOCK * k * 8 bytes.
_BLOCK = 4096


def _finalize(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized. Mutates and returns ``z``."""
    z ^= z >> _R30
    z *= _MIX1
    z ^= z >> _R27
    z *= _MIX2
    z ^= z >> _R31
    return z


def minhash_mix(hashes: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Column minima of finalize(hashes[i] ^ keys[j]).

    ``hashes``: uint64 array of shingle base hashes, shape (n,), n >= 1.
    ``keys``: uint64 array of per-component mix keys, shape (k,).
    Returns uint64 array of shape (k,).
    """
    hashes = np.ascontiguousarray(hashes, dtype=np.uint64)
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    out = np.full(keys.shape[0], np.iinfo(np.uint64).max, dtype=np.uint64)
    for start in range(0, hashes.shape[0], _BLOCK):
        block = hashes[start:start + _BLOCK]
        mixed = _finalize(block[:, None] ^ keys[None, :])
        np.minimum(out, mixed.min(axis=0), out=out)
    return out


def signed_counts(hashes: np.ndarray, dims: int) -> np.ndarray:
    """Signed bucket accumulation for feature hashing.

    Each 64-bit hash lands in bucket ``h % dims`` with sign taken from its
    top bit (set -> -1.0). Returns float64 of shape (dims,).
    """
    hashes = np.ascontiguousarray(hashes, dtype=np.uint64)
    buckets = (hashes % np.uint64(dims)).astype(np.int64)
    signs = np.where(hashes >> np.uint64(63), -1.0, 1.0)
    return np.bincount(buckets, weights=signs, minlength=dims).astype(np.float64)
