"""Shared low-level helpers: 64-bit hashing, seed derivation, rounding.

All randomness in the toolkit flows through explicit integer seeds, and all
content hashing flows through the two functions here, so determinism is a
property of this module rather than something each caller re-establishes.
"""
from __future__ import annotations

import hashlib
import json
from decimal import ROUND_HALF_UP, Decimal
from typing import Any

MASK64 = (1 << 64) - 1

# splitmix64 constants; the finalizer is the standard Stafford mix13.
GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(z: int) -> int:
    """Scalar splitmix64 finalizer over Python ints (masked to 64 bits)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


def hash_key(seed: int, index: int) -> int:
    """The ``index``-th member of the seeded 64-bit hash family."""
    return splitmix64((seed + (index + 1) * GOLDEN) & MASK64)


def hash_bytes64(data: bytes) -> int:
    """Stable 64-bit content hash (little-endian blake2b-8 digest)."""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def hash_text64(text: str) -> int:
    return hash_bytes64(text.encode("utf-8"))


def derive_seed(root: int, *parts: Any) -> int:
    """Derive a child seed from a root seed and a label path.

    Children of distinct paths are independent; the same path always yields
    the same child, which is what lets pipeline stages re-run standalone.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(int(root & MASK64).to_bytes(8, "little"))
    for part in parts:
        h.update(b"\x1f")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def round_half_up(value: float, ndigits: int = 2) -> float:
    """Decimal round-half-up (0.125 -> 0.13 at 2 digits), not banker's."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP))


def stable_json_dumps(obj: Any) -> str:
    """Canonical JSON used everywhere a digest or a file is produced."""
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ": "))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
