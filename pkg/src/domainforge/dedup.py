"""Two-level deduplication: exact by content hash, approximate by MinHash/LSH.

Approximate dedup never computes exact Jaccard; candidates from LSH banding
are confirmed against the signature estimate, keeping the pipeline
single-pass over signatures. Exact set Jaccard exists only in test oracles.
"""
from __future__ import annotations

import hashlib
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from ._util import hash_bytes64, hash_key, stable_json_dumps
from .corpus import DEFAULT_SHINGLE_WIDTH, Document, Shingle, document_shingles
from .errors import (BandShapeMismatch, DuplicateId, EmptyShingleSet,
                     IncompatibleSignatures, InvalidThreshold)

EXACT_DUPLICATE = "exact_duplicate"
NEAR_DUPLICATE = "near_duplicate"


@dataclass
class MinHashSignature:
    k: int
    seed: int
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.values.shape != (self.k,):
            raise ValueError(f"expected {self.k} values, got {self.values.shape}")


@dataclass
class DedupReport:
    kept_ids: list[str]
    dropped_ids: list[str]
    drop_reason: dict[str, str]
    canonical_of: dict[str, str]
    pair_count_examined: int = 0

    def validate(self, input_ids: Sequence[str]) -> None:
        """Check the partition invariant against the original id list."""
        kept = set(self.kept_ids)
        dropped = set(self.dropped_ids)
        if kept & dropped:
            raise ValueError(f"ids both kept and dropped: {kept & dropped}")
        if kept | dropped != set(input_ids):
            raise ValueError("kept and dropped do not partition the input")
        for d in self.dropped_ids:
            canon = self.canonical_of.get(d)
            if canon not in kept:
                raise ValueError(f"dropped {d!r} maps to non-kept {canon!r}")
            if d not in self.drop_reason:
                raise ValueError(f"dropped {d!r} has no reason")

    def to_record(self) -> dict:
        return {
            "kept_ids": list(self.kept_ids),
            "dropped_ids": list(self.dropped_ids),
            "drop_reason": dict(self.drop_reason),
            "canonical_of": dict(self.canonical_of),
            "pair_count_examined": self.pair_count_examined,
        }


def save_report(report: DedupReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(stable_json_dumps(report.to_record()))
        fh.write("\n")


# --- exact level ---------------------------------------------------------

def canonical_text(doc: Document) -> str:
    joined = "\n".join(frag.text for frag in doc.fragments)
    normalized = unicodedata.normalize("NFC", joined)
    return "\n".join(line.rstrip() for line in normalized.split("\n"))


def content_hash(doc: Document) -> str:
    """256-bit hex digest of the canonicalized text (NFC, per-line rstrip)."""
    return hashlib.sha256(canonical_text(doc).encode("utf-8")).hexdigest()


def _check_unique_ids(corpus: Sequence[Document]) -> None:
    seen: set[str] = set()
    for doc in corpus:
        if doc.id in seen:
            raise DuplicateId(f"duplicate document id {doc.id!r}")
        seen.add(doc.id)


def exact_dedup(corpus: Sequence[Document]) -> DedupReport:
    """Keep the first document (stable input order) per content digest."""
    _check_unique_ids(corpus)
    first_by_digest: dict[str, str] = {}
    kept: list[str] = []
    dropped: list[str] = []
    canonical: dict[str, str] = {}
    for doc in corpus:
        digest = content_hash(doc)
        if digest in first_by_digest:
            dropped.append(doc.id)
            canonical[doc.id] = first_by_digest[digest]
        else:
            first_by_digest[digest] = doc.id
            kept.append(doc.id)
    return DedupReport(
        kept_ids=kept,
        dropped_ids=dropped,
        drop_reason={d: EXACT_DUPLICATE for d in dropped},
        canonical_of=canonical,
    )


# --- approximate level ----------------------------------------------------

@lru_cache(maxsize=32)
def _mix_keys(k: int, seed: int) -> np.ndarray:
    keys = np.array([hash_key(seed, i) for i in range(k)], dtype=np.uint64)
    keys.flags.writeable = False
    return keys


def minhash_signature(shingles: Iterable[Shingle], k: int = 256,
                      seed: int = 0) -> MinHashSignature:
    """Per-component minimum of a seeded 64-bit hash family over the set."""
    base = np.fromiter((hash_bytes64(s.value) for s in shingles),
                       dtype=np.uint64)
    if base.size == 0:
        raise EmptyShingleSet("signature of an empty shingle set is undefined")
    values = kernels.minhash_mix(base, _mix_keys(k, seed))
    return MinHashSignature(k=k, seed=seed, values=values)


def estimate_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    if a.k != b.k or a.seed != b.seed:
        raise IncompatibleSignatures(
            f"(k={a.k}, seed={a.seed}) vs (k={b.k}, seed={b.seed})")
    return float(np.count_nonzero(a.values == b.values)) / a.k


def lsh_candidates(signatures: Sequence[tuple[str, MinHashSignature]],
                   bands: int = 32, rows: int = 8) -> set[tuple[str, str]]:
    """Candidate selection by banding: a pair is a candidate iff some band's
    row slice matches exactly. Pairs come back in input order (earlier id
    first); the relation itself is symmetric and irreflexive.
    """
    pairs: set[tuple[int, int]] = set()
    buckets: dict[tuple[int, bytes], list[int]] = {}
    for pos, (_, sig) in enumerate(signatures):
        if bands * rows != sig.k:
            raise BandShapeMismatch(
                f"bands*rows = {bands * rows} != k = {sig.k}")
        for b in range(bands):
            key = (b, sig.values[b * rows:(b + 1) * rows].tobytes())
            buckets.setdefault(key, []).append(pos)
    for members in buckets.values():
        if len(members) < 2:
            continue
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                pairs.add((members[i], members[j]))
    return {(signatures[i][0], signatures[j][0]) for i, j in pairs}


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Smaller root index wins so components canonicalize to the
            # earliest input position.
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


@dataclass(frozen=True)
class DedupParams:
    k: int = 256
    bands: int = 32
    rows: int = 8
    seed: int = 0
    shingle_width: int = DEFAULT_SHINGLE_WIDTH


def approx_dedup(corpus: Sequence[Document], threshold: float = 0.8,
                 params: DedupParams = DedupParams()) -> DedupReport:
    """MinHash/LSH near-duplicate removal over an exact-deduplicated corpus.

    Connected components over confirmed candidate pairs; the earliest
    document per component (stable input order) is kept.
    """
    if not 0.0 <= threshold <= 1.0:
        raise InvalidThreshold(f"threshold {threshold} outside [0, 1]")
    if params.bands * params.rows != params.k:
        raise BandShapeMismatch(
            f"bands*rows = {params.bands * params.rows} != k = {params.k}")
    _check_unique_ids(corpus)

    sigs: list[tuple[str, MinHashSignature]] = []
    for doc in corpus:
        shingles = document_shingles(doc, params.shingle_width)
        sigs.append((doc.id, minhash_signature(shingles, params.k, params.seed)))

    by_id = dict(sigs)
    pos_of = {doc.id: i for i, doc in enumerate(corpus)}
    candidates = lsh_candidates(sigs, params.bands, params.rows)

    uf = _UnionFind(len(corpus))
    examined = 0
    for ida, idb in sorted(candidates, key=lambda p: (pos_of[p[0]], pos_of[p[1]])):
        examined += 1
        if estimate_jaccard(by_id[ida], by_id[idb]) >= threshold:
            uf.union(pos_of[ida], pos_of[idb])

    kept: list[str] = []
    dropped: list[str] = []
    canonical: dict[str, str] = {}
    for i, doc in enumerate(corpus):
        root = uf.find(i)
        if root == i:
            kept.append(doc.id)
        else:
            dropped.append(doc.id)
            canonical[doc.id] = corpus[root].id
    return DedupReport(
        kept_ids=kept,
        dropped_ids=dropped,
        drop_reason={d: NEAR_DUPLICATE for d in dropped},
        canonical_of=canonical,
        pair_count_examined=examined,
    )


def exact_jaccard(a: set, b: set) -> float:
    """Exact set Jaccard; used by test oracles, not by the dedup path."""
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)
