"""Exact and approximate deduplication: hashing, MinHash, LSH banding."""
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainforge import dedup
from domainforge.corpus import Shingle, ingest_markdown, shingle
from domainforge.errors import (BandShapeMismatch, DuplicateId,
                                EmptyShingleSet, IncompatibleSignatures)
from synthdata import shingle_pair, token_doc


def _doc(doc_id, text, category="general"):
    return ingest_markdown(text, category, provenance="t", doc_id=doc_id)


# --- canonical form and exact level ------------------------------------------

def test_canonical_text_strips_trailing_whitespace_per_line():
    a = _doc("a", "Flame Speed   \n\nrises\t")
    b = _doc("b", "Flame Speed\n\nrises")
    assert dedup.canonical_text(a) == dedup.canonical_text(b)
    assert dedup.content_hash(a) == dedup.content_hash(b)


def test_content_hash_sensitive_to_case_and_tokens():
    base = _doc("a", "alpha beta")
    assert dedup.content_hash(base) != dedup.content_hash(_doc("b", "alpha gamma"))
    # canonicalization does not case-fold
    assert dedup.content_hash(base) != dedup.content_hash(_doc("c", "Alpha beta"))


def test_exact_dedup_keeps_first_by_position():
    docs = [_doc("one", "same text"), _doc("two", "same text   "),
            _doc("three", "different text")]
    report = dedup.exact_dedup(docs)
    assert report.kept_ids == ["one", "three"]
    assert report.dropped_ids == ["two"]
    assert report.canonical_of == {"two": "one"}
    assert report.drop_reason == {"two": dedup.EXACT_DUPLICATE}
    report.validate([d.id for d in docs])


def test_exact_dedup_idempotent():
    docs = [_doc(f"d{i}", "same body") for i in range(4)]
    docs.append(_doc("x", "other body"))
    first = dedup.exact_dedup(docs)
    survivors = [d for d in docs if d.id in set(first.kept_ids)]
    second = dedup.exact_dedup(survivors)
    assert second.dropped_ids == []
    assert second.kept_ids == first.kept_ids


def test_duplicate_ids_rejected():
    docs = [_doc("same", "a"), _doc("same", "b")]
    with pytest.raises(DuplicateId):
        dedup.exact_dedup(docs)
    with pytest.raises(DuplicateId):
        dedup.approx_dedup(docs, 0.8)


# --- minhash -----------------------------------------------------------------

def test_minhash_deterministic_and_seed_sensitive():
    a, _, _ = shingle_pair(100, 40, 40)
    s1 = dedup.minhash_signature(a, k=64, seed=3)
    s2 = dedup.minhash_signature(a, k=64, seed=3)
    s3 = dedup.minhash_signature(a, k=64, seed=4)
    assert np.array_equal(s1.values, s2.values)
    assert not np.array_equal(s1.values, s3.values)
    assert s1.k == 64 and s1.seed == 3 and s1.values.dtype == np.uint64


def test_minhash_order_invariant():
    shingles = list(shingle_pair(30, 10, 0)[0])
    fwd = dedup.minhash_signature(shingles, k=32)
    rev = dedup.minhash_signature(reversed(shingles), k=32)
    assert np.array_equal(fwd.values, rev.values)


def test_minhash_identical_sets_estimate_one():
    a, _, _ = shingle_pair(50, 0, 0)
    sa = dedup.minhash_signature(a, k=128)
    sb = dedup.minhash_signature(set(a), k=128)
    assert dedup.estimate_jaccard(sa, sb) == 1.0


def test_minhash_disjoint_sets_estimate_near_zero():
    a, b, j = shingle_pair(0, 200, 200)
    assert j == 0.0
    sa = dedup.minhash_signature(a, k=256)
    sb = dedup.minhash_signature(b, k=256)
    assert dedup.estimate_jaccard(sa, sb) <= 2 / math.sqrt(256)


def test_minhash_empty_set_rejected():
    with pytest.raises(EmptyShingleSet):
        dedup.minhash_signature([], k=16)


def test_incompatible_signatures_rejected():
    a, b, _ = shingle_pair(10, 5, 5)
    with pytest.raises(IncompatibleSignatures):
        dedup.estimate_jaccard(dedup.minhash_signature(a, k=32),
                               dedup.minhash_signature(b, k=64))
    with pytest.raises(IncompatibleSignatures):
        dedup.estimate_jaccard(dedup.minhash_signature(a, k=32, seed=0),
                               dedup.minhash_signature(b, k=32, seed=1))


@settings(max_examples=30, deadline=None)
@given(shared=st.integers(1, 150), only_a=st.integers(0, 150),
       only_b=st.integers(0, 150))
def test_minhash_estimate_within_statistical_bound(shared, only_a, only_b):
    a, b, j = shingle_pair(shared, only_a, only_b)
    sa = dedup.minhash_signature(a, k=256, seed=1)
    sb = dedup.minhash_signature(b, k=256, seed=1)
    # 6 sigma of the binomial estimator; a false failure here is ~1e-9
    sigma = math.sqrt(j * (1 - j) / 256)
    assert abs(dedup.estimate_jaccard(sa, sb) - j) <= 6 * sigma + 1e-12


def test_exact_jaccard_enumeration():
    a = {Shingle(1, b"x"), Shingle(1, b"y")}
    b = {Shingle(1, b"y"), Shingle(1, b"z")}
    assert dedup.exact_jaccard(a, b) == 1 / 3
    assert dedup.exact_jaccard(a, a) == 1.0
    # two empty sets are identical by convention
    assert dedup.exact_jaccard(set(), set()) == 1.0
    assert dedup.exact_jaccard(a, set()) == 0.0


# --- lsh banding ---------------------------------------------------------------

def test_lsh_band_shape_must_cover_signature():
    a, _, _ = shingle_pair(20, 5, 5)
    sig = dedup.minhash_signature(a, k=64)
    with pytest.raises(BandShapeMismatch):
        dedup.lsh_candidates([("a", sig)], bands=10, rows=7)


def test_lsh_identical_docs_always_candidates():
    a, _, _ = shingle_pair(40, 0, 0)
    sa = dedup.minhash_signature(a, k=64)
    sb = dedup.minhash_signature(set(a), k=64)
    pairs = dedup.lsh_candidates([("p", sa), ("q", sb)], bands=8, rows=8)
    assert ("p", "q") in pairs


def test_lsh_candidate_probability_tracks_banding_curve():
    # P(candidate) = 1 - (1 - j^rows)^bands; j=0.9 with 8x8 gives ~0.986,
    # j=0.3 gives ~0.0005. Statistical, seeded.
    rng = random.Random(5)
    hot, cold = 0, 0
    for trial in range(120):
        a, b, _ = shingle_pair(270, 15, 15)    # j = 0.9
        c, d, _ = shingle_pair(60, 70, 70)     # j = 0.3
        k = 64
        seed = trial
        sa, sb, sc, sd = (dedup.minhash_signature(s, k=k, seed=seed)
                          for s in (a, b, c, d))
        hot += ("h1", "h2") in dedup.lsh_candidates(
            [("h1", sa), ("h2", sb)], bands=8, rows=8)
        cold += ("c1", "c2") in dedup.lsh_candidates(
            [("c1", sc), ("c2", sd)], bands=8, rows=8)
    assert hot >= 108   # expect ~118 of 120
    assert cold <= 12   # expect ~0


# --- document-level approximate dedup ----------------------------------------

def test_approx_dedup_drops_planted_near_duplicate():
    rng = random.Random(9)
    base = [f"tok{rng.randrange(400)}" for _ in range(300)]
    variant = list(base)
    variant[50] = "changed"
    docs = [token_doc("orig", "general", base),
            token_doc("near", "general", variant),
            token_doc("far", "general",
                      [f"other{i}" for i in range(300)])]
    report = dedup.approx_dedup(docs, threshold=0.8)
    assert report.dropped_ids == ["near"]
    assert report.canonical_of["near"] == "orig"
    assert report.drop_reason["near"] == dedup.NEAR_DUPLICATE
    report.validate(["orig", "near", "far"])


def test_approx_dedup_cluster_collapses_to_earliest():
    base = [f"tok{i}" for i in range(200)]
    docs = []
    for i in range(4):
        variant = list(base)
        variant[i] = f"tweak{i}"
        docs.append(token_doc(f"c{i}", "general", variant))
    report = dedup.approx_dedup(docs, threshold=0.8)
    assert report.kept_ids == ["c0"]
    assert set(report.dropped_ids) == {"c1", "c2", "c3"}
    assert all(report.canonical_of[d] == "c0" for d in report.dropped_ids)


def test_approx_dedup_threshold_inclusive_at_estimate():
    # The drop rule compares the MinHash estimate, not true J, so pin the
    # boundary to the estimate itself: inclusive at ==, exclusive above.
    base = [f"w{i}" for i in range(100)]
    other = list(base)
    other[0] = "x0"
    docs = [token_doc("a", "general", base), token_doc("b", "general", other)]
    params = dedup.DedupParams(seed=0)
    est = dedup.estimate_jaccard(
        dedup.minhash_signature(shingle(base, params.shingle_width),
                                k=params.k, seed=params.seed),
        dedup.minhash_signature(shingle(other, params.shingle_width),
                                k=params.k, seed=params.seed))
    assert est > 0.9
    assert dedup.approx_dedup(docs, est, params).dropped_ids == ["b"]
    above = est + 0.5 / params.k
    assert dedup.approx_dedup(docs, above, params).dropped_ids == []


def test_approx_dedup_deterministic():
    docs = [token_doc(f"d{i}", "general",
                      [f"t{(i * 7 + j) % 90}" for j in range(120)])
            for i in range(30)]
    r1 = dedup.approx_dedup(docs, 0.8, dedup.DedupParams(seed=2))
    r2 = dedup.approx_dedup(docs, 0.8, dedup.DedupParams(seed=2))
    assert r1.kept_ids == r2.kept_ids
    assert r1.dropped_ids == r2.dropped_ids
    assert r1.pair_count_examined == r2.pair_count_examined


def test_report_round_trip(tmp_path):
    docs = [token_doc("a", "general", ["x"] * 60),
            token_doc("b", "general", ["x"] * 60)]
    report = dedup.approx_dedup(docs, 0.8)
    path = tmp_path / "report.json"
    dedup.save_report(report, path)
    raw = path.read_text()
    assert '"kept_ids"' in raw and '"drop_reason"' in raw


def test_report_validate_rejects_overlap():
    bad = dedup.DedupReport(kept_ids=["a"], dropped_ids=["a"],
                            drop_reason={"a": dedup.EXACT_DUPLICATE},
                            canonical_of={"a": "a"})
    with pytest.raises(ValueError):
        bad.validate(["a"])
