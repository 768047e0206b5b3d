"""Budget planning, seeded sampling, distribution reporting."""
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from domainforge import mixer
from domainforge.errors import AllZeroWeights, PoolExhausted, ZeroBudget
from synthdata import token_doc


def _pool(category, n_docs, tokens_each):
    prefix = category.replace("_", "")  # underscores split under tokenize
    return [token_doc(f"{category}-{i}", category,
                      [f"{prefix}{i}t{j}" for j in range(tokens_each)])
            for i in range(n_docs)]


# --- planning ----------------------------------------------------------------

def test_plan_recipe_scale():
    plan = mixer.plan_mixture(30 * 10**9, {"domain": 1, "general": 5})
    assert plan.allocations == {"domain": 5 * 10**9, "general": 25 * 10**9}


def test_plan_small_scale():
    plan = mixer.plan_mixture(6000, {"domain": 1, "general": 5})
    assert plan.allocations == {"domain": 1000, "general": 5000}


def test_plan_single_category_takes_all():
    plan = mixer.plan_mixture(777, {"only": 3.5})
    assert plan.allocations == {"only": 777}


def test_plan_largest_remainder_exact_sum():
    plan = mixer.plan_mixture(100, {"a": 1, "b": 1, "c": 1})
    assert sum(plan.allocations.values()) == 100
    assert sorted(plan.allocations.values()) == [33, 33, 34]


def test_plan_zero_weight_category_gets_nothing():
    plan = mixer.plan_mixture(90, {"a": 1, "b": 0})
    assert plan.allocations["b"] == 0


def test_plan_errors():
    with pytest.raises(ZeroBudget):
        mixer.plan_mixture(0, {"a": 1})
    with pytest.raises(AllZeroWeights):
        mixer.plan_mixture(10, {"a": 0, "b": 0})
    with pytest.raises(AllZeroWeights):
        mixer.plan_mixture(10, {})


@settings(max_examples=60, deadline=None)
@given(budget=st.integers(1, 10**7),
       weights=st.dictionaries(st.sampled_from("abcdef"),
                               st.floats(0, 10), min_size=1))
def test_plan_sum_invariant(budget, weights):
    if sum(weights.values()) == 0:
        weights["a"] = 1.0
    plan = mixer.plan_mixture(budget, weights)
    assert sum(plan.allocations.values()) == budget
    # each allocation within 1 of the exact proportional share
    total_w = sum(weights.values())
    for cat, alloc in plan.allocations.items():
        assert abs(alloc - budget * weights[cat] / total_w) < 1


# --- sampling ----------------------------------------------------------------

def test_sample_exact_fit_consumes_pool():
    pools = {"general": _pool("general", 10, 100)}
    plan = mixer.plan_mixture(1000, {"general": 1})
    result = mixer.sample_corpus(pools, plan)
    assert len(result.documents) == 10
    assert result.realized == {"general": 1000}


def test_sample_overshoot_below_one_document():
    pools = {"general": _pool("general", 20, 100)}
    plan = mixer.plan_mixture(950, {"general": 1})
    result = mixer.sample_corpus(pools, plan)
    assert result.realized["general"] == 1000  # 9 docs leave 50 short
    assert result.realized["general"] - 950 < 100


def test_sample_deterministic_and_seed_sensitive():
    pools = {"a": _pool("a", 30, 10), "b": _pool("b", 30, 10)}
    p1 = mixer.plan_mixture(300, {"a": 1, "b": 2}, seed=4)
    r1 = mixer.sample_corpus(pools, p1)
    r2 = mixer.sample_corpus(pools, p1)
    assert [d.id for d in r1.documents] == [d.id for d in r2.documents]
    p3 = mixer.plan_mixture(300, {"a": 1, "b": 2}, seed=5)
    r3 = mixer.sample_corpus(pools, p3)
    assert [d.id for d in r1.documents] != [d.id for d in r3.documents]


def test_sample_without_replacement():
    pools = {"a": _pool("a", 50, 10)}
    result = mixer.sample_corpus(pools, mixer.plan_mixture(400, {"a": 1}))
    ids = [d.id for d in result.documents]
    assert len(ids) == len(set(ids))


def test_sample_pool_exhausted():
    pools = {"a": _pool("a", 3, 10)}   # 30 tokens for a 100-token budget
    with pytest.raises(PoolExhausted):
        mixer.sample_corpus(pools, mixer.plan_mixture(100, {"a": 1}))


def test_sample_conservation_exact():
    pools = {"a": _pool("a", 40, 13), "b": _pool("b", 40, 7)}
    plan = mixer.plan_mixture(300, {"a": 2, "b": 1})
    result = mixer.sample_corpus(pools, plan)
    by_cat = {}
    for doc in result.documents:
        by_cat[doc.category] = by_cat.get(doc.category, 0) + doc.token_count
    assert by_cat == result.realized


def test_mix_result_round_trip(tmp_path):
    pools = {"a": _pool("a", 10, 10)}
    plan = mixer.plan_mixture(50, {"a": 1}, seed=9)
    result = mixer.sample_corpus(pools, plan)
    path = tmp_path / "mix.json"
    mixer.save_mix_result(result, path)
    record = json.loads(path.read_text())
    assert record["plan"]["seed"] == 9
    assert record["plan"]["total_budget"] == 50
    assert record["realized"] == result.realized
    assert record["documents"] == len(result.documents)
    assert record["tokens"] == sum(result.realized.values())


# --- splits ------------------------------------------------------------------

def test_default_splits_full_scale():
    by_name = {s.name: s.target_count for s in mixer.default_splits(1.0)}
    assert by_name == {"cpt_mix": 30_000_000_000, "sft_general": 800_000,
                       "sft_domain_cot": 12_000, "rlvr": 7_000}


def test_default_splits_scaled():
    by_name = {s.name: s.target_count for s in mixer.default_splits(0.001)}
    assert by_name == {"cpt_mix": 30_000_000, "sft_general": 800,
                       "sft_domain_cot": 12, "rlvr": 7}


def test_default_splits_reject_nonpositive_result():
    with pytest.raises(ValueError):
        mixer.default_splits(0.0)


# --- stats -------------------------------------------------------------------

def test_stats_totals_and_shares():
    docs = (_pool("general", 5, 10) + _pool("domain_literature", 1, 10))
    stats = mixer.corpus_stats(docs)
    assert stats["tokens"] == 60
    assert stats["documents"] == 6
    cats = stats["categories"]
    assert cats["general"]["share"] == pytest.approx(5 / 6)
    assert cats["domain_literature"]["share"] == pytest.approx(1 / 6)
    assert sum(c["tokens"] for c in cats.values()) == stats["tokens"]


def test_stats_empty_stream():
    stats = mixer.corpus_stats([])
    assert stats["tokens"] == 0
    assert stats["documents"] == 0
    assert stats["categories"] == {}


def test_stats_csv_shape():
    docs = _pool("general", 2, 5)
    text = mixer.stats_csv(mixer.corpus_stats(docs))
    lines = text.strip().split("\n")
    assert lines[0] == "category,documents,tokens,share"
    assert lines[1].startswith("general,2,10,")
