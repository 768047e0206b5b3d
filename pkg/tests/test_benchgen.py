"""Benchmark construction: density ranking, drafting, dual validation,
difficulty probing, finalization, and the expert review round trip."""
import json

import pytest

from domainforge import benchgen, quality
from domainforge.corpus import Document, Fragment, FragmentKind
from domainforge.errors import (GeneratorParseError, InsufficientDistractors,
                                InsufficientItems)
from synthdata import LEXICON, TAXONOMY, bench_corpus


def _frag(text, doc_id="d", index=0, kind=FragmentKind.PARAGRAPH):
    return Fragment.make(doc_id, index, kind, text)


def _doc(doc_id, texts, category="general"):
    frags = [Fragment.make(doc_id, i, FragmentKind.PARAGRAPH, t)
             for i, t in enumerate(texts)]
    return Document(id=doc_id, source_path="", category=category,
                    language_tag="en", fragments=frags, provenance="t")


SMALL_LEX = quality.DomainLexicon(
    {"flame": 2.0, "soot": 1.0, "ignition": 1.0, "detonation": 1.0,
     "kinetics": 1.0, "premixed": 1.0})


# --- density -----------------------------------------------------------------

def test_density_zero_for_bare_prose():
    frag = _frag("plain words with nothing countable inside them")
    assert benchgen.density_score(frag, SMALL_LEX) == 0.0


def test_density_formula_plugs_in():
    # 100 tokens, 4 distinct lexicon terms, 10 numeric tokens, prose kind
    words = (["flame", "soot", "ignition", "detonation"]
             + [str(i) for i in range(10)] + ["pad"] * 86)
    frag = _frag(" ".join(words))
    assert frag.token_count == 100
    assert benchgen.density_score(frag, SMALL_LEX) == pytest.approx(
        0.5 * 4 + 0.3 * 10)


def test_density_kind_bonus_exact():
    text = "flame speed 3 values"
    prose = _frag(text, kind=FragmentKind.PARAGRAPH)
    eq = _frag(text, kind=FragmentKind.EQUATION_BLOCK)
    code = _frag(text, kind=FragmentKind.CODE_BLOCK)
    assert benchgen.density_score(eq, SMALL_LEX) - \
        benchgen.density_score(prose, SMALL_LEX) == pytest.approx(0.2)
    assert benchgen.density_score(code, SMALL_LEX) == \
        benchgen.density_score(eq, SMALL_LEX)


def test_select_fragments_ranked_by_density():
    rich = _doc("rich", ["flame soot ignition detonation kinetics premixed"])
    poor = _doc("poor", ["one flame mention in many plain filler words"])
    bare = _doc("bare", ["no terms here at all in this sentence"])
    picked = benchgen.select_fragments([poor, bare, rich], SMALL_LEX, 2)
    assert [doc.id for doc, _ in picked] == ["rich", "poor"]


# --- drafting ----------------------------------------------------------------

def test_template_generator_cloze():
    frag = _frag("The premixed flame burned steadily. It was loud.")
    item = benchgen.draft_item(frag, benchgen.TemplateGenerator(
        SMALL_LEX, seed=1, n_options=4), provenance="template")
    assert item.status is benchgen.ItemStatus.DRAFT
    assert "____" in item.question
    assert len(item.options) == 4
    assert len(set(item.options)) == 4
    assert item.answer_key in item.labels
    key_option = item.options[item.labels.index(item.answer_key)]
    assert key_option == "premixed"
    assert item.source_ref == ("d", 0, "template")


def test_template_generator_deterministic():
    frag = _frag("Soot forms in rich zones of the flame front.")
    gen = benchgen.TemplateGenerator(SMALL_LEX, seed=7, n_options=4)
    a = benchgen.draft_item(frag, gen)
    b = benchgen.draft_item(frag, gen)
    assert a == b
    c = benchgen.draft_item(frag, benchgen.TemplateGenerator(
        SMALL_LEX, seed=8, n_options=4))
    assert c.options != a.options or c.answer_key != a.answer_key


def test_template_generator_no_term_raises():
    frag = _frag("nothing from the domain vocabulary appears here")
    with pytest.raises(benchgen.UndraftableFragment):
        benchgen.draft_item(frag, benchgen.TemplateGenerator(SMALL_LEX,
                                                             seed=1))


def test_template_generator_insufficient_distractors():
    tiny = quality.DomainLexicon({"flame": 1.0, "soot": 1.0})
    frag = _frag("the flame is hot")
    with pytest.raises(InsufficientDistractors):
        benchgen.draft_item(frag, benchgen.TemplateGenerator(tiny, seed=1,
                                                             n_options=4))


def test_draft_item_rejects_malformed_generator_output():
    frag = _frag("the flame is hot and bright today")
    for bad in ("not json", "[]", '{"question": "q?"}',
                json.dumps({"question": "q?", "options": ["a"],
                            "answer_index": 0}),
                json.dumps({"question": "q?", "options": ["a", "b"],
                            "answer_index": 5})):
        with pytest.raises(GeneratorParseError):
            benchgen.draft_item(frag, lambda text, template: bad)


def test_make_item_id_stable():
    ref = ("doc", 3, "template")
    a = benchgen.make_item_id(ref, "q?")
    assert a == benchgen.make_item_id(ref, "q?")
    assert a != benchgen.make_item_id(ref, "other?")
    assert a.startswith("item-")


# --- validation --------------------------------------------------------------

def _draft_from(frag):
    return benchgen.draft_item(frag, benchgen.TemplateGenerator(
        SMALL_LEX, seed=3, n_options=4), provenance="template")


def test_validate_accepts_consistent_item():
    frag = _frag("The premixed flame burned steadily near the port.")
    item = _draft_from(frag)
    out = benchgen.validate_item(item, benchgen.RuleVerifier(SMALL_LEX),
                                 {("d", 0): frag})
    assert out.status is benchgen.ItemStatus.VALIDATED
    assert out.reject_reasons == []


def test_validate_rejects_wrong_key():
    frag = _frag("The premixed flame burned steadily near the port.")
    item = _draft_from(frag)
    labels = item.labels
    wrong = labels[(labels.index(item.answer_key) + 1) % len(labels)]
    from dataclasses import replace
    bad = replace(item, answer_key=wrong)
    out = benchgen.validate_item(bad, benchgen.RuleVerifier(SMALL_LEX),
                                 {("d", 0): frag})
    assert out.status is benchgen.ItemStatus.REJECTED
    assert any("consistency" in r for r in out.reject_reasons)


def test_validate_rejects_duplicate_options():
    frag = _frag("The premixed flame burned steadily near the port.")
    item = _draft_from(frag)
    from dataclasses import replace
    bad = replace(item, options=[item.options[0]] + item.options[:3])
    out = benchgen.validate_item(bad, benchgen.RuleVerifier(SMALL_LEX),
                                 {("d", 0): frag})
    assert out.status is benchgen.ItemStatus.REJECTED
    assert any("structural" in r for r in out.reject_reasons)


def test_validate_rejects_dangling_source():
    frag = _frag("The premixed flame burned steadily near the port.")
    item = _draft_from(frag)
    out = benchgen.validate_item(item, benchgen.RuleVerifier(SMALL_LEX), {})
    assert out.status is benchgen.ItemStatus.REJECTED


def test_verifier_abstains_when_ambiguous():
    # two options present in the fragment -> no single consistent key
    frag = _frag("Both flame and soot appear in this source sentence.")
    item = _draft_from(frag)
    from dataclasses import replace
    two_hits = replace(item, options=["flame", "soot", "ignition",
                                      "detonation"])
    verifier = benchgen.RuleVerifier(SMALL_LEX)
    assert verifier(frag.text, two_hits) is None
    no_hits = replace(item, options=["ignition", "detonation", "kinetics",
                                     "premixed"])
    assert verifier(frag.text, no_hits) is None


# --- difficulty --------------------------------------------------------------

def _validated_items(n=40):
    docs = bench_corpus(n_fragments=n, seed=4)
    frags = benchgen.build_fragment_index(docs)
    gen = benchgen.TemplateGenerator(LEXICON, seed=11, n_options=4)
    items = []
    for _, frag in benchgen.select_fragments(docs, LEXICON, n):
        try:
            items.append(benchgen.draft_item(frag, gen,
                                             provenance="template"))
        except benchgen.UndraftableFragment:
            continue
    verifier = benchgen.RuleVerifier(LEXICON)
    out = [benchgen.validate_item(i, verifier, frags) for i in items]
    return [i for i in out if i.status is benchgen.ItemStatus.VALIDATED], frags


def test_difficulty_filter_drops_only_all_correct():
    items, _ = _validated_items(24)
    assert len(items) >= 20

    always_right = lambda item, attempt: item.answer_key  # noqa: E731
    always_wrong = lambda item, attempt: "Z"              # noqa: E731
    assert benchgen.difficulty_filter(items, always_right) == []
    assert benchgen.difficulty_filter(items, always_wrong) == list(items)

    # correct on the first two attempts only -> survives a 3-attempt probe
    two_of_three = lambda item, attempt: (  # noqa: E731
        item.answer_key if attempt < 2 else "Z")
    assert benchgen.difficulty_filter(items, two_of_three, 3) == list(items)
    assert benchgen.difficulty_filter(items, two_of_three, 2) == []


def test_difficulty_filter_requires_validated():
    frag = _frag("The premixed flame burned steadily near the port.")
    with pytest.raises(ValueError):
        benchgen.difficulty_filter([_draft_from(frag)],
                                   benchgen.RandomProbe(0))


def test_random_probe_deterministic():
    items, _ = _validated_items(24)
    probe = benchgen.RandomProbe(5)
    first = [probe(i, a) for i in items for a in range(3)]
    second = [probe(i, a) for i in items for a in range(3)]
    assert first == second
    assert set(first) <= set("ABCD")


# --- finalize ----------------------------------------------------------------

def test_finalize_unique_source_and_target():
    items, frags = _validated_items(60)
    final, _ = benchgen.finalize_bench(items, TAXONOMY, 30, frags, LEXICON)
    assert len(final) == 30
    refs = {(i.source_ref[0], i.source_ref[1]) for i in final}
    assert len(refs) == 30
    assert all(i.subfield for i in final)
    assert {i.subfield for i in final} <= {s.name for s in TAXONOMY}


def test_finalize_drops_source_duplicates_first_wins():
    items, frags = _validated_items(20)
    dup = [items[0], items[0]] + items[1:]
    final, _ = benchgen.finalize_bench(dup, TAXONOMY, len(items), frags,
                                       LEXICON)
    assert len(final) == len(items)


def test_finalize_insufficient_items():
    items, frags = _validated_items(12)
    with pytest.raises(InsufficientItems):
        benchgen.finalize_bench(items, TAXONOMY, 500, frags, LEXICON)


def test_finalize_warns_on_empty_bucket():
    items, frags = _validated_items(24)
    lonely = [benchgen.Subfield(name="never_matching",
                                terms=frozenset({"zzzz"}))]
    taxonomy = list(TAXONOMY) + lonely
    _, warnings = benchgen.finalize_bench(items, taxonomy, 10, frags,
                                          LEXICON)
    assert any("never_matching" in w for w in warnings)


def test_assign_subfield_overlap_and_low_confidence():
    frag = _frag("detonation wave speed and overdriven detonation cells")
    item = _draft_from(_frag(
        "The premixed flame burned steadily near the port."))
    tagged = benchgen.assign_subfield(item, frag, TAXONOMY)
    assert tagged.subfield == "detonation_and_explosion"
    assert tagged.low_confidence is False
    off = benchgen.assign_subfield(item, _frag("nothing relevant at all"),
                                   TAXONOMY)
    assert off.low_confidence is True
    assert off.subfield == TAXONOMY[0].name  # earliest name on zero overlap


# --- persistence and review round trip ----------------------------------------

def test_benchmark_round_trip(tmp_path):
    items, _ = _validated_items(24)
    path = tmp_path / "bench.jsonl"
    benchgen.save_benchmark(items, path)
    back = benchgen.load_benchmark(path)
    assert back == list(items)


def test_load_benchmark_rejects_garbage(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"item_id": "x"}\n')
    with pytest.raises(benchgen.BenchmarkParseError):
        benchgen.load_benchmark(path)


def test_review_round_trip_accept_reject_edit(tmp_path):
    items, _ = _validated_items(24)
    items = items[:6]
    sheet = tmp_path / "review.csv"
    benchgen.export_review(items, sheet)

    import csv
    with open(sheet, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["item_id"] for r in rows] == [i.item_id for i in items]
    rows[0]["decision"] = "accept"
    rows[1]["decision"] = "reject"
    rows[2]["decision"] = "edit"
    rows[2]["question"] = "An edited question about a flame?"
    with open(sheet, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=benchgen.REVIEW_FIELDS)
        writer.writeheader()
        writer.writerows(rows)

    reviewed = benchgen.apply_review(items, sheet)
    by_id = {i.item_id: i for i in reviewed}
    assert items[1].item_id not in by_id
    assert by_id[items[0].item_id].status is benchgen.ItemStatus.CALIBRATED
    edited = by_id[items[2].item_id]
    assert edited.question == "An edited question about a flame?"
    assert edited.status is benchgen.ItemStatus.CALIBRATED
    # a blank decision on an exported row defaults to accept
    from dataclasses import replace
    assert by_id[items[3].item_id] == replace(
        items[3], status=benchgen.ItemStatus.CALIBRATED)
    # items absent from the sheet pass through unchanged
    extra, _ = _validated_items(12)
    exported = {i.item_id for i in items}
    loner = next(i for i in extra if i.item_id not in exported)
    passed = benchgen.apply_review(list(items) + [loner], sheet)
    assert passed[-1] == loner
