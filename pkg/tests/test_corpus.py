"""Corpus model, tokenizer, shingling, Markdown ingestion, persistence."""
import io

import pytest
from hypothesis import given
from hypothesis import strategies as st

from domainforge.corpus import (DEFAULT_CATEGORIES, DEFAULT_SHINGLE_WIDTH,
                                Document, Fragment, FragmentKind,
                                document_shingles, ingest_markdown,
                                load_corpus, render_markdown, save_corpus,
                                shingle, tokenize)
from domainforge.errors import EmptyInput, InvalidWidth


def test_tokenize_examples():
    assert tokenize("a b") == ["a", "b"]
    assert tokenize("CH4 + 2O2 -> CO2") == ["CH4", "+", "2O2", "-", ">", "CO2"]
    assert tokenize("") == []
    assert tokenize("  \t\n ") == []
    assert tokenize("x,y") == ["x", ",", "y"]


@given(st.text())
def test_tokenize_total(text):
    toks = tokenize(text)
    for tok in toks:
        assert tok
        assert not tok.isspace()
        # a token is one alnum run or exactly one other character
        assert all(c.isalnum() for c in tok) or len(tok) == 1


@given(st.text(alphabet="ab x4!", max_size=60))
def test_tokenize_whitespace_insensitive(text):
    assert tokenize(text) == tokenize("  " + text.replace(" ", "\n\t "))


def test_shingle_windows():
    toks = ["a", "b", "c", "d"]
    got = {s.value for s in shingle(toks, w=2)}
    assert got == {b"a b", b"b c", b"c d"}
    assert all(s.w == 2 for s in shingle(toks, w=2))


def test_shingle_short_sequence_yields_whole():
    out = shingle(["a", "b"], w=5)
    assert len(out) == 1
    assert next(iter(out)).value == b"a b"


def test_shingle_zero_width():
    with pytest.raises(InvalidWidth):
        shingle(["a"], w=0)


def test_shingle_set_semantics():
    # repeated windows collapse
    assert len(shingle(["a", "a", "a", "a"], w=2)) == 1


MD = """# Heading one

First paragraph continues
on a second line.

## Heading two

Second paragraph.

```text
fenced block # not a heading
```

Third paragraph after the fence.
"""


def test_ingest_structure():
    doc = ingest_markdown(MD, "general", provenance="unit")
    kinds = [f.kind for f in doc.fragments]
    assert kinds == [FragmentKind.HEADING, FragmentKind.PARAGRAPH,
                     FragmentKind.HEADING, FragmentKind.PARAGRAPH,
                     FragmentKind.CODE_BLOCK, FragmentKind.PARAGRAPH]
    assert [f.index for f in doc.fragments] == list(range(6))
    assert doc.fragments[4].text.startswith("```")
    assert "not a heading" in doc.fragments[4].text
    doc.validate()


def test_ingest_heading_paragraph_alternation():
    text = "# A\n\npara one\n\n# B\n\npara two\n"
    doc = ingest_markdown(text, "general")
    assert [f.kind.value for f in doc.fragments] == [
        "heading", "paragraph", "heading", "paragraph"]


def test_ingest_token_count_is_fragment_sum():
    doc = ingest_markdown(MD, "general")
    assert doc.token_count == sum(len(tokenize(f.text))
                                  for f in doc.fragments)


def test_ingest_empty_input():
    with pytest.raises(EmptyInput):
        ingest_markdown("   \n\t  ", "general")
    with pytest.raises(EmptyInput):
        ingest_markdown(b"", "general")


def test_ingest_accepts_bytes_and_streams():
    raw = MD.encode("utf-8")
    a = ingest_markdown(raw, "general")
    b = ingest_markdown(io.BytesIO(raw), "general")
    c = ingest_markdown(MD, "general")
    assert a.id == b.id == c.id
    assert a.token_count == b.token_count == c.token_count


def test_ingest_invalid_utf8_replaced_and_counted():
    doc = ingest_markdown(b"ok \xff\xfe text", "general")
    assert doc.decode_replacements == 2
    assert doc.token_count > 0


def test_doc_id_stable_and_content_addressed():
    a = ingest_markdown(MD, "general", source_path="x.md")
    b = ingest_markdown(MD, "general", source_path="x.md")
    c = ingest_markdown(MD + "\nextra.\n", "general", source_path="x.md")
    assert a.id == b.id
    assert a.id != c.id
    assert a.id.startswith("doc-")


def test_render_ingest_round_trip():
    doc = ingest_markdown(MD, "general")
    again = ingest_markdown(render_markdown(doc), "general")
    assert [(f.kind, f.text) for f in again.fragments] == \
        [(f.kind, f.text) for f in doc.fragments]


def test_document_shingles_span_fragments():
    doc = ingest_markdown("first part\n\nsecond part\n", "general")
    # full-stream shingling sees windows across the fragment boundary
    values = {s.value for s in document_shingles(doc, 2)}
    assert b"part second" in values


def test_corpus_round_trip(tmp_path):
    docs = [ingest_markdown(MD, cat, provenance=f"p{cat}")
            for cat in DEFAULT_CATEGORIES]
    for i, d in enumerate(docs):
        d.id = f"doc-{i}"
    path = tmp_path / "corpus.jsonl"
    save_corpus(docs, path)
    back = load_corpus(path)
    assert [d.id for d in back] == [d.id for d in docs]
    assert [d.category for d in back] == list(DEFAULT_CATEGORIES)
    assert [d.token_count for d in back] == [d.token_count for d in docs]
    assert [[f.text for f in d.fragments] for d in back] == \
        [[f.text for f in d.fragments] for d in docs]


def test_save_is_deterministic(tmp_path):
    doc = ingest_markdown(MD, "general", provenance="unit")
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_corpus([doc], p1)
    save_corpus([doc], p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_fragment_make_counts():
    frag = Fragment.make("d", 0, FragmentKind.PARAGRAPH, "one two three")
    assert frag.tokens == ["one", "two", "three"]
    assert frag.token_count == 3


def test_document_validate_catches_bad_total():
    doc = ingest_markdown(MD, "general")
    doc.token_count = doc.token_count + 1
    with pytest.raises(ValueError):
        doc.validate()
