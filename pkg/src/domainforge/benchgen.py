"""Benchmark construction: density-ranked sourcing, drafting, dual
validation, difficulty filtering, unique-source finalization.

Drafting is pluggable: any callable (fragment_text, template) -> draft JSON
works. The built-in template generator produces cloze items and needs no
model. Validation's second check always uses an independent verifier, never
the drafting generator itself.
"""
from __future__ import annotations

import csv
import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from ._util import derive_seed, hash_text64, sha256_hex, stable_json_dumps
from .corpus import Document, Fragment, FragmentKind, tokenize
from .errors import (BenchmarkParseError, GeneratorParseError,
                     InsufficientDistractors, InsufficientItems,
                     UndraftableFragment)
from .quality import DomainLexicon

BENCH_SCHEMA_VERSION = 1
OPTION_LABELS = "ABCDEFGHIJ"
DEFAULT_TEMPLATE = ("Fill in the blank so the statement from the source "
                    "material is correct: {cloze}")


class ItemStatus(str, Enum):
    DRAFT = "draft"
    VALIDATED = "validated"
    REJECTED = "rejected"
    CALIBRATED = "calibrated"


@dataclass
class BenchItem:
    item_id: str
    question: str
    options: list[str]
    answer_key: str
    source_ref: tuple[str, int, str]  # (doc_id, fragment index, provenance)
    subfield: str = ""
    rationale: str = ""
    status: ItemStatus = ItemStatus.DRAFT
    reject_reasons: list[str] = field(default_factory=list)
    low_confidence: bool = False

    @property
    def labels(self) -> list[str]:
        return list(OPTION_LABELS[:len(self.options)])

    def option_text(self, label: str) -> str:
        return self.options[OPTION_LABELS.index(label)]

    def to_record(self) -> dict:
        return {
            "item_id": self.item_id,
            "question": self.question,
            "options": list(self.options),
            "answer_key": self.answer_key,
            "source_ref": list(self.source_ref),
            "subfield": self.subfield,
            "rationale": self.rationale,
            "status": self.status.value,
            "reject_reasons": list(self.reject_reasons),
            "low_confidence": self.low_confidence,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "BenchItem":
        ref = rec["source_ref"]
        return cls(item_id=rec["item_id"], question=rec["question"],
                   options=list(rec["options"]), answer_key=rec["answer_key"],
                   source_ref=(ref[0], int(ref[1]), ref[2]),
                   subfield=rec.get("subfield", ""),
                   rationale=rec.get("rationale", ""),
                   status=ItemStatus(rec.get("status", "draft")),
                   reject_reasons=list(rec.get("reject_reasons", [])),
                   low_confidence=bool(rec.get("low_confidence", False)))


@dataclass(frozen=True)
class Subfield:
    name: str
    terms: frozenset[str]


def load_taxonomy(path) -> list[Subfield]:
    """Taxonomy file: JSON object mapping name -> term list, order kept."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return [Subfield(name, frozenset(t.casefold() for t in terms))
            for name, terms in raw.items()]


# --- sourcing ---------------------------------------------------------------

_DENSITY_KIND_BONUS = {FragmentKind.EQUATION_BLOCK, FragmentKind.CODE_BLOCK}


def density_score(fragment: Fragment, lexicon: DomainLexicon,
                  weights: tuple[float, float, float] = (0.5, 0.3, 0.2)) -> float:
    """0.5 * distinct lexicon terms per 100 tokens + 0.3 * numeric tokens
    per 100 tokens + 0.2 * kind bonus (1.0 for equation/code, else 0)."""
    if fragment.token_count == 0:
        return 0.0
    toks = [t.casefold() for t in fragment.tokens]
    present = {t for t in toks if t in lexicon.terms}
    numeric = sum(1 for t in fragment.tokens if t.isdigit())
    per100 = 100.0 / fragment.token_count
    bonus = 1.0 if fragment.kind in _DENSITY_KIND_BONUS else 0.0
    return (weights[0] * len(present) * per100
            + weights[1] * numeric * per100
            + weights[2] * bonus)


def select_fragments(docs: Sequence[Document], lexicon: DomainLexicon,
                     top_n: int) -> list[tuple[Document, Fragment]]:
    """Top fragments by density score; ties break on document order."""
    scored = []
    pos = 0
    for doc in docs:
        for frag in doc.fragments:
            scored.append((-density_score(frag, lexicon), pos, doc, frag))
            pos += 1
    scored.sort(key=lambda t: (t[0], t[1]))
    return [(doc, frag) for _, _, doc, frag in scored[:top_n]]


# --- drafting ---------------------------------------------------------------

GeneratorFn = Callable[[str, str], str]

_SENTENCE_ENDS = ".!?"


def _sentences(text: str) -> list[str]:
    out: list[str] = []
    current: list[str] = []
    for ch in " ".join(text.split()):
        current.append(ch)
        if ch in _SENTENCE_ENDS:
            sent = "".join(current).strip()
            if sent:
                out.append(sent)
            current = []
    tail = "".join(current).strip()
    if tail:
        out.append(tail)
    return out


class TemplateGenerator:
    """Cloze drafting without a model: mask the first lexicon term in the
    first term-bearing sentence; distractors come from lexicon terms absent
    from the fragment, chosen by seeded sampling."""

    def __init__(self, lexicon: DomainLexicon, seed: int = 0,
                 n_options: int = 4):
        if len(lexicon.terms) < n_options:
            raise InsufficientDistractors(
                f"lexicon has {len(lexicon.terms)} terms, need {n_options}")
        self.lexicon = lexicon
        self.seed = seed
        self.n_options = n_options

    def __call__(self, fragment_text: str, template: str) -> str:
        tokens = tokenize(fragment_text)
        present = {t.casefold() for t in tokens}
        target = None
        sentence = None
        for sent in _sentences(fragment_text):
            for tok in tokenize(sent):
                if tok.casefold() in self.lexicon.terms:
                    target = tok
                    sentence = sent
                    break
            if target is not None:
                break
        if target is None:
            raise UndraftableFragment("no sentence contains a lexicon term")
        pool = sorted(t for t in self.lexicon.terms
                      if t not in present)
        if len(pool) < self.n_options - 1:
            raise InsufficientDistractors(
                f"only {len(pool)} distractor terms available, need "
                f"{self.n_options - 1}")
        rng = random.Random(derive_seed(self.seed, "draft",
                                        hash_text64(fragment_text)))
        distractors = rng.sample(pool, self.n_options - 1)
        cloze = sentence.replace(target, "____", 1)
        options = [target.casefold()] + distractors
        rng.shuffle(options)
        draft = {
            "question": template.format(cloze=cloze),
            "options": options,
            "answer_index": options.index(target.casefold()),
            "rationale": f"The source states the masked term is "
                         f"{target.casefold()!r}.",
        }
        return stable_json_dumps(draft)


def make_item_id(source_ref: tuple[str, int, str], question: str) -> str:
    return "item-" + sha256_hex(
        f"{source_ref[0]}\x1f{source_ref[1]}\x1f{question}".encode("utf-8"))[:12]


def draft_item(fragment: Fragment, generator: GeneratorFn,
               template: str = DEFAULT_TEMPLATE,
               provenance: str = "") -> BenchItem:
    """Run the generator and parse its JSON output into a draft item."""
    raw = generator(fragment.text, template)
    try:
        data = json.loads(raw)
    except (json.JSONDecodeError, TypeError) as exc:
        raise GeneratorParseError(f"draft is not JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise GeneratorParseError("draft is not a JSON object")
    question = data.get("question")
    options = data.get("options")
    answer_index = data.get("answer_index")
    if (not isinstance(question, str) or not question.strip()
            or not isinstance(options, list) or len(options) < 2
            or len(options) > len(OPTION_LABELS)
            or not all(isinstance(o, str) and o.strip() for o in options)
            or not isinstance(answer_index, int)
            or not 0 <= answer_index < len(options)):
        raise GeneratorParseError("draft fields missing or malformed")
    ref = (fragment.doc_id, fragment.index, provenance)
    return BenchItem(
        item_id=make_item_id(ref, question),
        question=question,
        options=list(options),
        answer_key=OPTION_LABELS[answer_index],
        source_ref=ref,
        rationale=str(data.get("rationale", "")),
        status=ItemStatus.DRAFT,
    )


# --- validation -------------------------------------------------------------

VerifierFn = Callable[[str, BenchItem], "str | None"]


class RuleVerifier:
    """Independent answer re-derivation for cloze items: the option whose
    term occurs in the source fragment is the answer; anything other than
    exactly one match abstains."""

    def __init__(self, lexicon: DomainLexicon):
        self.lexicon = lexicon

    def __call__(self, fragment_text: str, item: BenchItem) -> str | None:
        present = {t.casefold() for t in tokenize(fragment_text)}
        hits = [label for label, option in zip(item.labels, item.options)
                if option.casefold() in present]
        if len(hits) == 1:
            return hits[0]
        return None


def build_fragment_index(docs: Iterable[Document]) -> dict[tuple[str, int], Fragment]:
    return {(doc.id, frag.index): frag
            for doc in docs for frag in doc.fragments}


def structural_reasons(item: BenchItem,
                       fragments: Mapping[tuple[str, int], Fragment]) -> list[str]:
    reasons = []
    if len(item.options) < 2:
        reasons.append("structural: fewer than 2 options")
    if item.answer_key not in item.labels:
        reasons.append("structural: answer_key not among option labels")
    normalized = [" ".join(o.split()).casefold() for o in item.options]
    if len(set(normalized)) != len(normalized):
        reasons.append("structural: duplicate options after normalization")
    if (item.source_ref[0], item.source_ref[1]) not in fragments:
        reasons.append("structural: source_ref does not resolve")
    return reasons


def validate_item(item: BenchItem, verifier: VerifierFn,
                  fragments: Mapping[tuple[str, int], Fragment]) -> BenchItem:
    """Dual validation: structural invariants, then independent answer
    consistency. Failures come back as rejected items with reasons."""
    if item.status is not ItemStatus.DRAFT:
        raise ValueError(f"can only validate drafts, got {item.status.value}")
    reasons = structural_reasons(item, fragments)
    if reasons:
        return replace(item, status=ItemStatus.REJECTED,
                       reject_reasons=reasons)
    fragment = fragments[(item.source_ref[0], item.source_ref[1])]
    choice = verifier(fragment.text, item)
    if choice is None:
        return replace(item, status=ItemStatus.REJECTED,
                       reject_reasons=["consistency: verifier abstained"])
    if choice != item.answer_key:
        return replace(item, status=ItemStatus.REJECTED,
                       reject_reasons=[
                           f"consistency: verifier chose {choice}, key is "
                           f"{item.answer_key}"])
    return replace(item, status=ItemStatus.VALIDATED)


# --- difficulty -------------------------------------------------------------

ProbeFn = Callable[[BenchItem, int], "str | None"]


def difficulty_filter(items: Sequence[BenchItem], probe: ProbeFn,
                      attempts: int = 3) -> list[BenchItem]:
    """Drop items a weak probe answers correctly on every attempt."""
    retained = []
    for item in items:
        if item.status is not ItemStatus.VALIDATED:
            raise ValueError("difficulty filter expects validated items")
        all_correct = True
        for attempt in range(attempts):
            if probe(item, attempt) != item.answer_key:
                all_correct = False
                break
        if not all_correct:
            retained.append(item)
    return retained


class RandomProbe:
    """Uniform seeded guesser used as the default difficulty probe."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, item: BenchItem, attempt: int) -> str | None:
        rng = random.Random(derive_seed(self.seed, "probe", item.item_id,
                                        attempt))
        return rng.choice(item.labels)


# --- finalization -----------------------------------------------------------

def assign_subfield(item: BenchItem, fragment: Fragment,
                    taxonomy: Sequence[Subfield]) -> BenchItem:
    """Maximal sub-lexicon overlap with the source fragment; ties go to the
    earliest taxonomy name, zero overlap additionally flags low confidence."""
    present = {t.casefold() for t in fragment.tokens}
    best_name = taxonomy[0].name
    best_overlap = -1
    for sub in taxonomy:
        overlap = len(sub.terms & present)
        if overlap > best_overlap:
            best_overlap = overlap
            best_name = sub.name
    return replace(item, subfield=best_name,
                   low_confidence=(best_overlap == 0))


def finalize_bench(items: Sequence[BenchItem], taxonomy: Sequence[Subfield],
                   target_n: int,
                   fragments: Mapping[tuple[str, int], Fragment],
                   lexicon: DomainLexicon,
                   ) -> tuple[list[BenchItem], list[str]]:
    """Unique-source enforcement, subfield tagging, density-ranked
    truncation to target_n. Returns (items, warnings)."""
    warnings: list[str] = []
    seen_refs: set[tuple[str, int]] = set()
    unique: list[BenchItem] = []
    for item in items:
        key = (item.source_ref[0], item.source_ref[1])
        if key in seen_refs:
            continue
        seen_refs.add(key)
        unique.append(item)
    if len(unique) < target_n:
        raise InsufficientItems(
            f"{len(unique)} unique-source items for target {target_n}")
    tagged = []
    for item in unique:
        frag = fragments[(item.source_ref[0], item.source_ref[1])]
        tagged.append((item, frag))
    tagged = [(assign_subfield(item, frag, taxonomy), frag)
              for item, frag in tagged]
    ranked = sorted(
        range(len(tagged)),
        key=lambda i: (-density_score(tagged[i][1], lexicon), i))
    final = [tagged[i][0] for i in sorted(ranked[:target_n])]
    buckets = {item.subfield for item in final}
    for sub in taxonomy:
        if sub.name not in buckets:
            warnings.append(f"taxonomy bucket {sub.name!r} has no items")
    return final, warnings


# --- expert review round trip ----------------------------------------------

REVIEW_FIELDS = ("item_id", "decision", "question", "options", "answer_key",
                 "rationale")


def export_review(items: Sequence[BenchItem], path) -> None:
    """Write the review CSV an expert fills in (decision column: accept /
    reject / edit; edited fields only honored for edit)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REVIEW_FIELDS)
        writer.writeheader()
        for item in items:
            writer.writerow({
                "item_id": item.item_id,
                "decision": "accept",
                "question": item.question,
                "options": json.dumps(item.options),
                "answer_key": item.answer_key,
                "rationale": item.rationale,
            })


def apply_review(items: Sequence[BenchItem], path) -> list[BenchItem]:
    """Apply reviewer decisions; accepted and edited items come back
    calibrated, rejected ones are removed, unreviewed ones pass through."""
    decisions: dict[str, dict] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            decisions[row["item_id"]] = row
    out = []
    for item in items:
        row = decisions.get(item.item_id)
        if row is None:
            out.append(item)
            continue
        decision = (row.get("decision") or "accept").strip().lower()
        if decision == "reject":
            continue
        if decision == "edit":
            item = replace(
                item,
                question=row.get("question") or item.question,
                options=json.loads(row["options"]) if row.get("options")
                else list(item.options),
                answer_key=row.get("answer_key") or item.answer_key,
                rationale=row.get("rationale") or item.rationale,
            )
        out.append(replace(item, status=ItemStatus.CALIBRATED))
    return out


# --- persistence ------------------------------------------------------------

def save_benchmark(items: Sequence[BenchItem], path) -> None:
    header = {"schema_version": BENCH_SCHEMA_VERSION, "kind": "benchmark",
              "n_items": len(items)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(stable_json_dumps(header))
        fh.write("\n")
        for item in items:
            fh.write(stable_json_dumps(item.to_record()))
            fh.write("\n")


def load_benchmark(path) -> list[BenchItem]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln for ln in fh.read().split("\n") if ln.strip()]
    if not lines:
        raise BenchmarkParseError("empty benchmark file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise BenchmarkParseError(f"bad header: {exc}") from exc
    if header.get("kind") != "benchmark":
        raise BenchmarkParseError("missing benchmark header line")
    if header.get("schema_version") != BENCH_SCHEMA_VERSION:
        raise BenchmarkParseError(
            f"unsupported schema_version {header.get('schema_version')!r}")
    try:
        items = [BenchItem.from_record(json.loads(ln)) for ln in lines[1:]]
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise BenchmarkParseError(f"bad item record: {exc}") from exc
    if header.get("n_items") != len(items):
        raise BenchmarkParseError(
            f"header says {header.get('n_items')} items, file has "
            f"{len(items)}")
    return items
