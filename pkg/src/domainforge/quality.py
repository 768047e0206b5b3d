"""Fragment quality control: rule filters, n-gram perplexity, lexicon relevance.

The gate classifies each fragment as pass / repaired / dropped. Repair is
destructive-only (line deletion and whitespace normalization, never
rewriting), which keeps provenance auditable and makes the gate idempotent:
re-gating a passed or repaired fragment changes nothing.
"""
from __future__ import annotations

import math
import re
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

from ._util import stable_json_dumps
from .corpus import Document, Fragment
from .errors import EmptyCorpus, EmptyFragment, ZeroProbability

BOS = "<s>"
UNK = "<unk>"


class Verdict(str, Enum):
    PASS = "pass"
    REPAIRED = "repaired"
    DROPPED = "dropped"


# --- rule layer -----------------------------------------------------------

DEFAULT_BOILERPLATE = (
    r"(?i)^all rights reserved",
    r"(?i)^copyright\b",
    r"(?i)^downloaded from\b",
    r"(?i)^this page (was )?intentionally left blank",
    r"(?i)^click here\b",
    r"(?i)^subscribe (now|today)\b",
)


@dataclass(frozen=True)
class RuleConfig:
    min_tokens: int = 5
    max_tokens: int = 100_000
    # Share of non-whitespace characters allowed to be non-alphanumeric.
    max_symbol_ratio: float = 0.5
    # Share of lines allowed to be repeats of an earlier line.
    max_repeated_line_ratio: float = 0.3
    boilerplate_patterns: tuple[str, ...] = DEFAULT_BOILERPLATE


def _symbol_ratio(text: str) -> float:
    chars = [c for c in text if not c.isspace()]
    if not chars:
        return 1.0
    symbols = sum(1 for c in chars if not c.isalnum())
    return symbols / len(chars)


def _repeated_line_ratio(text: str) -> float:
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        return 0.0
    return (len(lines) - len(set(lines))) / len(lines)


def _boilerplate_lines(text: str, patterns: Sequence[str]) -> list[int]:
    compiled = [re.compile(p) for p in patterns]
    hits = []
    for i, line in enumerate(text.split("\n")):
        if any(p.search(line.strip()) for p in compiled):
            hits.append(i)
    return hits


def rule_filter(fragment: Fragment, rules: RuleConfig = RuleConfig()) -> tuple[str, list[str]]:
    """Apply hard rules in order (first violation drops), then soft rules.

    Returns ("drop", reasons) / ("repair", reasons) / ("pass", []).
    """
    if fragment.token_count < rules.min_tokens:
        return "drop", ["min_length"]
    if fragment.token_count > rules.max_tokens:
        return "drop", ["max_length"]
    if _symbol_ratio(fragment.text) > rules.max_symbol_ratio:
        return "drop", ["symbol_ratio"]
    if _repeated_line_ratio(fragment.text) > rules.max_repeated_line_ratio:
        return "drop", ["repeated_lines"]
    if _boilerplate_lines(fragment.text, rules.boilerplate_patterns):
        return "repair", ["boilerplate"]
    return "pass", []


# --- n-gram model ---------------------------------------------------------

@dataclass(frozen=True)
class Laplace:
    """Additive smoothing; alpha=0 is plain maximum likelihood."""
    alpha: float = 1.0


@dataclass(frozen=True)
class Interpolated:
    """Linear interpolation across orders n..1; lambdas must sum to 1.

    The unigram floor uses add-one smoothing so every token, including the
    unknown symbol, has positive probability; perplexity is then finite for
    any input.
    """
    lambdas: tuple[float, ...] = (0.6, 0.3, 0.1)


Smoothing = Laplace | Interpolated


@dataclass
class NgramModel:
    n: int
    vocab: set[str] = field(repr=False)
    vocab_size: int  # distinct trained tokens plus the unknown symbol
    smoothing: Smoothing
    # counts[j] maps a length-j context tuple to {token: count}; totals[j]
    # holds the per-context sums. j ranges over 0..n-1.
    counts: dict[int, dict[tuple, dict[str, int]]] = field(repr=False)
    totals: dict[int, dict[tuple, int]] = field(repr=False)
    token_total: int = 0

    def _q(self, order: int, context: tuple, token: str) -> float:
        """Single-order probability with the model's fallback rules."""
        j = order - 1
        if order == 1 and isinstance(self.smoothing, Interpolated):
            c = self.counts[0].get((), {}).get(token, 0)
            return (c + 1) / (self.token_total + self.vocab_size)
        ctx_total = self.totals[j].get(context, 0)
        c = self.counts[j].get(context, {}).get(token, 0)
        if isinstance(self.smoothing, Laplace) and self.smoothing.alpha > 0:
            a = self.smoothing.alpha
            return (c + a) / (ctx_total + a * self.vocab_size)
        # Maximum likelihood: unseen contexts back off to uniform.
        if ctx_total == 0:
            return 1.0 / self.vocab_size
        return c / ctx_total

    def prob(self, context: Sequence[str], token: str) -> float:
        """p(token | context); context is the preceding token window."""
        if token not in self.vocab:
            token = UNK
        padded = tuple(context)[-(self.n - 1):] if self.n > 1 else ()
        if len(padded) < self.n - 1:
            padded = (BOS,) * (self.n - 1 - len(padded)) + padded
        if isinstance(self.smoothing, Interpolated):
            lambdas = self.smoothing.lambdas
            total = 0.0
            for idx, lam in enumerate(lambdas):
                order = self.n - idx
                ctx = padded[len(padded) - (order - 1):] if order > 1 else ()
                total += lam * self._q(order, ctx, token)
            return total
        return self._q(self.n, padded, token)


def train_ngram_lm(corpus: Iterable[Fragment], n: int = 3,
                   smoothing: Smoothing = Interpolated()) -> NgramModel:
    """Count-based LM over fragment token streams, orders 1..n.

    Fragments are independent sequences padded with n-1 begin markers;
    vocabulary is every token seen plus one unknown symbol.
    """
    if n < 1:
        raise ValueError(f"order must be >= 1, got {n}")
    if isinstance(smoothing, Interpolated):
        if len(smoothing.lambdas) != n:
            raise ValueError(
                f"interpolated smoothing needs {n} lambdas, got "
                f"{len(smoothing.lambdas)}")
        if abs(sum(smoothing.lambdas) - 1.0) > 1e-9:
            raise ValueError("interpolation weights must sum to 1")
    counts: dict[int, dict[tuple, dict[str, int]]] = {j: {} for j in range(n)}
    totals: dict[int, dict[tuple, int]] = {j: {} for j in range(n)}
    vocab: set[str] = set()
    token_total = 0
    saw_fragment = False
    for frag in corpus:
        saw_fragment = True
        toks = frag.tokens
        vocab.update(toks)
        token_total += len(toks)
        padded = [BOS] * (n - 1) + list(toks)
        for pos in range(n - 1, len(padded)):
            token = padded[pos]
            for j in range(n):
                ctx = tuple(padded[pos - j:pos])
                slot = counts[j].setdefault(ctx, {})
                slot[token] = slot.get(token, 0) + 1
                totals[j][ctx] = totals[j].get(ctx, 0) + 1
    if not saw_fragment or token_total == 0:
        raise EmptyCorpus("model training needs at least one token")
    return NgramModel(n=n, vocab=vocab, vocab_size=len(vocab) + 1,
                      smoothing=smoothing, counts=counts, totals=totals,
                      token_total=token_total)


def sequence_logprob(model: NgramModel, tokens: Sequence[str]) -> float:
    """Sum of ln p over the sequence with begin-of-sequence padding."""
    total = 0.0
    history: list[str] = []
    for token in tokens:
        p = model.prob(history, token)
        if p <= 0.0:
            raise ZeroProbability(
                f"token {token!r} has zero probability; smoothing is "
                f"disabled")
        total += math.log(p)
        history.append(token)
    return total


def perplexity(model: NgramModel, fragment: Fragment) -> float:
    """exp(-mean ln p) over the fragment's tokens."""
    if fragment.token_count == 0:
        raise EmptyFragment("perplexity of an empty fragment is undefined")
    logp = sequence_logprob(model, fragment.tokens)
    return math.exp(-logp / fragment.token_count)


def median_perplexity(model: NgramModel, fragments: Sequence[Fragment]) -> float:
    if not fragments:
        raise EmptyCorpus("median over an empty sample")
    return statistics.median(perplexity(model, f) for f in fragments)


# --- relevance ------------------------------------------------------------

@dataclass
class DomainLexicon:
    terms: dict[str, float]
    normalization: float = 0.0

    def __post_init__(self):
        if not self.terms:
            raise ValueError("lexicon needs at least one term")
        if any(w < 0 for w in self.terms.values()):
            raise ValueError("lexicon weights must be non-negative")
        if not self.normalization:
            self.normalization = sum(self.terms.values())


def load_lexicon(path) -> DomainLexicon:
    """Read a term<TAB>weight file; terms are case-folded."""
    terms: dict[str, float] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            term, _, weight = line.partition("\t")
            terms[term.casefold()] = float(weight) if weight else 1.0
    return DomainLexicon(terms=terms)


def relevance_score(fragment: Fragment, lexicon: DomainLexicon) -> float:
    present = {t.casefold() for t in fragment.tokens}
    score = sum(w for term, w in lexicon.terms.items() if term in present)
    return min(max(score / lexicon.normalization, 0.0), 1.0)


# --- the gate --------------------------------------------------------------

@dataclass(frozen=True)
class GateThresholds:
    ppl_max: float
    rel_min: float = 0.02
    domain_categories: tuple[str, ...] = ("domain_literature",
                                          "domain_encyclopedia")
    rules: RuleConfig = RuleConfig()


@dataclass
class QualityReport:
    fragment_ref: tuple[str, int]
    verdict: Verdict
    reasons: list[str] = field(default_factory=list)
    perplexity: float | None = None
    relevance: float | None = None
    repaired_text: str | None = None

    def validate(self, original_text: str | None = None) -> None:
        if self.verdict is Verdict.DROPPED and not self.reasons:
            raise ValueError("dropped report carries no reason")
        if self.verdict is Verdict.REPAIRED:
            if not self.repaired_text:
                raise ValueError("repaired report lacks repaired_text")
            if original_text is not None and self.repaired_text == original_text:
                raise ValueError("repaired_text equals the original")

    def to_record(self) -> dict:
        return {
            "doc_id": self.fragment_ref[0],
            "fragment_index": self.fragment_ref[1],
            "verdict": self.verdict.value,
            "reasons": list(self.reasons),
            "perplexity": self.perplexity,
            "relevance": self.relevance,
            "repaired_text": self.repaired_text,
        }


def repair_text(text: str, rules: RuleConfig) -> str:
    """Destructive repair: drop boilerplate lines, collapse repeated lines,
    normalize in-line whitespace."""
    drop = set(_boilerplate_lines(text, rules.boilerplate_patterns))
    seen: set[str] = set()
    out: list[str] = []
    for i, line in enumerate(text.split("\n")):
        if i in drop:
            continue
        norm = " ".join(line.split())
        if not norm:
            continue
        if norm in seen:
            continue
        seen.add(norm)
        out.append(norm)
    return "\n".join(out)


def quality_gate(fragment: Fragment, model: NgramModel,
                 lexicon: DomainLexicon, thresholds: GateThresholds,
                 category: str = "general") -> QualityReport:
    """Classify one fragment. Hard rule violations, excessive perplexity,
    and (for domain categories) insufficient relevance drop it; soft
    violations trigger repair followed by a rule re-check.
    """
    ref = (fragment.doc_id, fragment.index)
    verdict, reasons = rule_filter(fragment, thresholds.rules)
    if verdict == "drop":
        return QualityReport(ref, Verdict.DROPPED, reasons)
    ppl = perplexity(model, fragment)
    rel = relevance_score(fragment, lexicon)
    if ppl > thresholds.ppl_max:
        return QualityReport(ref, Verdict.DROPPED, ["perplexity"],
                             perplexity=ppl, relevance=rel)
    if category in thresholds.domain_categories and rel < thresholds.rel_min:
        return QualityReport(ref, Verdict.DROPPED, ["relevance"],
                             perplexity=ppl, relevance=rel)
    if verdict == "pass":
        return QualityReport(ref, Verdict.PASS, [],
                             perplexity=ppl, relevance=rel)
    repaired = repair_text(fragment.text, thresholds.rules)
    candidate = Fragment.make(fragment.doc_id, fragment.index, fragment.kind,
                              repaired)
    re_verdict, re_reasons = rule_filter(candidate, thresholds.rules)
    if re_verdict != "pass":
        return QualityReport(ref, Verdict.DROPPED, reasons + re_reasons,
                             perplexity=ppl, relevance=rel)
    return QualityReport(ref, Verdict.REPAIRED, reasons,
                         perplexity=ppl, relevance=rel,
                         repaired_text=repaired)


def gate_corpus(docs: Sequence[Document], model: NgramModel,
                lexicon: DomainLexicon, thresholds: GateThresholds,
                ) -> tuple[list[Document], list[QualityReport]]:
    """Gate every fragment; rebuild documents from survivors.

    Documents whose fragments all drop are removed entirely. Surviving
    fragments are reindexed to keep per-document order contiguous.
    """
    out_docs: list[Document] = []
    reports: list[QualityReport] = []
    for doc in docs:
        survivors: list[Fragment] = []
        for frag in doc.fragments:
            rep = quality_gate(frag, model, lexicon, thresholds,
                               category=doc.category)
            reports.append(rep)
            if rep.verdict is Verdict.DROPPED:
                continue
            text = rep.repaired_text if rep.verdict is Verdict.REPAIRED else frag.text
            survivors.append(Fragment.make(doc.id, len(survivors), frag.kind,
                                           text))
        if survivors:
            out_docs.append(Document(
                id=doc.id, source_path=doc.source_path, category=doc.category,
                language_tag=doc.language_tag, fragments=survivors,
                provenance=doc.provenance))
    return out_docs, reports


def save_reports(reports: Iterable[QualityReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rep in reports:
            fh.write(stable_json_dumps(rep.to_record()))
            fh.write("\n")
