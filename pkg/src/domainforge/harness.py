"""Multiple-choice evaluation: prompting, choice extraction, accuracy
reports, run comparison tables, bootstrap intervals.

Choice extraction abstains on ambiguity instead of guessing, so reported
accuracy is a lower bound. Raw responses are always kept in the records;
grading is a pure function over them and can be redone without re-querying.
"""
from __future__ import annotations

import json
import os
import re
import statistics
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ._util import round_half_up, sha256_hex, stable_json_dumps
from .benchgen import BenchItem
from .errors import (ClientError, EmptyRecords, TransportFailure,
                     UnknownItemId)

ENDPOINT_ENV = "DOMAINFORGE_EVAL_ENDPOINT"
TOKEN_ENV = "DOMAINFORGE_EVAL_TOKEN"

PROMPT_TEMPLATE = (
    "{question}\n"
    "\n"
    "{options}\n"
    "\n"
    "Answer with the letter of the correct option."
)


@dataclass(frozen=True)
class ProtocolConfig:
    model_name: str = "mock"
    max_tokens: int = 64
    temperature: float = 0.0
    seed: int = 0
    max_retries: int = 2
    # Fatal transport failure is declared only past this share of items.
    failure_tolerance: float = 0.10

    def digest(self) -> str:
        payload = {
            "model_name": self.model_name,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "seed": self.seed,
            "prompt_template": PROMPT_TEMPLATE,
        }
        return sha256_hex(stable_json_dumps(payload).encode("utf-8"))[:16]


@dataclass
class EvalRecord:
    item_id: str
    raw_response: str
    extracted_choice: str | None  # None means abstain
    correct: bool
    latency_ms: float
    model_name: str
    # Ids of retrieval contexts shown to the model, when a retrieval loop
    # produced the prompt; empty otherwise.
    context_refs: list[str] = field(default_factory=list)
    error_note: str | None = None

    def to_record(self) -> dict:
        return {
            "item_id": self.item_id,
            "raw_response": self.raw_response,
            "extracted_choice": self.extracted_choice,
            "correct": self.correct,
            "latency_ms": self.latency_ms,
            "model_name": self.model_name,
            "context_refs": list(self.context_refs),
            "error_note": self.error_note,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EvalRecord":
        return cls(item_id=rec["item_id"], raw_response=rec["raw_response"],
                   extracted_choice=rec["extracted_choice"],
                   correct=bool(rec["correct"]),
                   latency_ms=float(rec["latency_ms"]),
                   model_name=rec["model_name"],
                   context_refs=list(rec.get("context_refs", [])),
                   error_note=rec.get("error_note"))


# --- choice extraction -------------------------------------------------

_ANSWER_RE = re.compile(
    r"\banswer\s*(?:is|:)?\s*[\(\[\{]?([A-Za-z])[\)\]\}]?(?![A-Za-z0-9])",
    re.IGNORECASE)
_TOKEN_RE = re.compile(r"[0-9A-Za-z]+")


def extract_choice(response: str, labels: Sequence[str],
                   options: Sequence[str] | None = None) -> str | None:
    """Three-rule precedence with abstain-on-ambiguity.

    1. an "answer ... X" line; 2. a standalone label token; 3. a unique
    verbatim option-text match (only when option texts are supplied).
    Disagreement within a rule, or no rule firing, abstains (None).
    """
    label_set = {lab.upper() for lab in labels}

    hits = {m.group(1).upper() for m in _ANSWER_RE.finditer(response)}
    hits &= label_set
    if len(hits) == 1:
        return next(iter(hits))
    if len(hits) > 1:
        return None

    standalone = {tok.upper() for tok in _TOKEN_RE.findall(response)
                  if tok.upper() in label_set and len(tok) == 1}
    if len(standalone) == 1:
        return next(iter(standalone))
    if len(standalone) > 1:
        return None

    if options is not None:
        folded = response.casefold()
        matches = [lab for lab, opt in zip(labels, options)
                   if opt.casefold() in folded]
        if len(matches) == 1:
            return matches[0]
    return None


# --- clients -------------------------------------------------------------

class ScriptedMockClient:
    """Deterministic client answering from an {item_id: response} mapping.

    Items absent from the script get an empty response (graded abstain).
    """

    deterministic = True

    def __init__(self, responses: Mapping[str, str], model_name: str = "mock"):
        self.responses = dict(responses)
        self.model_name = model_name

    @classmethod
    def from_file(cls, path, model_name: str = "mock") -> "ScriptedMockClient":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh), model_name=model_name)

    def __call__(self, prompt: str, item_id: str | None = None) -> str:
        return self.responses.get(item_id or "", "")


class HttpModelClient:
    """POSTs {model, prompt, max_tokens, temperature, seed} and reads
    {text}; endpoint and bearer token come from environment variables."""

    deterministic = False

    def __init__(self, config: ProtocolConfig,
                 endpoint: str | None = None, token: str | None = None):
        self.config = config
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV, "")
        self.token = token or os.environ.get(TOKEN_ENV, "")
        if not self.endpoint:
            raise ClientError(f"no endpoint; set {ENDPOINT_ENV}")

    def __call__(self, prompt: str, item_id: str | None = None) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        body = {
            "model": self.config.model_name,
            "prompt": prompt,
            "max_tokens": self.config.max_tokens,
            "temperature": self.config.temperature,
            "seed": self.config.seed,
        }
        try:
            resp = requests.post(self.endpoint, json=body, headers=headers,
                                 timeout=60)
            resp.raise_for_status()
            return str(resp.json()["text"])
        except Exception as exc:
            raise ClientError(str(exc)) from exc


def render_prompt(item: BenchItem) -> str:
    options = "\n".join(f"{lab}. {opt}"
                        for lab, opt in zip(item.labels, item.options))
    return PROMPT_TEMPLATE.format(question=item.question, options=options)


def run_eval(items: Sequence[BenchItem], client,
             config: ProtocolConfig = ProtocolConfig()) -> list[EvalRecord]:
    """One record per item in benchmark order. Failed calls are retried,
    then recorded as abstain with an error note; the whole run fails only
    when failures exceed the configured tolerance."""
    records: list[EvalRecord] = []
    failures = 0
    deterministic = bool(getattr(client, "deterministic", False))
    for item in items:
        prompt = render_prompt(item)
        response = ""
        note = None
        latency = 0.0
        for attempt in range(config.max_retries + 1):
            started = time.monotonic()
            try:
                response = client(prompt, item_id=item.item_id)
                latency = 0.0 if deterministic else (
                    (time.monotonic() - started) * 1000.0)
                note = None
                break
            except ClientError as exc:
                note = f"client failed after attempt {attempt + 1}: {exc}"
        if note is not None:
            failures += 1
            response = ""
        choice = extract_choice(response, item.labels, item.options)
        records.append(EvalRecord(
            item_id=item.item_id,
            raw_response=response,
            extracted_choice=choice,
            correct=(choice is not None and choice == item.answer_key),
            latency_ms=latency,
            model_name=config.model_name,
            error_note=note,
        ))
    if items and failures / len(items) > config.failure_tolerance:
        raise TransportFailure(
            f"{failures} of {len(items)} items failed after retries")
    return records


# --- reporting ------------------------------------------------------------

@dataclass
class RunReport:
    model_name: str
    n_items: int
    n_correct: int
    accuracy: float  # percentage, half-up to 2 decimals
    per_subfield: dict[str, tuple[int, float]]
    config_digest: str = ""

    def to_record(self) -> dict:
        return {
            "model_name": self.model_name,
            "n_items": self.n_items,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "per_subfield": {k: [n, acc] for k, (n, acc)
                             in sorted(self.per_subfield.items())},
            "config_digest": self.config_digest,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "RunReport":
        return cls(model_name=rec["model_name"], n_items=rec["n_items"],
                   n_correct=rec["n_correct"], accuracy=rec["accuracy"],
                   per_subfield={k: (int(v[0]), float(v[1])) for k, v
                                 in rec.get("per_subfield", {}).items()},
                   config_digest=rec.get("config_digest", ""))


def accuracy_report(records: Sequence[EvalRecord],
                    items: Sequence[BenchItem],
                    config_digest: str = "") -> RunReport:
    if not records:
        raise EmptyRecords("cannot report over zero records")
    by_id = {item.item_id: item for item in items}
    n_correct = 0
    sub_n: dict[str, int] = {}
    sub_correct: dict[str, int] = {}
    for rec in records:
        item = by_id.get(rec.item_id)
        if item is None:
            raise UnknownItemId(rec.item_id)
        sub = item.subfield or "(untagged)"
        sub_n[sub] = sub_n.get(sub, 0) + 1
        if rec.correct:
            n_correct += 1
            sub_correct[sub] = sub_correct.get(sub, 0) + 1
    per_subfield = {
        sub: (n, round_half_up(100.0 * sub_correct.get(sub, 0) / n, 2))
        for sub, n in sorted(sub_n.items())
    }
    return RunReport(
        model_name=records[0].model_name,
        n_items=len(records),
        n_correct=n_correct,
        accuracy=round_half_up(100.0 * n_correct / len(records), 2),
        per_subfield=per_subfield,
        config_digest=config_digest,
    )


@dataclass
class ComparisonTable:
    rows: list[tuple[str, int, float]]  # (model, n_items, accuracy)
    average: float | None = None
    precision: int = 2

    def _fmt(self, value: float) -> str:
        return f"{round_half_up(value, self.precision):.{self.precision}f}"

    def to_csv(self) -> str:
        lines = ["model,n_items,accuracy"]
        for model, n, acc in self.rows:
            lines.append(f"{model},{n},{self._fmt(acc)}")
        if self.average is not None:
            lines.append(f"Average,,{self._fmt(self.average)}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        names = [r[0] for r in self.rows]
        if self.average is not None:
            names.append("Average")
        width = max(len(n) for n in names + ["model"])
        lines = [f"{'model':<{width}}  accuracy"]
        for model, _, acc in self.rows:
            lines.append(f"{model:<{width}}  {self._fmt(acc)}")
        if self.average is not None:
            lines.append(f"{'Average':<{width}}  {self._fmt(self.average)}")
        return "\n".join(lines) + "\n"


def compare_runs(reports: Sequence[RunReport], include_average: bool = False,
                 precision: int = 2) -> ComparisonTable:
    """Comparison table in input order; the average row is the mean of the
    reported (already rounded) accuracies."""
    if not reports:
        raise EmptyRecords("need at least one report")
    rows = [(r.model_name, r.n_items, r.accuracy) for r in reports]
    average = None
    if include_average:
        average = round_half_up(
            statistics.fmean(r.accuracy for r in reports), 2)
    return ComparisonTable(rows=rows, average=average, precision=precision)


def bootstrap_ci(records: Sequence[EvalRecord], n_resamples: int = 10_000,
                 seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap (2.5/97.5) over item-level resampling."""
    if not records:
        raise EmptyRecords("bootstrap over zero records")
    if n_resamples < 100:
        raise ValueError("n_resamples must be >= 100")
    correct = np.array([1.0 if r.correct else 0.0 for r in records])
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(correct), size=(n_resamples, len(correct)))
    accs = correct[idx].mean(axis=1) * 100.0
    low, high = np.percentile(accs, [2.5, 97.5])
    return float(low), float(high)


# --- persistence ------------------------------------------------------------

def save_records(records: Sequence[EvalRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(stable_json_dumps(rec.to_record()))
            fh.write("\n")


def load_records(path) -> list[EvalRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(EvalRecord.from_record(json.loads(line)))
    return out


def save_report(report: RunReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(stable_json_dumps(report.to_record()))
        fh.write("\n")
