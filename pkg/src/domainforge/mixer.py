"""Token-budgeted corpus mixing and distribution reporting.

Budgets are allocated by largest-remainder rounding (exact-sum invariant)
and filled by seeded sampling without replacement at document granularity:
a document is never split across the budget boundary, so a category may
overshoot its budget by strictly less than one document.
"""
from __future__ import annotations

import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

from ._util import derive_seed, stable_json_dumps
from .corpus import Document
from .errors import AllZeroWeights, PoolExhausted, ZeroBudget

# Minimum fill fraction before an exhausted pool is an error rather than
# an accepted shortfall.
FILL_TOLERANCE = 0.99


@dataclass(frozen=True)
class MixPlan:
    total_budget: int
    allocations: dict[str, int]
    ratio: dict[str, float]
    seed: int

    def to_record(self) -> dict:
        return {
            "total_budget": self.total_budget,
            "allocations": dict(sorted(self.allocations.items())),
            "ratio": dict(sorted(self.ratio.items())),
            "seed": self.seed,
        }


SPLIT_NAMES = ("cpt_mix", "sft_general", "sft_domain_cot", "rlvr")


@dataclass(frozen=True)
class SplitSpec:
    """One post-training data split; counts are tokens for cpt_mix and
    samples for the rest."""
    name: str
    target_count: int

    def __post_init__(self):
        if self.name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {self.name!r}")
        if self.target_count <= 0:
            raise ValueError("target_count must be positive")


# Reference split sizes at full scale; desk runs multiply by --scale.
FULL_SCALE_SPLITS = {
    "cpt_mix": 30_000_000_000,
    "sft_general": 800_000,
    "sft_domain_cot": 12_000,
    "rlvr": 7_000,
}


def default_splits(scale: float = 1.0) -> list[SplitSpec]:
    if scale <= 0:
        raise ValueError("scale must be positive")
    return [SplitSpec(name, max(1, round(count * scale)))
            for name, count in FULL_SCALE_SPLITS.items()]


def plan_mixture(total_budget: int, ratio: Mapping[str, float],
                 seed: int = 0) -> MixPlan:
    """Proportional allocation with largest-remainder rounding.

    Allocations always sum exactly to total_budget; zero-weight categories
    receive nothing.
    """
    if total_budget <= 0:
        raise ZeroBudget(f"total_budget must be positive, got {total_budget}")
    if not ratio or all(w <= 0 for w in ratio.values()):
        raise AllZeroWeights("at least one category weight must be positive")
    if any(w < 0 for w in ratio.values()):
        raise ValueError("weights must be non-negative")
    weights = {cat: Fraction(w) for cat, w in ratio.items()}
    total_w = sum(weights.values())
    quotas = {cat: Fraction(total_budget) * w / total_w
              for cat, w in weights.items()}
    alloc = {cat: int(q) for cat, q in quotas.items()}
    remainder = total_budget - sum(alloc.values())
    # Ties broken by category name for determinism.
    order = sorted(quotas, key=lambda c: (quotas[c] - alloc[c], c),
                   reverse=True)
    for cat in order[:remainder]:
        alloc[cat] += 1
    return MixPlan(total_budget=total_budget, allocations=alloc,
                   ratio=dict(ratio), seed=seed)


@dataclass
class MixResult:
    documents: list[Document]
    realized: dict[str, int]
    plan: MixPlan

    def to_record(self) -> dict:
        return {
            "plan": self.plan.to_record(),
            "realized": dict(sorted(self.realized.items())),
            "documents": len(self.documents),
            "tokens": sum(d.token_count or 0 for d in self.documents),
        }


def sample_corpus(pools: Mapping[str, Sequence[Document]],
                  plan: MixPlan) -> MixResult:
    """Fill each category budget by seeded shuffle-and-take, then interleave
    all selections with a second seeded shuffle.

    Raises PoolExhausted when a pool runs out below 99% of its budget.
    """
    selected: list[Document] = []
    realized: dict[str, int] = {}
    for cat in sorted(plan.allocations):
        budget = plan.allocations[cat]
        if budget == 0:
            realized[cat] = 0
            continue
        pool = list(pools.get(cat, ()))
        if not pool:
            raise PoolExhausted(cat, 0, budget)
        rng = random.Random(derive_seed(plan.seed, "category", cat))
        rng.shuffle(pool)
        got = 0
        taken: list[Document] = []
        for doc in pool:
            if got >= budget:
                break
            taken.append(doc)
            got += doc.token_count or 0
        if got < budget and got < FILL_TOLERANCE * budget:
            raise PoolExhausted(cat, got, budget)
        realized[cat] = got
        selected.extend(taken)
    rng = random.Random(derive_seed(plan.seed, "interleave"))
    rng.shuffle(selected)
    return MixResult(documents=selected, realized=realized, plan=plan)


def corpus_stats(docs: Sequence[Document]) -> dict:
    """Distribution report: per-category totals, fragment-kind histogram."""
    categories: dict[str, dict] = {}
    kinds: dict[str, int] = {}
    total_tokens = 0
    for doc in docs:
        slot = categories.setdefault(doc.category,
                                     {"documents": 0, "tokens": 0})
        slot["documents"] += 1
        slot["tokens"] += doc.token_count or 0
        total_tokens += doc.token_count or 0
        for frag in doc.fragments:
            kinds[frag.kind.value] = kinds.get(frag.kind.value, 0) + 1
    for slot in categories.values():
        slot["share"] = slot["tokens"] / total_tokens if total_tokens else 0.0
    return {
        "categories": dict(sorted(categories.items())),
        "fragment_kinds": dict(sorted(kinds.items())),
        "documents": len(docs),
        "tokens": total_tokens,
    }


def stats_csv(stats: dict) -> str:
    """Category share table as CSV, one row per category."""
    lines = ["category,documents,tokens,share"]
    for cat, slot in stats["categories"].items():
        lines.append(f"{cat},{slot['documents']},{slot['tokens']},"
                     f"{slot['share']:.6f}")
    return "\n".join(lines) + "\n"


def save_mix_result(result: MixResult, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(stable_json_dumps(result.to_record()))
        fh.write("\n")
