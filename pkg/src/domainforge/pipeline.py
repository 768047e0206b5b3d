"""Sequential pipeline runner: manifest validation, staged execution with
resume markers, and a digest-recorded run manifest.

A pipeline is described by a JSON manifest (one global seed, a stage list,
per-stage config blocks). Every stage writes its artifacts under the run
directory with fixed names, records input and output digests, and can be
skipped on re-runs when nothing it reads has changed. All randomness flows
from the manifest seed through per-stage derivation, so equal inputs plus
an equal manifest reproduce every artifact byte for byte.
"""
from __future__ import annotations

import importlib.resources
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from ._util import derive_seed, sha256_file, sha256_hex, stable_json_dumps
from .errors import ManifestParseError, RunLocked, StageFailure
from . import benchgen, dedup, mixer, quality, ragloop, rlvr
from .corpus import ingest_markdown, load_corpus, save_corpus
from .harness import (ENDPOINT_ENV, HttpModelClient, ProtocolConfig,
                      ScriptedMockClient, accuracy_report, run_eval,
                      save_records, save_report)
from .quality import GateThresholds, load_lexicon

SCHEMA_VERSION = 1

STAGE_ORDER = ("ingest", "dedup", "quality", "mix", "bench", "eval",
               "rag", "rlvr")

# Fixed artifact names, relative to the run directory.
ARTIFACTS: dict[str, tuple[str, ...]] = {
    "ingest": ("corpus_raw.jsonl",),
    "dedup": ("corpus_dedup.jsonl", "dedup_report.json"),
    "quality": ("corpus_clean.jsonl", "quality_reports.jsonl"),
    "mix": ("mix_documents.jsonl", "mix_result.json", "corpus_stats.csv"),
    "bench": ("benchmark.jsonl",),
    "eval": ("eval_records.jsonl", "eval_report.json"),
    "rag": ("rag_index.idx", "rag_records.jsonl", "rag_report.json"),
    "rlvr": ("rlvr_trace.csv", "rlvr_summary.json"),
}

# Which artifact each later stage treats as "the corpus", newest first.
_CORPUS_PRODUCERS = (
    ("quality", "corpus_clean.jsonl"),
    ("dedup", "corpus_dedup.jsonl"),
    ("ingest", "corpus_raw.jsonl"),
)

_INPUT_KEYS = ("corpus", "benchmark", "lexicon", "taxonomy", "responses",
               "task")

LOCK_NAME = ".lock"
RUN_MANIFEST_NAME = "run_manifest.json"
TRAINING_REFERENCE_NAME = "training_reference.json"

# Reference full-scale training configurations for the stages this toolkit
# prepares data for but never executes. Emitted as a documentation artifact
# on every run; nothing reads these values back.
TRAINING_REFERENCE: dict = {
    "note": ("Full-scale training reference configuration. Documentation "
             "only: no stage in this toolkit trains or loads a model."),
    "cpt": {
        "learning_rate": 2.0e-5,
        "lr_scheduler": "wsd",
        "max_length": 16384,
        "batch_size_total": 256,
        "precision": "bf16",
        "warmup_ratio": 0.01,
        "epochs": 1,
    },
    "sft_general": {
        "learning_rate": 5.0e-5,
        "lr_scheduler": "cosine",
        "max_length": 16384,
        "batch_size_total": 256,
        "precision": "bf16",
        "warmup_ratio": 0.05,
    },
    "sft_domain_cot": {
        "learning_rate": 2.0e-5,
        "lr_scheduler": "cosine",
        "max_length": 20000,
        "batch_size_total": 128,
        "precision": "bf16",
        "warmup_ratio": 0.03,
    },
    "grpo": {
        "actor_learning_rate": 2.0e-6,
        "global_batch_size": 128,
        "max_prompt_length": 1024,
        "max_response_length": 8192,
        "kl_coefficient": 0.005,
        "kl_loss_type": "low_var_kl",
        "n_samples": 8,
        "precision": "mixed bf16/fp32",
    },
}


def default_data_path(name: str) -> Path:
    """Path of a bundled data file (shipped lexicon, taxonomy)."""
    return Path(str(importlib.resources.files("domainforge") / "data" / name))


DEFAULT_LEXICON = "combustion_lexicon.tsv"
DEFAULT_TAXONOMY = "taxonomy.json"


# --- manifest ----------------------------------------------------------------

_STAGE_DEFAULTS: dict[str, dict] = {
    "ingest": {"sources": []},
    "dedup": {"threshold": 0.8, "k": 256, "bands": 32, "rows": 8,
              "shingle_width": 5},
    "quality": {"ppl_max": None, "ppl_multiplier": 4.0, "rel_min": 0.02,
                "ngram_order": 1},
    "mix": {"budget_tokens": 10_000,
            "weights": {"domain_literature": 0.5,
                        "domain_encyclopedia": 0.5,
                        "general": 5.0}},
    "bench": {"target_n": 40, "draft_top_n": None, "n_options": 4,
              "probe_attempts": 3},
    "eval": {"model_name": "mock", "max_tokens": 64, "temperature": 0.0,
             "max_retries": 2, "failure_tolerance": 0.10},
    "rag": {"dims": 256, "top_k": 5, "context_budget": 1024,
            "model_name": "mock"},
    "rlvr": {"kind": "path", "iterations": 300, "beta": 0.005,
             "n_samples": 8, "learning_rate": 0.05, "batch_prompts": 16,
             "temperature": 1.0, "init": "cold_start_biased"},
}

_TOP_KEYS = ("schema_version", "seed", "scale", "run_dir", "stages",
             "inputs") + STAGE_ORDER


@dataclass(frozen=True)
class PipelineManifest:
    seed: int = 0
    scale: float = 1.0
    run_dir: str = "run"
    stages: tuple[str, ...] = STAGE_ORDER
    inputs: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_record(self) -> dict:
        # Stage configs sit at the top level under the stage name, same
        # shape validate_config accepts, so a dumped manifest revalidates.
        rec = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "scale": self.scale,
            "run_dir": self.run_dir,
            "stages": list(self.stages),
            "inputs": dict(self.inputs),
        }
        for stage in STAGE_ORDER:
            if stage in self.configs:
                rec[stage] = dict(self.configs[stage])
        return rec

    def digest(self) -> str:
        # run_dir is a location, not content; two runs of the same
        # manifest into different directories must agree on this digest.
        rec = self.to_record()
        del rec["run_dir"]
        return sha256_hex(stable_json_dumps(rec).encode("utf-8"))

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, "stage", stage)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return _is_int(x) or isinstance(x, float)


def _check_fields(block: dict, stage: str, out: list[str]) -> None:
    """Type and range checks for one stage config block, all violations
    reported against dotted field names."""
    def bad(fieldname: str, why: str) -> None:
        out.append(f"{stage}.{fieldname}: {why}")

    c = block
    if stage == "ingest":
        srcs = c["sources"]
        if not isinstance(srcs, list):
            bad("sources", "must be a list")
            return
        for i, entry in enumerate(srcs):
            if isinstance(entry, str):
                continue
            if not isinstance(entry, dict):
                bad(f"sources[{i}]", "must be a path or an object")
                continue
            unknown = set(entry) - {"path", "category"}
            if unknown:
                bad(f"sources[{i}]", f"unknown keys {sorted(unknown)}")
            if not isinstance(entry.get("path"), str) or not entry.get("path"):
                bad(f"sources[{i}].path", "must be a non-empty string")
            if "category" in entry and not isinstance(entry["category"], str):
                bad(f"sources[{i}].category", "must be a string")
    elif stage == "dedup":
        if not (_is_num(c["threshold"]) and 0.0 <= c["threshold"] <= 1.0):
            bad("threshold", f"{c['threshold']!r} outside [0, 1]")
        for key in ("k", "bands", "rows", "shingle_width"):
            if not (_is_int(c[key]) and c[key] >= 1):
                bad(key, "must be a positive integer")
        if (_is_int(c["k"]) and _is_int(c["bands"]) and _is_int(c["rows"])
                and c["bands"] * c["rows"] != c["k"]):
            bad("k", f"bands*rows = {c['bands'] * c['rows']} != k = {c['k']}")
    elif stage == "quality":
        if c["ppl_max"] is not None and not (_is_num(c["ppl_max"])
                                             and c["ppl_max"] > 0):
            bad("ppl_max", "must be null or a positive number")
        if not (_is_num(c["ppl_multiplier"]) and c["ppl_multiplier"] > 0):
            bad("ppl_multiplier", "must be a positive number")
        if not (_is_num(c["rel_min"]) and 0.0 <= c["rel_min"] <= 1.0):
            bad("rel_min", f"{c['rel_min']!r} outside [0, 1]")
        if not (_is_int(c["ngram_order"]) and 1 <= c["ngram_order"] <= 5):
            bad("ngram_order", "must be an integer in [1, 5]")
    elif stage == "mix":
        if not (_is_int(c["budget_tokens"]) and c["budget_tokens"] > 0):
            bad("budget_tokens", "must be a positive integer")
        w = c["weights"]
        if not (isinstance(w, dict) and w
                and all(isinstance(k, str) and _is_num(v) and v >= 0
                        for k, v in w.items())):
            bad("weights", "must map category names to non-negative numbers")
        elif all(v == 0 for v in w.values()):
            bad("weights", "at least one weight must be positive")
    elif stage == "bench":
        if not (_is_int(c["target_n"]) and c["target_n"] >= 1):
            bad("target_n", "must be a positive integer")
        if c["draft_top_n"] is not None and not (
                _is_int(c["draft_top_n"])
                and c["draft_top_n"] >= (c["target_n"] if _is_int(c["target_n"]) else 1)):
            bad("draft_top_n", "must be null or an integer >= target_n")
        if not (_is_int(c["n_options"])
                and 2 <= c["n_options"] <= len(benchgen.OPTION_LABELS)):
            bad("n_options",
                f"must be an integer in [2, {len(benchgen.OPTION_LABELS)}]")
        if not (_is_int(c["probe_attempts"]) and c["probe_attempts"] >= 1):
            bad("probe_attempts", "must be a positive integer")
    elif stage == "eval":
        if not isinstance(c["model_name"], str) or not c["model_name"]:
            bad("model_name", "must be a non-empty string")
        if not (_is_int(c["max_tokens"]) and c["max_tokens"] >= 1):
            bad("max_tokens", "must be a positive integer")
        if not (_is_num(c["temperature"]) and c["temperature"] >= 0):
            bad("temperature", "must be a non-negative number")
        if not (_is_int(c["max_retries"]) and c["max_retries"] >= 0):
            bad("max_retries", "must be a non-negative integer")
        if not (_is_num(c["failure_tolerance"])
                and 0.0 <= c["failure_tolerance"] <= 1.0):
            bad("failure_tolerance", f"{c['failure_tolerance']!r} outside [0, 1]")
    elif stage == "rag":
        if not (_is_int(c["dims"]) and c["dims"] >= 2):
            bad("dims", "must be an integer >= 2")
        if not (_is_int(c["top_k"]) and c["top_k"] >= 1):
            bad("top_k", "must be a positive integer")
        if not (_is_int(c["context_budget"]) and c["context_budget"] >= 1):
            bad("context_budget", "must be a positive integer")
        if not isinstance(c["model_name"], str) or not c["model_name"]:
            bad("model_name", "must be a non-empty string")
    elif stage == "rlvr":
        if c["kind"] not in ("path", "shortcut"):
            bad("kind", f"{c['kind']!r} is not one of 'path', 'shortcut'")
        if not (_is_int(c["iterations"]) and c["iterations"] >= 1):
            bad("iterations", "must be a positive integer")
        if not (_is_num(c["beta"]) and c["beta"] >= 0):
            bad("beta", "must be a non-negative number")
        if not (_is_int(c["n_samples"]) and c["n_samples"] >= 2):
            bad("n_samples", "must be an integer >= 2")
        if not (_is_num(c["learning_rate"]) and c["learning_rate"] > 0):
            bad("learning_rate", "must be a positive number")
        if not (_is_int(c["batch_prompts"]) and c["batch_prompts"] >= 1):
            bad("batch_prompts", "must be a positive integer")
        if not (_is_num(c["temperature"]) and c["temperature"] > 0):
            bad("temperature", "must be a positive number")
        if c["init"] not in rlvr.INITS:
            bad("init", f"{c['init']!r} is not one of {sorted(rlvr.INITS)}")


def _check_order(stages: Sequence[str], inputs: Mapping,
                 out: list[str]) -> None:
    """Every stage's inputs must come from an earlier stage or an explicit
    input path."""
    seen: set[str] = set()
    for stage in stages:
        if stage in ("dedup", "quality", "mix", "bench", "rag"):
            has_producer = any(p in seen for p, _ in _CORPUS_PRODUCERS)
            if not has_producer and not inputs.get("corpus"):
                out.append(
                    f"stages: {stage!r} needs a corpus, but no earlier stage "
                    f"produces one and inputs.corpus is not set")
        if stage in ("eval", "rag"):
            if "bench" not in seen and not inputs.get("benchmark"):
                out.append(
                    f"stages: {stage!r} needs a benchmark, but 'bench' does "
                    f"not run earlier and inputs.benchmark is not set")
        seen.add(stage)


def validate_config(source) -> tuple[PipelineManifest | None, list[str]]:
    """Validate a manifest file, path, or dict.

    Returns (manifest, []) with every default filled in, or (None,
    violations) listing every problem found; it does not stop at the
    first. Raises ManifestParseError only when the input cannot be parsed
    at all.
    """
    if isinstance(source, Mapping):
        raw = dict(source)
    else:
        try:
            with open(source, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ManifestParseError(f"cannot read manifest: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"manifest is not JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ManifestParseError("manifest must be a JSON object")

    violations: list[str] = []
    for key in raw:
        if key not in _TOP_KEYS:
            violations.append(f"unknown key {key!r}")

    version = raw.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        violations.append(
            f"schema_version: {version!r} is not {SCHEMA_VERSION}")

    seed = raw.get("seed", 0)
    if not (_is_int(seed) and seed >= 0):
        violations.append("seed: must be a non-negative integer")
        seed = 0

    scale = raw.get("scale", 1.0)
    if not (_is_num(scale) and scale > 0):
        violations.append("scale: must be a positive number")
        scale = 1.0

    run_dir = raw.get("run_dir", "run")
    if not isinstance(run_dir, str) or not run_dir:
        violations.append("run_dir: must be a non-empty string")
        run_dir = "run"

    stages_raw = raw.get("stages", list(STAGE_ORDER))
    stages: list[str] = []
    if not isinstance(stages_raw, list):
        violations.append("stages: must be a list of stage names")
    else:
        for s in stages_raw:
            if s not in STAGE_ORDER:
                violations.append(f"stages: unknown stage {s!r}")
            elif s in stages:
                violations.append(f"stages: duplicate stage {s!r}")
            else:
                stages.append(s)

    inputs_raw = raw.get("inputs", {})
    inputs: dict = {}
    if not isinstance(inputs_raw, dict):
        violations.append("inputs: must be an object")
    else:
        for key, value in inputs_raw.items():
            if key not in _INPUT_KEYS:
                violations.append(f"inputs: unknown key {key!r}")
            elif value is not None and not isinstance(value, str):
                violations.append(f"inputs.{key}: must be null or a path")
            else:
                inputs[key] = value

    configs: dict = {}
    for stage in STAGE_ORDER:
        block = raw.get(stage, {})
        merged = {k: (dict(v) if isinstance(v, dict) else v)
                  for k, v in _STAGE_DEFAULTS[stage].items()}
        if not isinstance(block, dict):
            violations.append(f"{stage}: config block must be an object")
        else:
            for key, value in block.items():
                if key not in merged:
                    violations.append(f"{stage}: unknown key {key!r}")
                else:
                    merged[key] = value
            _check_fields(merged, stage, violations)
        configs[stage] = merged

    _check_order(stages, inputs, violations)

    if violations:
        return None, violations
    return PipelineManifest(seed=seed, scale=float(scale), run_dir=run_dir,
                            stages=tuple(stages), inputs=inputs,
                            configs=configs, schema_version=SCHEMA_VERSION), []


def load_manifest(source) -> PipelineManifest:
    """validate_config, raising on violations instead of returning them."""
    manifest, violations = validate_config(source)
    if manifest is None:
        raise ValueError("invalid manifest:\n" +
                         "\n".join(f"  - {v}" for v in violations))
    return manifest


# --- run manifest ------------------------------------------------------------

@dataclass
class StageRun:
    name: str
    status: str  # completed | skipped | failed | blocked
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    started_at: str = ""
    finished_at: str = ""

    def digest_record(self) -> dict:
        return {"name": self.name, "inputs": dict(sorted(self.inputs.items())),
                "outputs": dict(sorted(self.outputs.items())),
                "counts": self.counts}

    def to_record(self) -> dict:
        rec = self.digest_record()
        rec.update(status=self.status, started_at=self.started_at,
                   finished_at=self.finished_at)
        return rec


@dataclass
class RunManifest:
    manifest_digest: str
    seed: int
    tool_version: str = __version__
    stages: list[StageRun] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    def run_digest(self) -> str:
        """Digest over everything reproducible: stage names, input and
        output digests, realized counts. Timestamps and skip/run status
        are execution details and stay out."""
        payload = {
            "manifest_digest": self.manifest_digest,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "stages": [s.digest_record() for s in self.stages],
        }
        return sha256_hex(stable_json_dumps(payload).encode("utf-8"))

    def to_record(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_version": self.tool_version,
            "manifest_digest": self.manifest_digest,
            "seed": self.seed,
            "run_digest": self.run_digest(),
            "stages": [s.to_record() for s in self.stages],
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


def save_run_manifest(run: RunManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(stable_json_dumps(run.to_record()))
        fh.write("\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# --- stage execution ---------------------------------------------------------

class _RunContext:
    """Everything a stage body needs: the manifest, the run directory, and
    input resolution against earlier producers."""

    def __init__(self, manifest: PipelineManifest, run_dir: Path):
        self.manifest = manifest
        self.run_dir = run_dir

    def art(self, name: str) -> Path:
        return self.run_dir / name

    def resolve_corpus(self, stage: str) -> tuple[Path, str | None]:
        """Nearest corpus artifact produced before `stage` in the manifest
        stage list, else the explicit inputs.corpus path."""
        stages = self.manifest.stages
        pos = stages.index(stage)
        for producer, relname in _CORPUS_PRODUCERS:
            if producer in stages[:pos]:
                return self.art(relname), producer
        path = self.manifest.inputs.get("corpus")
        if path:
            return Path(path), None
        raise StageFailure(stage, RuntimeError("no corpus input available"))

    def resolve_benchmark(self, stage: str) -> tuple[Path, str | None]:
        stages = self.manifest.stages
        pos = stages.index(stage)
        if "bench" in stages[:pos]:
            return self.art("benchmark.jsonl"), "bench"
        path = self.manifest.inputs.get("benchmark")
        if path:
            return Path(path), None
        raise StageFailure(stage,
                           RuntimeError("no benchmark input available"))

    def lexicon_path(self) -> Path:
        path = self.manifest.inputs.get("lexicon")
        return Path(path) if path else default_data_path(DEFAULT_LEXICON)

    def taxonomy_path(self) -> Path:
        path = self.manifest.inputs.get("taxonomy")
        return Path(path) if path else default_data_path(DEFAULT_TAXONOMY)

    def make_client(self, stage: str, pcfg: ProtocolConfig):
        """Scripted fixture when configured, HTTP when an endpoint is in
        the environment, otherwise the stage cannot run."""
        responses = self.manifest.inputs.get("responses")
        if responses:
            return ScriptedMockClient.from_file(responses,
                                                model_name=pcfg.model_name)
        if os.environ.get(ENDPOINT_ENV):
            return HttpModelClient(pcfg)
        raise StageFailure(stage, RuntimeError(
            f"no inputs.responses fixture and no {ENDPOINT_ENV} endpoint "
            f"configured"))


def _stage_ingest(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["ingest"]
    docs = []
    in_digests: dict[str, str] = {}
    for entry in cfg["sources"]:
        if isinstance(entry, str):
            entry = {"path": entry}
        path = Path(entry["path"])
        category = entry.get("category", "general")
        in_digests[f"source:{entry['path']}"] = sha256_file(path)
        with open(path, "rb") as fh:
            docs.append(ingest_markdown(fh, category,
                                        provenance="pipeline-ingest",
                                        source_path=str(path)))
    out = ctx.art("corpus_raw.jsonl")
    save_corpus(docs, out)
    counts = {"documents": len(docs),
              "fragments": sum(len(d.fragments) for d in docs)}
    return {"corpus_raw.jsonl": out}, counts, in_digests


def _stage_dedup(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["dedup"]
    src, _ = ctx.resolve_corpus("dedup")
    in_digests = {"corpus": sha256_file(src)}
    docs = load_corpus(src)

    exact = dedup.exact_dedup(docs)
    exact_kept = set(exact.kept_ids)
    survivors = [d for d in docs if d.id in exact_kept]
    params = dedup.DedupParams(k=cfg["k"], bands=cfg["bands"],
                               rows=cfg["rows"],
                               seed=ctx.manifest.stage_seed("dedup"),
                               shingle_width=cfg["shingle_width"])
    approx = dedup.approx_dedup(survivors, cfg["threshold"], params)
    approx_kept = set(approx.kept_ids)

    # Exact drops whose canonical was itself dropped near-exactly re-chain
    # to that canonical's survivor, keeping the partition invariant.
    canonical = dict(approx.canonical_of)
    reasons = dict(approx.drop_reason)
    dropped = list(approx.dropped_ids)
    for doc_id in exact.dropped_ids:
        canon = exact.canonical_of[doc_id]
        canonical[doc_id] = approx.canonical_of.get(canon, canon)
        reasons[doc_id] = exact.drop_reason[doc_id]
        dropped.append(doc_id)
    report = dedup.DedupReport(kept_ids=list(approx.kept_ids),
                               dropped_ids=dropped, drop_reason=reasons,
                               canonical_of=canonical,
                               pair_count_examined=approx.pair_count_examined)
    report.validate([d.id for d in docs])

    out_corpus = ctx.art("corpus_dedup.jsonl")
    out_report = ctx.art("dedup_report.json")
    save_corpus([d for d in survivors if d.id in approx_kept], out_corpus)
    dedup.save_report(report, out_report)
    counts = {"input_documents": len(docs), "kept": len(report.kept_ids),
              "dropped_exact": len(exact.dropped_ids),
              "dropped_near": len(approx.dropped_ids),
              "pairs_examined": report.pair_count_examined}
    return ({"corpus_dedup.jsonl": out_corpus,
             "dedup_report.json": out_report}, counts, in_digests)


def _stage_quality(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["quality"]
    src, _ = ctx.resolve_corpus("quality")
    lex_path = ctx.lexicon_path()
    in_digests = {"corpus": sha256_file(src), "lexicon": sha256_file(lex_path)}
    docs = load_corpus(src)
    lexicon = load_lexicon(lex_path)

    fragments = [f for d in docs for f in d.fragments if f.tokens]
    # The gate model trains on the corpus being gated (there is no clean
    # external reference at this scale). Higher orders memorize each
    # fragment's own contexts, including the junk the gate exists to
    # catch; add-one counts at low order still expose rare-token noise.
    model = quality.train_ngram_lm(fragments, n=cfg["ngram_order"],
                                   smoothing=quality.Laplace(1.0))
    ppl_max = cfg["ppl_max"]
    if ppl_max is None:
        ppl_max = cfg["ppl_multiplier"] * quality.median_perplexity(
            model, fragments)
    thresholds = GateThresholds(ppl_max=float(ppl_max),
                                rel_min=cfg["rel_min"])
    clean, reports = quality.gate_corpus(docs, model, lexicon, thresholds)

    out_corpus = ctx.art("corpus_clean.jsonl")
    out_reports = ctx.art("quality_reports.jsonl")
    save_corpus(clean, out_corpus)
    quality.save_reports(reports, out_reports)
    verdicts: dict[str, int] = {}
    for rep in reports:
        verdicts[rep.verdict.value] = verdicts.get(rep.verdict.value, 0) + 1
    counts = {"input_documents": len(docs), "output_documents": len(clean),
              "fragments_gated": len(reports), "verdicts": verdicts,
              "ppl_max": round(float(ppl_max), 6)}
    return ({"corpus_clean.jsonl": out_corpus,
             "quality_reports.jsonl": out_reports}, counts, in_digests)


def _stage_mix(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["mix"]
    src, _ = ctx.resolve_corpus("mix")
    in_digests = {"corpus": sha256_file(src)}
    docs = load_corpus(src)

    pools: dict[str, list] = {}
    for doc in docs:
        pools.setdefault(doc.category, []).append(doc)
    plan = mixer.plan_mixture(cfg["budget_tokens"], cfg["weights"],
                              seed=ctx.manifest.stage_seed("mix"))
    result = mixer.sample_corpus(pools, plan)

    out_docs = ctx.art("mix_documents.jsonl")
    out_result = ctx.art("mix_result.json")
    out_stats = ctx.art("corpus_stats.csv")
    save_corpus(result.documents, out_docs)
    mixer.save_mix_result(result, out_result)
    with open(out_stats, "w", encoding="utf-8") as fh:
        fh.write(mixer.stats_csv(mixer.corpus_stats(result.documents)))
    splits = {s.name: s.target_count
              for s in mixer.default_splits(ctx.manifest.scale)}
    counts = {"documents": len(result.documents),
              "realized": dict(sorted(result.realized.items())),
              "allocations": dict(sorted(plan.allocations.items())),
              "full_pipeline_split_targets": splits}
    return ({"mix_documents.jsonl": out_docs, "mix_result.json": out_result,
             "corpus_stats.csv": out_stats}, counts, in_digests)


def _stage_bench(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["bench"]
    src, _ = ctx.resolve_corpus("bench")
    lex_path = ctx.lexicon_path()
    tax_path = ctx.taxonomy_path()
    in_digests = {"corpus": sha256_file(src), "lexicon": sha256_file(lex_path),
                  "taxonomy": sha256_file(tax_path)}
    docs = load_corpus(src)
    lexicon = load_lexicon(lex_path)
    taxonomy = benchgen.load_taxonomy(tax_path)
    seed = ctx.manifest.stage_seed("bench")

    target_n = cfg["target_n"]
    top_n = cfg["draft_top_n"] or 3 * target_n
    generator = benchgen.TemplateGenerator(lexicon, seed=seed,
                                           n_options=cfg["n_options"])
    fragments = benchgen.build_fragment_index(docs)
    drafts = []
    undraftable = 0
    for _, frag in benchgen.select_fragments(docs, lexicon, top_n):
        try:
            drafts.append(benchgen.draft_item(frag, generator,
                                              provenance="template"))
        except benchgen.UndraftableFragment:
            undraftable += 1
    verifier = benchgen.RuleVerifier(lexicon)
    validated = [benchgen.validate_item(d, verifier, fragments)
                 for d in drafts]
    passed = [i for i in validated
              if i.status is benchgen.ItemStatus.VALIDATED]
    probe = benchgen.RandomProbe(derive_seed(seed, "probe"))
    retained = benchgen.difficulty_filter(passed, probe,
                                          cfg["probe_attempts"])
    final, warnings = benchgen.finalize_bench(retained, taxonomy, target_n,
                                              fragments, lexicon)
    out = ctx.art("benchmark.jsonl")
    benchgen.save_benchmark(final, out)
    counts = {"fragments_considered": top_n, "undraftable": undraftable,
              "drafted": len(drafts), "validated": len(passed),
              "rejected": len(drafts) - len(passed),
              "after_difficulty": len(retained), "final": len(final),
              "warnings": warnings}
    return {"benchmark.jsonl": out}, counts, in_digests


def _protocol_config(ctx: _RunContext, stage: str,
                     model_name: str) -> ProtocolConfig:
    cfg = ctx.manifest.configs["eval"]
    return ProtocolConfig(model_name=model_name,
                          max_tokens=cfg["max_tokens"],
                          temperature=cfg["temperature"],
                          seed=ctx.manifest.stage_seed(stage),
                          max_retries=cfg["max_retries"],
                          failure_tolerance=cfg["failure_tolerance"])


def _stage_eval(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["eval"]
    bench_path, _ = ctx.resolve_benchmark("eval")
    in_digests = {"benchmark": sha256_file(bench_path)}
    responses = ctx.manifest.inputs.get("responses")
    if responses:
        in_digests["responses"] = sha256_file(Path(responses))
    items = benchgen.load_benchmark(bench_path)
    pcfg = _protocol_config(ctx, "eval", cfg["model_name"])
    client = ctx.make_client("eval", pcfg)
    records = run_eval(items, client, pcfg)
    report = accuracy_report(records, items, pcfg.digest())

    out_records = ctx.art("eval_records.jsonl")
    out_report = ctx.art("eval_report.json")
    save_records(records, out_records)
    save_report(report, out_report)
    counts = {"n_items": report.n_items, "n_correct": report.n_correct,
              "accuracy": report.accuracy,
              "abstains": sum(1 for r in records
                              if r.extracted_choice is None)}
    return ({"eval_records.jsonl": out_records,
             "eval_report.json": out_report}, counts, in_digests)


def _stage_rag(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["rag"]
    bench_path, _ = ctx.resolve_benchmark("rag")
    corpus_path, _ = ctx.resolve_corpus("rag")
    in_digests = {"benchmark": sha256_file(bench_path),
                  "corpus": sha256_file(corpus_path)}
    responses = ctx.manifest.inputs.get("responses")
    if responses:
        in_digests["responses"] = sha256_file(Path(responses))
    items = benchgen.load_benchmark(bench_path)
    docs = load_corpus(corpus_path)

    provider = ragloop.FeatureHashProvider(
        dims=cfg["dims"], seed=ctx.manifest.stage_seed("rag"))
    index = ragloop.build_index(docs, provider)
    fragments = ragloop.fragment_map(docs)
    pcfg = _protocol_config(ctx, "rag", cfg["model_name"])
    client = ctx.make_client("rag", pcfg)
    records, report = ragloop.rag_eval(items, index, provider, client, pcfg,
                                       k=cfg["top_k"],
                                       token_budget=cfg["context_budget"],
                                       fragments=fragments)

    out_index = ctx.art("rag_index.idx")
    out_records = ctx.art("rag_records.jsonl")
    out_report = ctx.art("rag_report.json")
    ragloop.save_index(index, out_index)
    save_records(records, out_records)
    save_report(report, out_report)
    counts = {"index_entries": len(index), "n_items": report.n_items,
              "accuracy": report.accuracy}
    return ({"rag_index.idx": out_index, "rag_records.jsonl": out_records,
             "rag_report.json": out_report}, counts, in_digests)


def _stage_rlvr(ctx: _RunContext) -> tuple[dict[str, Path], dict, dict]:
    cfg = ctx.manifest.configs["rlvr"]
    in_digests: dict[str, str] = {}
    task_path = ctx.manifest.inputs.get("task")
    if task_path:
        in_digests["task"] = sha256_file(Path(task_path))
        task = rlvr.load_task(task_path)
    else:
        task = rlvr.make_demo_task(cfg["kind"])
    rcfg = rlvr.RlvrConfig(n_samples_per_prompt=cfg["n_samples"],
                           kl_coefficient=cfg["beta"],
                           learning_rate=cfg["learning_rate"],
                           batch_prompts=cfg["batch_prompts"],
                           iterations=cfg["iterations"],
                           temperature=cfg["temperature"],
                           seed=ctx.manifest.stage_seed("rlvr"))
    trace = rlvr.train_rlvr(task, rcfg, init=cfg["init"])

    collapsed = None
    if len(trace.iterations) >= 40:
        collapsed = rlvr.detect_collapse(trace)
    summary = {
        "iterations": len(trace.iterations),
        "final_mean_reward": trace.mean_reward[-1],
        "final_val_accuracy": trace.val_accuracy[-1],
        "final_entropy": trace.entropy[-1],
        "final_mean_length": trace.mean_length[-1],
        "collapsed": collapsed,
    }
    out_trace = ctx.art("rlvr_trace.csv")
    out_summary = ctx.art("rlvr_summary.json")
    rlvr.save_trace(trace, out_trace)
    with open(out_summary, "w", encoding="utf-8") as fh:
        fh.write(stable_json_dumps(summary))
        fh.write("\n")
    return ({"rlvr_trace.csv": out_trace, "rlvr_summary.json": out_summary},
            dict(summary), in_digests)


_STAGE_BODIES = {
    "ingest": _stage_ingest,
    "dedup": _stage_dedup,
    "quality": _stage_quality,
    "mix": _stage_mix,
    "bench": _stage_bench,
    "eval": _stage_eval,
    "rag": _stage_rag,
    "rlvr": _stage_rlvr,
}


def _marker_path(run_dir: Path, stage: str) -> Path:
    return run_dir / f".stage_{stage}.json"


def _stage_config_digest(manifest: PipelineManifest, stage: str) -> str:
    payload = {"config": manifest.configs[stage], "seed": manifest.seed,
               "scale": manifest.scale, "tool_version": __version__}
    return sha256_hex(stable_json_dumps(payload).encode("utf-8"))[:16]


def _collect_input_digests(ctx: _RunContext, stage: str) -> dict[str, str]:
    """Digests of everything the stage will read, for skip decisions.

    Mirrors each stage body's reads; missing files surface here as
    StageFailure before the body runs.
    """
    manifest = ctx.manifest
    digests: dict[str, str] = {}
    try:
        if stage == "ingest":
            for entry in manifest.configs["ingest"]["sources"]:
                path = entry if isinstance(entry, str) else entry["path"]
                digests[f"source:{path}"] = sha256_file(Path(path))
        if stage in ("dedup", "quality", "mix", "bench", "rag"):
            src, _ = ctx.resolve_corpus(stage)
            digests["corpus"] = sha256_file(src)
        if stage in ("quality", "bench"):
            digests["lexicon"] = sha256_file(ctx.lexicon_path())
        if stage == "bench":
            digests["taxonomy"] = sha256_file(ctx.taxonomy_path())
        if stage in ("eval", "rag"):
            bench_path, _ = ctx.resolve_benchmark(stage)
            digests["benchmark"] = sha256_file(bench_path)
            responses = manifest.inputs.get("responses")
            if responses:
                digests["responses"] = sha256_file(Path(responses))
        if stage == "rlvr" and manifest.inputs.get("task"):
            digests["task"] = sha256_file(Path(manifest.inputs["task"]))
    except OSError as exc:
        raise StageFailure(stage, exc) from exc
    return digests


def _can_skip(run_dir: Path, stage: str, config_digest: str,
              in_digests: Mapping[str, str]) -> dict | None:
    """Parse the stage marker and check it against current inputs; returns
    the marker when the stage's previous outputs are still valid."""
    marker_file = _marker_path(run_dir, stage)
    try:
        with open(marker_file, "r", encoding="utf-8") as fh:
            marker = json.load(fh)
    except (OSError, json.JSONDecodeError):
        return None
    if not isinstance(marker, dict):
        return None
    if marker.get("config_digest") != config_digest:
        return None
    if marker.get("inputs") != dict(in_digests):
        return None
    outputs = marker.get("outputs")
    if not isinstance(outputs, dict) or set(outputs) != set(ARTIFACTS[stage]):
        return None
    for relname, digest in outputs.items():
        path = run_dir / relname
        try:
            if sha256_file(path) != digest:
                return None
        except OSError:
            return None
    return marker


def run_pipeline(manifest: PipelineManifest,
                 stages: Sequence[str] | None = None,
                 run_dir: str | os.PathLike | None = None) -> RunManifest:
    """Execute the manifest's stages in order inside the run directory.

    Completed stages whose config, inputs, and outputs all match their
    marker are skipped. A stage failure is recorded, blocks every later
    stage that depends on its outputs, and is re-raised once independent
    stages have run and the run manifest is written.
    """
    if stages is None:
        selected = list(manifest.stages)
    else:
        unknown = [s for s in stages if s not in manifest.stages]
        if unknown:
            raise ValueError(f"stages not in manifest: {unknown}")
        selected = [s for s in manifest.stages if s in set(stages)]

    out_dir = Path(run_dir) if run_dir is not None else Path(manifest.run_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLocked(f"{out_dir} is locked by another run "
                        f"(remove {lock} if that run is dead)") from None
    with os.fdopen(fd, "w") as fh:
        fh.write(f"pid {os.getpid()}\n")

    ctx = _RunContext(manifest, out_dir)
    run = RunManifest(manifest_digest=manifest.digest(), seed=manifest.seed,
                      started_at=_now())
    failure: StageFailure | None = None
    failed_stages: set[str] = set()
    reran: set[str] = set()

    try:
        with open(out_dir / TRAINING_REFERENCE_NAME, "w",
                  encoding="utf-8") as fh:
            fh.write(stable_json_dumps(TRAINING_REFERENCE))
            fh.write("\n")

        for stage in selected:
            record = StageRun(name=stage, status="completed",
                              started_at=_now())
            upstream = _producers_of(ctx, stage)
            if upstream & failed_stages:
                record.status = "blocked"
                record.counts = {"blocked_on": sorted(upstream
                                                      & failed_stages)}
                record.finished_at = _now()
                run.stages.append(record)
                failed_stages.add(stage)
                continue
            try:
                config_digest = _stage_config_digest(manifest, stage)
                in_digests = _collect_input_digests(ctx, stage)
                marker = None
                if not upstream & reran:
                    marker = _can_skip(out_dir, stage, config_digest,
                                       in_digests)
                if marker is not None:
                    record.status = "skipped"
                    record.inputs = dict(marker["inputs"])
                    record.outputs = dict(marker["outputs"])
                    record.counts = marker.get("counts", {})
                else:
                    outputs, counts, body_inputs = _STAGE_BODIES[stage](ctx)
                    in_digests.update(body_inputs)
                    record.inputs = in_digests
                    record.outputs = {rel: sha256_file(path)
                                      for rel, path in outputs.items()}
                    record.counts = counts
                    marker_payload = {"stage": stage,
                                      "config_digest": config_digest,
                                      "inputs": record.inputs,
                                      "outputs": record.outputs,
                                      "counts": record.counts}
                    with open(_marker_path(out_dir, stage), "w",
                              encoding="utf-8") as fh:
                        fh.write(stable_json_dumps(marker_payload))
                        fh.write("\n")
                    reran.add(stage)
            except StageFailure as exc:
                record.status = "failed"
                record.counts = {"error": str(exc.cause)}
                failed_stages.add(stage)
                if failure is None:
                    failure = exc
            except Exception as exc:  # noqa: BLE001 - recorded, then re-raised
                record.status = "failed"
                record.counts = {"error": f"{type(exc).__name__}: {exc}"}
                failed_stages.add(stage)
                if failure is None:
                    failure = StageFailure(stage, exc)
            record.finished_at = _now()
            run.stages.append(record)

        run.finished_at = _now()
        save_run_manifest(run, out_dir / RUN_MANIFEST_NAME)
    finally:
        lock.unlink(missing_ok=True)

    if failure is not None:
        raise failure
    return run


def _producers_of(ctx: _RunContext, stage: str) -> set[str]:
    """Stages (from the manifest list) whose outputs this stage reads."""
    producers: set[str] = set()
    stages = ctx.manifest.stages
    pos = stages.index(stage)
    if stage in ("dedup", "quality", "mix", "bench", "rag"):
        for producer, _ in _CORPUS_PRODUCERS:
            if producer in stages[:pos]:
                producers.add(producer)
                break
    if stage in ("eval", "rag") and "bench" in stages[:pos]:
        producers.add("bench")
    return producers
