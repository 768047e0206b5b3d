"""Command-line front end: one subcommand per stage plus whole-pipeline
validation and execution.

Exit codes: 0 success, 1 validation failure (bad arguments, manifest
violations, precondition errors), 2 stage or transport failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__, benchgen, dedup, mixer, quality, ragloop, rlvr
from ._util import derive_seed, stable_json_dumps
from .corpus import ingest_markdown, load_corpus, save_corpus
from .errors import DomainforgeError, ManifestParseError, StageFailure
from .harness import (HttpModelClient, ProtocolConfig, RunReport,
                      ScriptedMockClient, accuracy_report, compare_runs,
                      run_eval, save_records, save_report)
from .pipeline import (DEFAULT_LEXICON, DEFAULT_TAXONOMY, TRAINING_REFERENCE,
                       default_data_path, load_manifest, run_pipeline,
                       validate_config)


def _lexicon_path(arg: str | None) -> Path:
    return Path(arg) if arg else default_data_path(DEFAULT_LEXICON)


def _taxonomy_path(arg: str | None) -> Path:
    return Path(arg) if arg else default_data_path(DEFAULT_TAXONOMY)


def _client(args, pcfg: ProtocolConfig):
    if getattr(args, "responses", None):
        return ScriptedMockClient.from_file(args.responses,
                                            model_name=pcfg.model_name)
    return HttpModelClient(pcfg)


# --- subcommand bodies -------------------------------------------------------

def _cmd_ingest(args) -> int:
    docs = []
    for src in args.sources:
        with open(src, "rb") as fh:
            docs.append(ingest_markdown(fh, args.category,
                                        provenance=args.provenance,
                                        source_path=src))
    save_corpus(docs, args.out)
    print(f"ingested {len(docs)} documents "
          f"({sum(len(d.fragments) for d in docs)} fragments) -> {args.out}")
    return 0


def _cmd_dedup(args) -> int:
    docs = load_corpus(args.corpus)
    exact = dedup.exact_dedup(docs)
    survivors = [d for d in docs if d.id in set(exact.kept_ids)]
    if args.exact_only:
        report = exact
        kept = survivors
    else:
        params = dedup.DedupParams(k=args.k, bands=args.bands, rows=args.rows,
                                   seed=args.seed,
                                   shingle_width=args.shingle_width)
        approx = dedup.approx_dedup(survivors, args.threshold, params)
        kept = [d for d in survivors if d.id in set(approx.kept_ids)]
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
    save_corpus(kept, args.out)
    if args.report:
        dedup.save_report(report, args.report)
    print(f"kept {len(report.kept_ids)} of {len(docs)} documents "
          f"({len(report.dropped_ids)} dropped) -> {args.out}")
    return 0


def _cmd_quality(args) -> int:
    docs = load_corpus(args.corpus)
    lexicon = quality.load_lexicon(_lexicon_path(args.lexicon))
    fragments = [f for d in docs for f in d.fragments if f.tokens]
    model = quality.train_ngram_lm(fragments, n=args.ngram_order,
                                   smoothing=quality.Laplace(1.0))
    ppl_max = args.ppl_max
    if ppl_max is None:
        ppl_max = args.ppl_multiplier * quality.median_perplexity(model,
                                                                  fragments)
    thresholds = quality.GateThresholds(ppl_max=float(ppl_max),
                                        rel_min=args.rel_min)
    clean, reports = quality.gate_corpus(docs, model, lexicon, thresholds)
    save_corpus(clean, args.out)
    if args.reports:
        quality.save_reports(reports, args.reports)
    verdicts: dict[str, int] = {}
    for rep in reports:
        verdicts[rep.verdict.value] = verdicts.get(rep.verdict.value, 0) + 1
    print(f"kept {len(clean)} of {len(docs)} documents, fragment verdicts "
          f"{stable_json_dumps(verdicts)} (ppl_max {float(ppl_max):.3f}) "
          f"-> {args.out}")
    return 0


def _parse_weights(pairs: list[str]) -> dict[str, float]:
    weights: dict[str, float] = {}
    for pair in pairs:
        name, sep, value = pair.partition("=")
        if not sep or not name:
            raise ValueError(f"--weight needs category=number, got {pair!r}")
        weights[name] = float(value)
    return weights


def _cmd_mix(args) -> int:
    if args.print_splits:
        splits = {s.name: s.target_count
                  for s in mixer.default_splits(args.scale)}
        print(stable_json_dumps(splits))
        return 0
    if args.corpus is None or args.out is None or args.budget is None:
        raise ValueError("mix needs corpus, out, and --budget "
                         "(or --print-splits)")
    docs = load_corpus(args.corpus)
    pools: dict[str, list] = {}
    for doc in docs:
        pools.setdefault(doc.category, []).append(doc)
    weights = _parse_weights(args.weight) if args.weight else {
        cat: 1.0 for cat in sorted(pools)}
    budget = int(round(args.budget * args.scale))
    plan = mixer.plan_mixture(budget, weights, seed=args.seed)
    result = mixer.sample_corpus(pools, plan)
    save_corpus(result.documents, args.out)
    if args.result:
        mixer.save_mix_result(result, args.result)
    print(f"sampled {len(result.documents)} documents, realized tokens "
          f"{stable_json_dumps(dict(sorted(result.realized.items())))} "
          f"-> {args.out}")
    return 0


def _cmd_stats(args) -> int:
    docs = load_corpus(args.corpus)
    csv_text = mixer.stats_csv(mixer.corpus_stats(docs))
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(csv_text)
        print(f"stats -> {args.csv}")
    else:
        sys.stdout.write(csv_text)
    return 0


def _cmd_bench(args) -> int:
    docs = load_corpus(args.corpus)
    lexicon = quality.load_lexicon(_lexicon_path(args.lexicon))
    taxonomy = benchgen.load_taxonomy(_taxonomy_path(args.taxonomy))
    generator = benchgen.TemplateGenerator(lexicon, seed=args.seed,
                                           n_options=args.n_options)
    fragments = benchgen.build_fragment_index(docs)
    top_n = args.draft_top_n or 3 * args.target_n
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
    probe = benchgen.RandomProbe(derive_seed(args.seed, "probe"))
    retained = benchgen.difficulty_filter(passed, probe, args.probe_attempts)
    final, warnings = benchgen.finalize_bench(retained, taxonomy,
                                              args.target_n, fragments,
                                              lexicon)
    benchgen.save_benchmark(final, args.out)
    if args.export_review:
        benchgen.export_review(final, args.export_review)
    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(f"benchmark: {len(final)} items "
          f"({len(drafts)} drafted, {undraftable} undraftable, "
          f"{len(passed)} validated, {len(retained)} past difficulty) "
          f"-> {args.out}")
    return 0


def _cmd_review(args) -> int:
    items = benchgen.load_benchmark(args.benchmark)
    if args.action == "export":
        benchgen.export_review(items, args.out)
        print(f"review sheet for {len(items)} items -> {args.out}")
    else:
        reviewed = benchgen.apply_review(items, args.review)
        benchgen.save_benchmark(reviewed, args.out)
        print(f"applied review: {len(items)} -> {len(reviewed)} items "
              f"-> {args.out}")
    return 0


def _protocol(args) -> ProtocolConfig:
    return ProtocolConfig(model_name=args.model, max_tokens=args.max_tokens,
                          temperature=args.temperature, seed=args.seed,
                          max_retries=args.max_retries,
                          failure_tolerance=args.failure_tolerance)


def _cmd_eval(args) -> int:
    items = benchgen.load_benchmark(args.benchmark)
    pcfg = _protocol(args)
    client = _client(args, pcfg)
    records = run_eval(items, client, pcfg)
    report = accuracy_report(records, items, pcfg.digest())
    if args.records:
        save_records(records, args.records)
    if args.report:
        save_report(report, args.report)
    print(f"{report.model_name}: {report.n_correct}/{report.n_items} "
          f"correct, accuracy {report.accuracy:.2f}%")
    return 0


def _cmd_rag(args) -> int:
    items = benchgen.load_benchmark(args.benchmark)
    docs = load_corpus(args.corpus)
    provider = ragloop.FeatureHashProvider(dims=args.dims, seed=args.seed)
    index = ragloop.build_index(docs, provider)
    fragments = ragloop.fragment_map(docs)
    pcfg = _protocol(args)
    client = _client(args, pcfg)
    records, report = ragloop.rag_eval(items, index, provider, client, pcfg,
                                       k=args.top_k,
                                       token_budget=args.context_budget,
                                       fragments=fragments)
    if args.index:
        ragloop.save_index(index, args.index)
    if args.records:
        save_records(records, args.records)
    if args.report:
        save_report(report, args.report)
    print(f"{report.model_name} (rag, k={args.top_k}): "
          f"{report.n_correct}/{report.n_items} correct, "
          f"accuracy {report.accuracy:.2f}%")
    return 0


def _cmd_rlvr_sim(args) -> int:
    if args.task:
        task = rlvr.load_task(args.task)
    else:
        task = rlvr.make_demo_task(args.kind)
    config = rlvr.RlvrConfig(n_samples_per_prompt=args.n_samples,
                             kl_coefficient=args.beta,
                             learning_rate=args.lr,
                             batch_prompts=args.batch_prompts,
                             iterations=args.iterations,
                             temperature=args.temperature,
                             seed=args.seed)
    trace = rlvr.train_rlvr(task, config, init=args.init)
    if args.trace:
        rlvr.save_trace(trace, args.trace)
    collapsed = (rlvr.detect_collapse(trace)
                 if len(trace.iterations) >= 40 else None)
    print(f"reward {trace.mean_reward[0]:.3f} -> {trace.mean_reward[-1]:.3f}"
          f", val accuracy {trace.val_accuracy[-1]:.3f}, entropy "
          f"{trace.entropy[0]:.3f} -> {trace.entropy[-1]:.3f}, "
          f"length {trace.mean_length[0]:.2f} -> {trace.mean_length[-1]:.2f}"
          f", collapsed {collapsed}")
    return 0


def _cmd_validate(args) -> int:
    manifest, violations = validate_config(args.manifest)
    if manifest is None:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return 1
    print(f"manifest valid: {len(manifest.stages)} stages, "
          f"seed {manifest.seed}, digest {manifest.digest()[:16]}")
    print(stable_json_dumps(TRAINING_REFERENCE))
    return 0


def _cmd_run(args) -> int:
    manifest = load_manifest(args.manifest)
    stages = args.stages.split(",") if args.stages else None
    run = run_pipeline(manifest, stages=stages, run_dir=args.run_dir)
    for stage in run.stages:
        print(f"{stage.name}: {stage.status}")
    print(f"run digest {run.run_digest()[:16]}")
    return 0


def _cmd_compare(args) -> int:
    reports = []
    for path in args.reports:
        with open(path, "r", encoding="utf-8") as fh:
            reports.append(RunReport.from_record(json.load(fh)))
    table = compare_runs(reports, include_average=args.average,
                         precision=args.precision)
    sys.stdout.write(table.to_csv() if args.csv else table.to_text())
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="domainforge",
        description="Deterministic corpus curation, benchmark construction, "
                    "evaluation, and RLVR simulation toolkit.")
    parser.add_argument("--version", action="version",
                        version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse Markdown files into a corpus")
    p.add_argument("out", help="output corpus JSONL")
    p.add_argument("sources", nargs="+", help="Markdown files")
    p.add_argument("--category", default="general")
    p.add_argument("--provenance", default="cli-ingest")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("dedup", help="drop exact and near duplicates")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--report", help="write the drop report JSON here")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--k", type=int, default=256)
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--shingle-width", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--exact-only", action="store_true")
    p.set_defaults(func=_cmd_dedup)

    p = sub.add_parser("quality", help="rule, perplexity, relevance gating")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--reports", help="write per-fragment verdicts here")
    p.add_argument("--lexicon", help="term/weight TSV (bundled default)")
    p.add_argument("--ppl-max", type=float, default=None)
    p.add_argument("--ppl-multiplier", type=float, default=4.0,
                   help="threshold = multiplier * median perplexity "
                        "when --ppl-max is not given")
    p.add_argument("--rel-min", type=float, default=0.02)
    p.add_argument("--ngram-order", type=int, default=1)
    p.set_defaults(func=_cmd_quality)

    p = sub.add_parser("mix", help="token-budgeted category mixing")
    p.add_argument("corpus", nargs="?")
    p.add_argument("out", nargs="?")
    p.add_argument("--budget", type=int, help="token budget before --scale")
    p.add_argument("--weight", action="append", metavar="CATEGORY=W",
                   help="repeatable; default: equal weights over "
                        "categories present")
    p.add_argument("--scale", type=float, default=1.0,
                   help="global multiplier applied to all budgets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--result", help="write the mix plan/result JSON here")
    p.add_argument("--print-splits", action="store_true",
                   help="print post-training split targets at --scale "
                        "and exit")
    p.set_defaults(func=_cmd_mix)

    p = sub.add_parser("stats", help="category share table (CSV)")
    p.add_argument("corpus")
    p.add_argument("--csv", help="write here instead of stdout")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser("bench", help="draft, validate, and finalize a "
                                     "benchmark")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--lexicon")
    p.add_argument("--taxonomy")
    p.add_argument("--target-n", type=int, default=40)
    p.add_argument("--draft-top-n", type=int, default=None)
    p.add_argument("--n-options", type=int, default=4)
    p.add_argument("--probe-attempts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--export-review", help="also write a review CSV here")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("review", help="export or apply an expert review "
                                      "sheet")
    p.add_argument("action", choices=("export", "apply"))
    p.add_argument("benchmark")
    p.add_argument("out")
    p.add_argument("--review", help="review CSV (apply only)")
    p.set_defaults(func=_cmd_review)

    def add_protocol_args(p):
        p.add_argument("--model", default="mock")
        p.add_argument("--responses",
                       help="scripted response fixture JSON; without it "
                            "the HTTP endpoint from the environment is "
                            "used")
        p.add_argument("--max-tokens", type=int, default=64)
        p.add_argument("--temperature", type=float, default=0.0)
        p.add_argument("--max-retries", type=int, default=2)
        p.add_argument("--failure-tolerance", type=float, default=0.10)
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("eval", help="multiple-choice evaluation run")
    p.add_argument("benchmark")
    add_protocol_args(p)
    p.add_argument("--records", help="write per-item records JSONL here")
    p.add_argument("--report", help="write the accuracy report JSON here")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("rag", help="closed-loop retrieval-augmented "
                                   "evaluation")
    p.add_argument("benchmark")
    p.add_argument("corpus")
    add_protocol_args(p)
    p.add_argument("--dims", type=int, default=ragloop.DEFAULT_DIMS)
    p.add_argument("--top-k", type=int, default=ragloop.DEFAULT_TOP_K)
    p.add_argument("--context-budget", type=int,
                   default=ragloop.DEFAULT_CONTEXT_BUDGET)
    p.add_argument("--index", help="write the vector index here")
    p.add_argument("--records")
    p.add_argument("--report")
    p.set_defaults(func=_cmd_rag)

    p = sub.add_parser("rlvr-sim", help="desk-scale GRPO/RLVR training "
                                        "simulation")
    p.add_argument("--task", help="task JSON; default: bundled demo task")
    p.add_argument("--kind", choices=("path", "shortcut"), default="path")
    p.add_argument("--iterations", type=int, default=300)
    p.add_argument("--beta", type=float, default=0.005)
    p.add_argument("--n-samples", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-prompts", type=int, default=16)
    p.add_argument("--init", choices=sorted(rlvr.INITS),
                   default="cold_start_biased")
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", help="write the metrics trace CSV here")
    p.set_defaults(func=_cmd_rlvr_sim)

    p = sub.add_parser("validate", help="validate a pipeline manifest")
    p.add_argument("manifest")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("run", help="execute a pipeline manifest")
    p.add_argument("manifest")
    p.add_argument("--stages", help="comma-separated subset to run")
    p.add_argument("--run-dir", help="override the manifest run directory")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("compare", help="side-by-side accuracy table")
    p.add_argument("reports", nargs="+", help="accuracy report JSON files")
    p.add_argument("--average", action="store_true")
    p.add_argument("--precision", type=int, default=2)
    p.add_argument("--csv", action="store_true")
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


def entrypoint() -> None:
    try:
        code = main()
    except ManifestParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    except StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 2
    except DomainforgeError as exc:
        # Precondition violations double as ValueError; anything else is
        # an operational failure.
        print(f"error: {exc}", file=sys.stderr)
        code = 1 if isinstance(exc, ValueError) else 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    entrypoint()
