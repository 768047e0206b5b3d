"""domainforge: deterministic tooling for domain-corpus LLM workflows.

Covers corpus curation (ingestion, dedup, quality gating), token-budgeted
mixing, benchmark construction, multiple-choice evaluation, retrieval-loop
assessment, and a desk-scale verifiable-reward RL simulator, wired together
by a reproducible pipeline runner.
"""

__version__ = "0.1.0"
