"""Closed-loop retrieval assessment: embed fragments, index, retrieve,
assemble augmented prompts, grade with the eval harness.

The index is a flat exact-scan cosine index; at desk scale exactness is
free and doubles as the oracle for retrieval tests. The default embedding
provider is a deterministic feature hasher, so the whole loop runs with no
network or model dependency.
"""
from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from ._util import derive_seed, hash_text64, splitmix64, stable_json_dumps
from .corpus import Document, Fragment, tokenize
from .errors import (ClientError, DimsMismatch, EmptyIndex, EmptyText,
                     ProviderMismatch, ProviderUnavailable, TransportFailure)
from .benchgen import BenchItem
from .harness import (EvalRecord, ProtocolConfig, RunReport, accuracy_report,
                      extract_choice, render_prompt)

EMBED_ENDPOINT_ENV = "DOMAINFORGE_EMBED_ENDPOINT"
EMBED_TOKEN_ENV = "DOMAINFORGE_EMBED_TOKEN"

DEFAULT_DIMS = 256
DEFAULT_TOP_K = 5
DEFAULT_CONTEXT_BUDGET = 1024

CONTEXT_HEADER = "Use the following source material to answer the question."


def make_ref(doc_id: str, index: int) -> str:
    return f"{doc_id}:{index}"


def split_ref(ref: str) -> tuple[str, int]:
    doc_id, _, idx = ref.rpartition(":")
    return doc_id, int(idx)


def fragment_map(docs: Sequence[Document]) -> dict[str, Fragment]:
    return {make_ref(doc.id, frag.index): frag
            for doc in docs for frag in doc.fragments}


class FeatureHashProvider:
    """Deterministic signed feature-hash embedder.

    Case-folded tokens hash into one of ``dims`` buckets with sign taken
    from the hash's top bit; the count vector is then L2-normalized.
    Identical text always embeds identically.
    """

    def __init__(self, dims: int = DEFAULT_DIMS, seed: int = 0):
        if dims < 2:
            raise ValueError("dims must be >= 2")
        self.dims = dims
        self.seed = seed
        self.key = splitmix64(derive_seed(seed, "feature-hash"))
        self.provider_id = f"feature-hash-v1/d{dims}/s{seed}"

    def _token_hashes(self, tokens: Sequence[str]) -> np.ndarray:
        vals = np.fromiter(
            (splitmix64(hash_text64(t.casefold()) ^ self.key)
             for t in tokens),
            dtype=np.uint64, count=len(tokens))
        return vals

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise EmptyText("embedding input has no tokens")
        hashes = self._token_hashes(tokens)
        counts = kernels.signed_counts(hashes, self.dims)
        norm = float(np.sqrt(np.dot(counts, counts)))
        if norm == 0.0:
            # Signed contributions can cancel exactly; fall back to a unit
            # vector in the first token's bucket so the result stays usable.
            counts = np.zeros(self.dims, dtype=np.float64)
            counts[int(hashes[0] % np.uint64(self.dims))] = 1.0
            norm = 1.0
        return (counts / norm).astype(np.float32)


class HttpEmbeddingProvider:
    """POSTs {texts: [...]} and reads {vectors: [[...]]}; endpoint and
    bearer token come from environment variables. Vectors are normalized
    on receipt."""

    def __init__(self, provider_id: str, dims: int,
                 endpoint: str | None = None, token: str | None = None):
        self.provider_id = provider_id
        self.dims = dims
        self.endpoint = endpoint or os.environ.get(EMBED_ENDPOINT_ENV, "")
        self.token = token or os.environ.get(EMBED_TOKEN_ENV, "")
        if not self.endpoint:
            raise ProviderUnavailable(f"no endpoint; set {EMBED_ENDPOINT_ENV}")

    def embed(self, text: str) -> np.ndarray:
        import requests

        if not tokenize(text):
            raise EmptyText("embedding input has no tokens")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            resp = requests.post(self.endpoint, json={"texts": [text]},
                                 headers=headers, timeout=60)
            resp.raise_for_status()
            vec = np.asarray(resp.json()["vectors"][0], dtype=np.float64)
        except Exception as exc:
            raise ProviderUnavailable(str(exc)) from exc
        if vec.shape != (self.dims,):
            raise DimsMismatch(
                f"provider returned {vec.shape}, expected ({self.dims},)")
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            raise ProviderUnavailable("provider returned a zero vector")
        return (vec / norm).astype(np.float32)


@dataclass
class VectorIndex:
    provider_id: str
    dims: int
    refs: list[str]
    matrix: np.ndarray = field(repr=False)  # float32, shape (count, dims)

    def __post_init__(self):
        if self.matrix.shape != (len(self.refs), self.dims):
            raise DimsMismatch(
                f"matrix {self.matrix.shape} vs {len(self.refs)} refs x "
                f"{self.dims} dims")
        if len(set(self.refs)) != len(self.refs):
            raise ValueError("fragment refs must be unique")

    def __len__(self) -> int:
        return len(self.refs)


def build_index(docs: Sequence[Document], provider) -> VectorIndex:
    """One entry per fragment, in corpus order."""
    refs: list[str] = []
    rows: list[np.ndarray] = []
    for doc in docs:
        for frag in doc.fragments:
            vec = provider.embed(frag.text)
            if vec.shape != (provider.dims,):
                raise DimsMismatch(
                    f"vector {vec.shape} from provider of dims "
                    f"{provider.dims}")
            refs.append(make_ref(doc.id, frag.index))
            rows.append(vec)
    if not rows:
        raise EmptyIndex("corpus has no fragments to index")
    return VectorIndex(provider_id=provider.provider_id, dims=provider.dims,
                       refs=refs, matrix=np.stack(rows).astype(np.float32))


def save_index(index: VectorIndex, path) -> None:
    """JSON header line, then little-endian float32 vectors in entry order."""
    header = {
        "provider_id": index.provider_id,
        "dims": index.dims,
        "count": len(index.refs),
        "refs": list(index.refs),
    }
    with open(path, "wb") as fh:
        fh.write(stable_json_dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(index.matrix, dtype="<f4").tobytes())


def load_index(path) -> VectorIndex:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        blob = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    count, dims = header["count"], header["dims"]
    expected = count * dims * 4
    if len(blob) != expected:
        raise DimsMismatch(
            f"index payload is {len(blob)} bytes, expected {expected}")
    matrix = np.frombuffer(blob, dtype="<f4").reshape(count, dims).copy()
    return VectorIndex(provider_id=header["provider_id"], dims=dims,
                       refs=list(header["refs"]), matrix=matrix)


def retrieve(index: VectorIndex, query: str, k: int,
             provider) -> list[tuple[str, float]]:
    """Exact top-k by cosine, descending; ties break on entry order."""
    if len(index) == 0:
        raise EmptyIndex("retrieval over an empty index")
    if k < 1:
        raise ValueError("k must be >= 1")
    if provider.provider_id != index.provider_id:
        raise ProviderMismatch(
            f"index built with {index.provider_id!r}, queried with "
            f"{provider.provider_id!r}")
    qvec = provider.embed(query).astype(np.float64)
    scores = index.matrix.astype(np.float64) @ qvec
    order = np.argsort(-scores, kind="stable")[:k]
    return [(index.refs[i], float(scores[i])) for i in order]


def assemble_context(item: BenchItem, hits: Sequence[tuple[str, float]],
                     fragments: Mapping[str, Fragment],
                     token_budget: int) -> tuple[str, list[str], bool]:
    """Pack whole fragments in score order until the budget stops the next
    one; returns (prompt, included refs, question_only flag)."""
    included: list[str] = []
    parts: list[str] = []
    used = 0
    for ref, _ in hits:
        frag = fragments[ref]
        if used + frag.token_count > token_budget:
            break
        used += frag.token_count
        included.append(ref)
        parts.append(f"[{len(included)}] {frag.text}")
    base = render_prompt(item)
    if not included:
        return base, [], True
    context = CONTEXT_HEADER + "\n\n" + "\n\n".join(parts)
    return context + "\n\n" + base, included, False


def rag_eval(items: Sequence[BenchItem], index: VectorIndex, provider,
             client, config: ProtocolConfig = ProtocolConfig(),
             k: int = DEFAULT_TOP_K,
             token_budget: int = DEFAULT_CONTEXT_BUDGET,
             fragments: Mapping[str, Fragment] | None = None,
             ) -> tuple[list[EvalRecord], RunReport]:
    """Retrieve, assemble, query, grade. Records carry the included
    fragment refs so retrieval hits can be audited offline."""
    if fragments is None:
        raise ValueError("rag_eval needs the ref->fragment mapping")
    records: list[EvalRecord] = []
    failures = 0
    deterministic = bool(getattr(client, "deterministic", False))
    for item in items:
        hits = retrieve(index, item.question, k, provider)
        prompt, included, _ = assemble_context(item, hits, fragments,
                                               token_budget)
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
            context_refs=included,
            error_note=note,
        ))
    if items and failures / len(items) > config.failure_tolerance:
        raise TransportFailure(
            f"{failures} of {len(items)} items failed after retries")
    report = accuracy_report(records, items, config_digest=config.digest())
    return records, report
