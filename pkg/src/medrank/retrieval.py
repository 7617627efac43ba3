"""Entailment-based retrieval of supporting QA pairs.

For a query question, every corpus question is scored with the RQE provider;
pairs at or above the confidence threshold T are kept and the top N by score
are returned (ties broken by corpus order). When nothing clears the
threshold the single best-scoring pair is returned anyway, so retrieval
never comes back empty.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import QAPair
from .errors import SchemaError
from .providers import Provider, RqeResult


@dataclass(frozen=True)
class RetrievalConfig:
    """Top-N cut and confidence threshold; defaults follow the best setting."""

    N: int = 3
    T: float = 0.7
    # Score (corpus FAQ, query CHQ) instead of (CHQ, FAQ).
    swap_direction: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise SchemaError("retrieval N must be >= 1")
        if not 0.0 <= self.T <= 1.0:
            raise SchemaError("retrieval T must be in [0, 1]")


@dataclass(frozen=True)
class EntailedCandidate:
    """A retrieved corpus pair with its entailment score and embedding."""

    pair: QAPair
    score: float
    embedding: np.ndarray


class EntailmentIndex:
    """Corpus pairs (in file order) bound to an RQE provider."""

    def __init__(self, pairs: list[QAPair], provider: Provider):
        if not pairs:
            raise SchemaError("cannot build a retrieval index over an empty corpus")
        self.pairs = list(pairs)
        self.provider = provider

    def _score(self, query: str, pair: QAPair, config: RetrievalConfig) -> RqeResult:
        if config.swap_direction:
            return self.provider.rqe(pair.question_text, query)
        return self.provider.rqe(query, pair.question_text)

    def scores(self, query: str, config: RetrievalConfig) -> np.ndarray:
        return np.array(
            [self._score(query, pair, config).score for pair in self.pairs]
        )


def _select(scores: np.ndarray, config: RetrievalConfig, fallback: bool) -> list[int]:
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = [i for i in order if scores[i] >= config.T][: config.N]
    if not kept and fallback:
        kept = [order[0]]
    return kept


def retrieve(
    index: EntailmentIndex,
    query: str,
    config: RetrievalConfig,
    fallback: bool = True,
) -> list[EntailedCandidate]:
    """Return up to N entailed pairs scoring >= T, best first.

    Ties are broken by corpus order. With ``fallback`` (the default), the
    single highest-scoring pair is returned when nothing clears T, so the
    result is never empty; without it the result may be empty and the caller
    zero-fills downstream features.
    """
    scores = index.scores(query, config)
    results = []
    for i in _select(scores, config, fallback):
        result = index._score(query, index.pairs[i], config)
        results.append(
            EntailedCandidate(
                pair=index.pairs[i], score=result.score, embedding=result.embedding
            )
        )
    return results


def coverage(
    index: EntailmentIndex, queries: list[str], config: RetrievalConfig
) -> float:
    """Fraction of queries with at least one pair scoring >= T (no fallback)."""
    if not queries:
        return 0.0
    covered = sum(
        1 for query in queries if bool(np.any(index.scores(query, config) >= config.T))
    )
    return covered / len(queries)


# ---------------------------------------------------------------------------
# Optional retrieval cache: query_id -> [{pair_id, score}] as JSONL
# ---------------------------------------------------------------------------


def build_cache(
    index: EntailmentIndex, queries: dict[str, str], config: RetrievalConfig
) -> dict[str, list[dict]]:
    """Score every query against the corpus once; values sorted best-first."""
    cache: dict[str, list[dict]] = {}
    for query_id, query in queries.items():
        scores = index.scores(query, config)
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        cache[query_id] = [
            {"pair_id": index.pairs[i].pair_id, "score": float(scores[i])}
            for i in order
        ]
    return cache


def save_cache(cache: dict[str, list[dict]], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for query_id in cache:
            record = {"query_id": query_id, "candidates": cache[query_id]}
            handle.write(json.dumps(record, sort_keys=True) + "\n")


def load_cache(path: str | Path) -> dict[str, list[dict]]:
    cache: dict[str, list[dict]] = {}
    path = Path(path)
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            if "query_id" not in record or "candidates" not in record:
                raise SchemaError(f"{path}:{lineno}: missing query_id or candidates")
            cache[record["query_id"]] = record["candidates"]
    return cache


def retrieve_cached(
    index: EntailmentIndex,
    query: str,
    query_id: str,
    cache: dict[str, list[dict]],
    config: RetrievalConfig,
) -> list[EntailedCandidate]:
    """Apply the threshold/top-N/fallback rule to cached scores.

    Embeddings are recomputed from the provider for the selected pairs only.
    """
    entries = cache.get(query_id)
    if entries is None:
        return retrieve(index, query, config)
    by_id = {pair.pair_id: pair for pair in index.pairs}
    kept = [e for e in entries if e["score"] >= config.T][: config.N]
    if not kept:
        kept = entries[:1]
    results = []
    for entry in kept:
        pair = by_id.get(entry["pair_id"])
        if pair is None:
            raise SchemaError(f"cache references unknown pair_id {entry['pair_id']!r}")
        result = index._score(query, pair, config)
        results.append(
            EntailedCandidate(pair=pair, score=entry["score"], embedding=result.embedding)
        )
    return results
