"""Pluggable NLI and RQE scorers plus the TF-IDF vectorizer behind them.

Three provider kinds are available, all deterministic under a fixed seed:

* ``toy_hash`` — seeded feature hashing of word unigrams and bigrams into D
  buckets; cosine of bucket vectors gives the scores, a seeded random
  projection of the bucket-vector difference gives the embeddings.
* ``tfidf_cosine`` — cosine similarity of TF-IDF vectors; a cosine s maps to
  NLI probabilities (s, (1-s)/2, (1-s)/2); embeddings are a seeded random
  projection of the concatenated pair of TF-IDF vectors.
* ``precomputed`` — score/embedding lookup from a JSONL file keyed by the
  SHA-256 of the sentence pair.

The hand-rolled vectorizer (rather than an off-the-shelf one) pins the exact
vocabulary-selection rule: top-V terms by document frequency with
lexicographic tie-breaks, and idf(t) = ln((1+N)/(1+df(t))) + 1.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, SchemaError

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)

NLI_LABELS = ("entailment", "neutral", "contradiction")


def tokenize(text: str) -> list[str]:
    """Lowercase and split into alphanumeric word tokens."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# TF-IDF
# ---------------------------------------------------------------------------


@dataclass
class TfidfModel:
    """Fitted vocabulary and idf weights; vocabulary order is fit order."""

    vocabulary: list[str]
    idf: np.ndarray
    V: int
    _index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.idf = np.asarray(self.idf, dtype=np.float64)
        if len(self.vocabulary) != self.idf.shape[0]:
            raise DimensionError("vocabulary and idf lengths differ")
        if np.any(self.idf <= 0):
            raise SchemaError("idf values must be positive")
        self._index = {term: i for i, term in enumerate(self.vocabulary)}


def fit_tfidf(corpus: list[str], V: int = 2000) -> TfidfModel:
    """Fit a TF-IDF model on raw documents.

    The vocabulary keeps the top-V terms by document frequency, breaking ties
    lexicographically; idf(t) = ln((1+N)/(1+df(t))) + 1.
    """
    if not corpus:
        raise SchemaError("cannot fit TF-IDF on an empty corpus")
    if V < 1:
        raise SchemaError("V must be >= 1")
    df: Counter[str] = Counter()
    for document in corpus:
        df.update(set(tokenize(document)))
    terms = sorted(df, key=lambda t: (-df[t], t))[:V]
    n_docs = len(corpus)
    idf = np.array(
        [math.log((1 + n_docs) / (1 + df[t])) + 1.0 for t in terms], dtype=np.float64
    )
    return TfidfModel(vocabulary=terms, idf=idf, V=V)


def tfidf_transform(model: TfidfModel, text: str) -> np.ndarray:
    """Raw term counts times idf, L2-normalized; all-OOV text stays zero."""
    vec = np.zeros(len(model.vocabulary), dtype=np.float64)
    for token in tokenize(text):
        i = model._index.get(token)
        if i is not None:
            vec[i] += 1.0
    vec *= model.idf
    norm = np.linalg.norm(vec)
    if norm > 0:
        vec /= norm
    return vec


def save_tfidf(model: TfidfModel, path: str | Path) -> None:
    payload = {"vocabulary": model.vocabulary, "idf": model.idf.tolist(), "V": model.V}
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_tfidf(path: str | Path) -> TfidfModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("vocabulary", "idf", "V"):
        if key not in payload:
            raise SchemaError(f"{path}: TF-IDF model missing field {key!r}")
    return TfidfModel(
        vocabulary=list(payload["vocabulary"]),
        idf=np.asarray(payload["idf"], dtype=np.float64),
        V=int(payload["V"]),
    )


# ---------------------------------------------------------------------------
# Provider results and configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NliResult:
    """(entailment, neutral, contradiction) probabilities plus an embedding."""

    probs: np.ndarray
    embedding: np.ndarray

    def __post_init__(self):
        if self.probs.shape != (3,):
            raise DimensionError("NLI probs must be a 3-vector")
        if np.any(self.probs < 0) or abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise SchemaError("NLI probs must be non-negative and sum to 1")

    @property
    def entailment(self) -> float:
        return float(self.probs[0])


@dataclass(frozen=True)
class RqeResult:
    """Question-entailment confidence in [0, 1] plus an embedding."""

    score: float
    embedding: np.ndarray

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise SchemaError(f"RQE score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ProviderConfig:
    """Provider selection and determinism knobs.

    ``D`` is the embedding dimension (768 matches the NLI tensor channel
    count); ``vocab_size`` only applies to ``tfidf_cosine``; ``path`` and
    ``fallback_zero`` only to ``precomputed``.
    """

    kind: str = "tfidf_cosine"
    D: int = 768
    seed: int = 0
    vocab_size: int = 4096
    path: str | None = None
    fallback_zero: bool = False
    cache: bool = True

    def __post_init__(self):
        if self.D < 1:
            raise SchemaError("embedding dimension D must be >= 1")
        if self.kind not in ("toy_hash", "tfidf_cosine", "precomputed"):
            raise SchemaError(f"unknown provider kind {self.kind!r}")


def _cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _probs_from_score(score: float) -> np.ndarray:
    score = min(max(score, 0.0), 1.0)
    return np.array([score, (1.0 - score) / 2.0, (1.0 - score) / 2.0])


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


class _Provider:
    """Shared caching and scalar plumbing; subclasses implement _pair()."""

    def __init__(self, config: ProviderConfig):
        self.config = config
        self._memo: dict[tuple[str, str], tuple[float, np.ndarray]] = {}

    def _pair(self, text_a: str, text_b: str) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def _scored(self, text_a: str, text_b: str) -> tuple[float, np.ndarray]:
        key = (text_a, text_b)
        if self.config.cache:
            hit = self._memo.get(key)
            if hit is not None:
                return hit
        score, embedding = self._pair(text_a, text_b)
        result = (score, _frozen(embedding))
        if self.config.cache:
            self._memo[key] = result
        return result

    def nli(self, sentence_a: str, sentence_b: str) -> NliResult:
        score, embedding = self._scored(sentence_a, sentence_b)
        return NliResult(probs=_frozen(_probs_from_score(score)), embedding=embedding)

    def rqe(self, chq: str, faq: str) -> RqeResult:
        score, embedding = self._scored(chq, faq)
        return RqeResult(score=min(max(score, 0.0), 1.0), embedding=embedding)


class ToyHashProvider(_Provider):
    """Seeded feature hashing of unigrams+bigrams; order-sensitive embeddings."""

    def __init__(self, config: ProviderConfig):
        super().__init__(config)
        self._hash_key = config.seed.to_bytes(8, "little", signed=True)
        rng = np.random.default_rng(config.seed)
        self._projection = rng.standard_normal((config.D, config.D)) / math.sqrt(config.D)

    def _bucket(self, feature: str) -> int:
        digest = hashlib.blake2b(
            feature.encode("utf-8"), key=self._hash_key, digest_size=8
        ).digest()
        return int.from_bytes(digest, "little") % self.config.D

    def _vector(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        vec = np.zeros(self.config.D, dtype=np.float64)
        for token in tokens:
            vec[self._bucket(token)] += 1.0
        for first, second in zip(tokens, tokens[1:]):
            vec[self._bucket(first + " " + second)] += 1.0
        return vec

    def _pair(self, text_a: str, text_b: str) -> tuple[float, np.ndarray]:
        u = self._vector(text_a)
        v = self._vector(text_b)
        score = max(0.0, _cosine(u, v))
        embedding = self._projection @ (u - v)
        return score, embedding


class TfidfCosineProvider(_Provider):
    """Cosine of TF-IDF vectors; embeddings project the concatenated pair."""

    def __init__(self, config: ProviderConfig, model: TfidfModel):
        super().__init__(config)
        self.model = model
        width = 2 * len(model.vocabulary)
        rng = np.random.default_rng(config.seed)
        self._projection = rng.standard_normal((config.D, width)) / math.sqrt(width)

    def _pair(self, text_a: str, text_b: str) -> tuple[float, np.ndarray]:
        u = tfidf_transform(self.model, text_a)
        v = tfidf_transform(self.model, text_b)
        score = min(max(float(np.dot(u, v)), 0.0), 1.0)
        embedding = self._projection @ np.concatenate([u, v])
        return score, embedding


def pair_key(text_a: str, text_b: str) -> str:
    """Lookup key for precomputed scores: SHA-256 hex of the joined pair."""
    return hashlib.sha256((text_a + "\x1f" + text_b).encode("utf-8")).hexdigest()


def load_precomputed(path: str | Path) -> dict[str, dict]:
    """Load precomputed records {key, score, probs?, embedding} from JSONL."""
    records: dict[str, dict] = {}
    path = Path(path)
    with path.open(encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            for key in ("key", "score", "embedding"):
                if key not in record:
                    raise SchemaError(f"{path}:{lineno}: missing field {key!r}")
            records[record["key"]] = record
    return records


class PrecomputedProvider(_Provider):
    """Serves scores and embeddings from a precomputed lookup table."""

    def __init__(self, config: ProviderConfig, records: dict[str, dict] | None = None):
        super().__init__(config)
        if records is None:
            if config.path is None:
                raise SchemaError("precomputed provider needs a path or records")
            records = load_precomputed(config.path)
        self.records = records

    def _lookup(self, text_a: str, text_b: str) -> dict | None:
        record = self.records.get(pair_key(text_a, text_b))
        if record is None and not self.config.fallback_zero:
            raise KeyError(
                f"no precomputed entry for pair key {pair_key(text_a, text_b)}"
            )
        return record

    def _pair(self, text_a: str, text_b: str) -> tuple[float, np.ndarray]:
        record = self._lookup(text_a, text_b)
        if record is None:
            return 0.0, np.zeros(self.config.D, dtype=np.float64)
        embedding = np.asarray(record["embedding"], dtype=np.float64)
        if embedding.shape != (self.config.D,):
            raise DimensionError(
                f"precomputed embedding has length {embedding.shape[0]}, "
                f"expected {self.config.D}"
            )
        return float(record["score"]), embedding

    def nli(self, sentence_a: str, sentence_b: str) -> NliResult:
        record = self._lookup(sentence_a, sentence_b)
        if record is not None and record.get("probs") is not None:
            probs = np.asarray(record["probs"], dtype=np.float64)
            embedding = np.asarray(record["embedding"], dtype=np.float64)
            return NliResult(probs=_frozen(probs), embedding=_frozen(embedding))
        return super().nli(sentence_a, sentence_b)


Provider = _Provider


def build_provider(config: ProviderConfig, tfidf: TfidfModel | None = None) -> _Provider:
    """Construct the provider selected by config.kind."""
    if config.kind == "toy_hash":
        return ToyHashProvider(config)
    if config.kind == "tfidf_cosine":
        if tfidf is None:
            raise SchemaError("tfidf_cosine provider needs a fitted TfidfModel")
        return TfidfCosineProvider(config, tfidf)
    return PrecomputedProvider(config)


def nli_score(provider: _Provider, sentence_a: str, sentence_b: str) -> NliResult:
    """Score a sentence pair for entailment/neutral/contradiction."""
    return provider.nli(sentence_a, sentence_b)


def rqe_score(provider: _Provider, chq: str, faq: str) -> RqeResult:
    """Score whether the FAQ entails the consumer health question."""
    return provider.rqe(chq, faq)
