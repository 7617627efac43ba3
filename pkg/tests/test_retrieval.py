"""Entailment retrieval: thresholding, top-N, fallback, coverage, cache."""

import pytest

from medrank.corpus import QAPair
from medrank.errors import SchemaError
from medrank.retrieval import (
    EntailmentIndex,
    RetrievalConfig,
    build_cache,
    coverage,
    load_cache,
    retrieve,
    retrieve_cached,
    save_cache,
)

from conftest import StubProvider


def _index(scores, query="q"):
    """Corpus of len(scores) pairs where pair i scores scores[i] for `query`."""
    pairs = [QAPair(f"p{i}", f"corpus question {i}", f"answer {i}", "faq") for i in range(len(scores))]
    table = {(query, p.question_text): s for p, s in zip(pairs, scores)}
    return EntailmentIndex(pairs, StubProvider(table))


class TestRetrieve:
    def test_fallback_returns_global_max(self):
        index = _index([0.2, 0.5, 0.3])
        hits = retrieve(index, "q", RetrievalConfig(N=3, T=0.9))
        assert [h.pair.pair_id for h in hits] == ["p1"]
        assert hits[0].score == 0.5

    def test_top_n_of_passing(self):
        index = _index([0.8, 0.95, 0.75, 0.9, 0.85])
        hits = retrieve(index, "q", RetrievalConfig(N=3, T=0.7))
        assert [h.pair.pair_id for h in hits] == ["p1", "p3", "p4"]

    def test_tie_broken_by_corpus_order(self):
        # Brute-force oracle over a 4-pair corpus with a planted tie at the cut.
        scores = [0.8, 0.9, 0.8, 0.7]
        index = _index(scores)
        config = RetrievalConfig(N=2, T=0.5)
        hits = retrieve(index, "q", config)
        passing = sorted(
            (i for i, s in enumerate(scores) if s >= config.T),
            key=lambda i: (-scores[i], i),
        )[: config.N]
        assert [h.pair.pair_id for h in hits] == [f"p{i}" for i in passing]
        assert [h.pair.pair_id for h in hits] == ["p1", "p0"]

    def test_never_empty_with_fallback(self):
        index = _index([0.0, 0.0])
        assert len(retrieve(index, "q", RetrievalConfig(N=1, T=0.99))) == 1

    def test_no_fallback_may_be_empty(self):
        index = _index([0.1, 0.2])
        assert retrieve(index, "q", RetrievalConfig(N=2, T=0.9), fallback=False) == []

    def test_result_invariants(self):
        index = _index([0.91, 0.2, 0.93, 0.71, 0.92])
        config = RetrievalConfig(N=3, T=0.7)
        hits = retrieve(index, "q", config)
        assert 1 <= len(hits) <= config.N
        scores = [h.score for h in hits]
        assert scores == sorted(scores, reverse=True)
        assert all(s >= config.T for s in scores)

    def test_monotone_in_threshold_and_n(self):
        scores = [0.95, 0.9, 0.8, 0.7, 0.6, 0.5]
        index = _index(scores)
        for n in (1, 2, 4, 6):
            counts = [
                len(retrieve(index, "q", RetrievalConfig(N=n, T=t), fallback=False))
                for t in (0.0, 0.55, 0.75, 0.85, 0.99)
            ]
            assert counts == sorted(counts, reverse=True)
        for t in (0.0, 0.55, 0.99):
            counts = [
                len(retrieve(index, "q", RetrievalConfig(N=n, T=t), fallback=False))
                for n in (1, 2, 3, 6)
            ]
            assert counts == sorted(counts)

    def test_empty_corpus_rejected(self):
        with pytest.raises(SchemaError):
            EntailmentIndex([], StubProvider())

    def test_swap_direction(self):
        pair = QAPair("p0", "faq text", "answer", "faq")
        table = {("chq", "faq text"): 0.9, ("faq text", "chq"): 0.2}
        index = EntailmentIndex([pair], StubProvider(table))
        forward = retrieve(index, "chq", RetrievalConfig(N=1, T=0.0))
        swapped = retrieve(
            index, "chq", RetrievalConfig(N=1, T=0.0, swap_direction=True)
        )
        assert forward[0].score == 0.9
        assert swapped[0].score == 0.2


class TestCoverage:
    def _multi_index(self):
        pairs = [QAPair(f"p{i}", f"cq {i}", f"ans {i}", "faq") for i in range(2)]
        table = {
            ("q0", "cq 0"): 0.95,
            ("q0", "cq 1"): 0.1,
            ("q1", "cq 0"): 0.6,
            ("q1", "cq 1"): 0.2,
            ("q2", "cq 0"): 0.3,
            ("q2", "cq 1"): 0.4,
            ("q3", "cq 0"): 0.8,
            ("q3", "cq 1"): 0.85,
            ("q4", "cq 0"): 0.0,
            ("q4", "cq 1"): 0.0,
        }
        return EntailmentIndex(pairs, StubProvider(table))

    def test_zero_threshold_covers_all(self):
        index = self._multi_index()
        queries = [f"q{i}" for i in range(5)]
        assert coverage(index, queries, RetrievalConfig(N=1, T=0.0)) == 1.0

    def test_unreachable_threshold(self):
        index = self._multi_index()
        queries = [f"q{i}" for i in range(5)]
        assert coverage(index, queries, RetrievalConfig(N=1, T=1.0)) == 0.0

    def test_hand_counted_fixture(self):
        index = self._multi_index()
        queries = [f"q{i}" for i in range(5)]
        # at T=0.5: q0 (0.95), q1 (0.6), q3 (0.85) cleared -> 3/5
        assert coverage(index, queries, RetrievalConfig(N=1, T=0.5)) == pytest.approx(
            0.6
        )
        # at T=0.9: only q0 -> 1/5
        assert coverage(index, queries, RetrievalConfig(N=1, T=0.9)) == pytest.approx(
            0.2
        )

    def test_fallback_not_counted(self):
        index = self._multi_index()
        assert coverage(index, ["q4"], RetrievalConfig(N=1, T=0.5)) == 0.0
        assert len(retrieve(index, "q4", RetrievalConfig(N=1, T=0.5))) == 1


class TestCache:
    def test_roundtrip_and_consistency(self, tmp_path):
        scores = [0.8, 0.95, 0.75]
        index = _index(scores)
        config = RetrievalConfig(N=2, T=0.7)
        cache = build_cache(index, {"qid": "q"}, config)
        path = tmp_path / "cache.jsonl"
        save_cache(cache, path)
        loaded = load_cache(path)
        assert loaded == cache
        direct = retrieve(index, "q", config)
        cached = retrieve_cached(index, "q", "qid", loaded, config)
        assert [h.pair.pair_id for h in direct] == [h.pair.pair_id for h in cached]
        assert [h.score for h in direct] == [h.score for h in cached]

    def test_cached_fallback(self, tmp_path):
        index = _index([0.1, 0.3])
        config = RetrievalConfig(N=2, T=0.9)
        cache = build_cache(index, {"qid": "q"}, config)
        cached = retrieve_cached(index, "q", "qid", cache, config)
        assert [h.pair.pair_id for h in cached] == ["p1"]

    def test_unknown_query_falls_through(self):
        index = _index([0.9])
        config = RetrievalConfig(N=1, T=0.5)
        hits = retrieve_cached(index, "q", "missing", {}, config)
        assert [h.pair.pair_id for h in hits] == ["p0"]
