"""Shared fixtures: tiny datasets, corpora, and stub providers."""

import numpy as np
import pytest

from medrank.corpus import CandidateAnswer, QAPair, QuestionRecord
from medrank.providers import NliResult, RqeResult


def make_candidate(
    answer_id="a1",
    text="An answer.",
    source="web",
    system_rank=1,
    reference_rank=1,
    reference_score=4,
):
    return CandidateAnswer(
        answer_id=answer_id,
        text=text,
        source=source,
        system_rank=system_rank,
        reference_rank=reference_rank,
        reference_score=reference_score,
    )


def make_question(question_id="q1", text="What is it?", candidates=None):
    if candidates is None:
        candidates = (make_candidate(),)
    return QuestionRecord(
        question_id=question_id, text=text, candidates=tuple(candidates)
    )


class StubProvider:
    """Deterministic provider with a preset pair-score table.

    ``table`` maps (text_a, text_b) to a score; unseen pairs get ``default``.
    Embeddings are a fixed-seed function of the pair so results are stable.
    """

    def __init__(self, table=None, default=0.0, D=4):
        self.table = dict(table or {})
        self.default = default
        self.D = D

    def _score(self, a, b):
        return float(self.table.get((a, b), self.default))

    def _embedding(self, a, b):
        seed = abs(hash((a, b))) % (2**32)
        return np.random.default_rng(seed).standard_normal(self.D)

    def nli(self, a, b):
        s = self._score(a, b)
        return NliResult(
            probs=np.array([s, (1 - s) / 2, (1 - s) / 2]),
            embedding=self._embedding(a, b),
        )

    def rqe(self, a, b):
        return RqeResult(score=self._score(a, b), embedding=self._embedding(a, b))


@pytest.fixture
def qa_pairs():
    return [
        QAPair("p1", "what causes headaches", "Many things. See a doctor.", "faq"),
        QAPair("p2", "how to treat a cold", "Rest and fluids help.", "faq"),
        QAPair("p3", "what causes fevers", "Infections mostly.", "faq"),
    ]


@pytest.fixture
def labeled_question():
    return make_question(
        question_id="q1",
        text="what causes headaches",
        candidates=(
            make_candidate("q1-a", "Stress causes headaches.", "web", 2, 1, 4),
            make_candidate("q1-b", "Dehydration too.", "nih", 1, 2, 3),
            make_candidate("q1-c", "Unrelated text here.", "web", 3, 3, 1),
        ),
    )
