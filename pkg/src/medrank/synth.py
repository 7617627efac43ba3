"""Seeded generator of desk-scale synthetic ranking datasets.

Every question is planted on a topic with a small set of topic tokens; the
QA corpus carries one entailing FAQ pair per topic so retrieval has signal.
Candidate answers share 0..4 topic tokens with the topic's reference answer;
relevance (scores 3-4) and the reference rank are deterministic functions of
that overlap. Noise comes from out-of-vocabulary filler tokens, a variable
number of in-vocabulary common tokens (which perturbs normalized TF-IDF
mass nonlinearly), and occasional system-rank swaps that never cross the
relevant/irrelevant boundary.

With the default three topics the corpus vocabulary is exactly 16 terms
(4 common + 12 topic words), matching the scaled-down TF-IDF width.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import (
    CandidateAnswer,
    Dataset,
    QAPair,
    QuestionRecord,
    save_dataset,
    save_qa_corpus,
)
from .errors import SchemaError

_COMMONS = ("overview", "facts", "more", "shared")
_NOISE_VOCAB = tuple(f"filler{i:02d}" for i in range(30))
_QUESTION_PREFIXES = (
    "tell me about",
    "what should i know about",
    "information on",
)
# Overlap -> manual rating; >= 3 topic tokens means a relevant answer.
_SCORE_BY_OVERLAP = {4: 4, 3: 3, 2: 2, 1: 1, 0: 1}
_CANDIDATE_SOURCES = ("nih", "web")
_TOP_SWAP_PROB = 0.15
_LOW_SWAP_PROB = 0.30


@dataclass(frozen=True)
class SynthConfig:
    questions: int = 200
    val_questions: int = 50
    topics: int = 3
    candidates: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.questions < 1 or self.val_questions < 0:
            raise SchemaError("questions must be >= 1 and val_questions >= 0")
        if self.topics < 1:
            raise SchemaError("topics must be >= 1")
        if not 2 <= self.candidates <= 5:
            raise SchemaError("candidates must be in 2..5")


def _topic_words(topic: int) -> tuple[str, ...]:
    return tuple(f"t{topic}{ch}" for ch in "abcd")


def make_corpus(topics: int) -> list[QAPair]:
    """One entailing FAQ pair per topic."""
    pairs = []
    for t in range(topics):
        w = _topic_words(t)
        pairs.append(
            QAPair(
                pair_id=f"faq-{t}",
                question_text=f"what about {w[0]} {w[1]} {w[2]} {w[3]}",
                answer_text=(
                    f"{w[0].capitalize()} {w[1]} {w[2]} {w[3]} overview facts. "
                    f"More shared {w[0]} {w[1]}."
                ),
                source="faq",
            )
        )
    return pairs


def _candidate_text(rng: np.random.Generator, words: list[str]) -> str:
    """Arrange words into 1-3 capitalized sentences."""
    words = list(words)
    rng.shuffle(words)
    n_sentences = min(int(rng.integers(1, 4)), len(words))
    if n_sentences > 1:
        bounds = sorted(
            rng.choice(
                np.arange(1, len(words)), size=n_sentences - 1, replace=False
            ).tolist()
        )
    else:
        bounds = []
    sentences = []
    start = 0
    for bound in bounds + [len(words)]:
        sentence = " ".join(words[start:bound])
        sentences.append(sentence[0].upper() + sentence[1:])
        start = bound
    return " ".join(s + "." for s in sentences)


def _system_ranks(rng: np.random.Generator, n: int) -> list[int]:
    """Reference ranks 1..n with seeded swaps that keep the top-2 boundary."""
    ranks = list(range(1, n + 1))
    if n >= 2 and rng.random() < _TOP_SWAP_PROB:
        ranks[0], ranks[1] = ranks[1], ranks[0]
    if n >= 4 and rng.random() < _LOW_SWAP_PROB:
        i = int(rng.integers(2, n - 1))
        ranks[i], ranks[i + 1] = ranks[i + 1], ranks[i]
    return ranks


def _overlap_levels(rng: np.random.Generator, n: int) -> list[int]:
    """n distinct overlap levels, always including 4 and 3."""
    levels = [4, 3]
    extra = rng.choice([0, 1, 2], size=n - 2, replace=False).tolist()
    return levels + [int(e) for e in extra]


def _make_question(
    rng: np.random.Generator, question_id: str, topic: int, n_candidates: int
) -> QuestionRecord:
    topic_words = _topic_words(topic)
    prefix = _QUESTION_PREFIXES[int(rng.integers(0, len(_QUESTION_PREFIXES)))]
    text = f"{prefix} {' '.join(topic_words)}"

    levels = _overlap_levels(rng, n_candidates)
    by_overlap_desc = sorted(range(n_candidates), key=lambda i: -levels[i])
    reference_rank = [0] * n_candidates
    for rank, idx in enumerate(by_overlap_desc, start=1):
        reference_rank[idx] = rank
    system_values = _system_ranks(rng, n_candidates)
    system_rank = [system_values[reference_rank[i] - 1] for i in range(n_candidates)]

    candidates = []
    for i in range(n_candidates):
        overlap = levels[i]
        words = list(topic_words[:overlap])
        n_common = int(rng.integers(0, 6))
        words += [str(rng.choice(_COMMONS)) for _ in range(n_common)]
        n_noise = int(rng.integers(1, 5))
        words += [str(rng.choice(_NOISE_VOCAB)) for _ in range(n_noise)]
        candidates.append(
            CandidateAnswer(
                answer_id=f"{question_id}-a{i}",
                text=_candidate_text(rng, words),
                source=str(rng.choice(_CANDIDATE_SOURCES)),
                system_rank=system_rank[i],
                reference_rank=reference_rank[i],
                reference_score=_SCORE_BY_OVERLAP[overlap],
            )
        )
    return QuestionRecord(question_id=question_id, text=text, candidates=tuple(candidates))


def _make_split(
    rng: np.random.Generator, split: str, count: int, config: SynthConfig
) -> Dataset:
    questions = []
    for i in range(count):
        topic = int(rng.integers(0, config.topics))
        questions.append(
            _make_question(rng, f"synth-{split}-{i:04d}", topic, config.candidates)
        )
    return Dataset(split=split, questions=tuple(questions))


def generate(config: SynthConfig) -> tuple[Dataset, Dataset, list[QAPair]]:
    """Deterministic (train, validation, corpus) triple for a seed."""
    train_rng = np.random.default_rng([config.seed, 0])
    val_rng = np.random.default_rng([config.seed, 1])
    train = _make_split(train_rng, "train", config.questions, config)
    val = _make_split(val_rng, "validation", config.val_questions, config)
    return train, val, make_corpus(config.topics)


def write_synth(config: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Generate and write the dataset files; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, val, corpus_pairs = generate(config)
    paths = {
        "train": out_dir / "questions_train.jsonl",
        "validation": out_dir / "questions_validation.jsonl",
        "corpus": out_dir / "corpus.jsonl",
    }
    save_dataset(train, paths["train"])
    save_dataset(val, paths["validation"])
    save_qa_corpus(corpus_pairs, paths["corpus"])
    return paths
