"""Jointly trained answer filtering and pairwise re-ranking.

For every retrieved entailed answer, each candidate answer gets a joint
embedding: a convolutional encoding of the sentence-pair NLI tensor, the RQE
embedding of the retrieval hit, and a metadata block (sources, lengths,
system rank, TF-IDF). A filtering head classifies single candidates as
relevant; a pairwise head predicts, for an ordered candidate pair, whether
the first should rank higher. Both heads train together on a per-question
batch with loss

    L_total = sum_instances( sum_c L_filter(c) + alpha * sum_pairs L_pair )

and at inference the per-instance scores are ensembled: filtering by the
mean probability at threshold 0.5, ranking by summed pairwise win scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CandidateAnswer, Dataset, QAPair, QuestionRecord, derive_label
from .errors import DimensionError, SchemaError
from .evalkit import Prediction
from .preprocess import split_sentences
from .providers import Provider, ProviderConfig, TfidfModel, tfidf_transform
from .retrieval import (
    EntailedCandidate,
    EntailmentIndex,
    RetrievalConfig,
    retrieve,
)
from .tensornet import (
    Adam,
    BatchNorm2d,
    Conv2d,
    Linear,
    BatchNorm1d,
    Module,
    QuadrantPool,
    ReLU,
    SGD,
    Sequential,
    Sigmoid,
    bce_grad,
    bce_loss,
    conv_out_dim,
    read_manifest,
    write_manifest,
)

DEFAULT_METADATA_WIDTH = 2032


# ---------------------------------------------------------------------------
# Convolutional encoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvLayerSpec:
    channels: int
    kernel: tuple[int, int]
    stride: tuple[int, int]
    padding: tuple[int, int]
    batchnorm: bool


@dataclass(frozen=True)
class ConvEncoderConfig:
    """Layer stack for the NLI pair-tensor encoder.

    ReLU follows every layer except the last; quadrant pooling turns the
    final feature map into a vector of length 4 x last channels.
    """

    in_channels: int
    layers: tuple[ConvLayerSpec, ...]

    @property
    def out_dim(self) -> int:
        return 4 * self.layers[-1].channels

    @classmethod
    def default(cls) -> "ConvEncoderConfig":
        return cls(
            in_channels=768,
            layers=(
                ConvLayerSpec(768, (1, 1), (1, 1), (1, 1), True),
                ConvLayerSpec(512, (3, 3), (1, 1), (2, 2), True),
                ConvLayerSpec(512, (3, 3), (2, 2), (1, 1), False),
                ConvLayerSpec(256, (2, 2), (1, 1), (1, 1), True),
                ConvLayerSpec(256, (3, 3), (1, 1), (2, 2), False),
            ),
        )

    @classmethod
    def scaled_down(cls) -> "ConvEncoderConfig":
        """Same structure at toy channel counts; pooled output is 16 wide."""
        return cls(
            in_channels=8,
            layers=(
                ConvLayerSpec(8, (1, 1), (1, 1), (1, 1), True),
                ConvLayerSpec(6, (3, 3), (1, 1), (2, 2), True),
                ConvLayerSpec(6, (3, 3), (2, 2), (1, 1), False),
                ConvLayerSpec(4, (2, 2), (1, 1), (1, 1), True),
                ConvLayerSpec(4, (3, 3), (1, 1), (2, 2), False),
            ),
        )


def spatial_trace(config: ConvEncoderConfig, a: int, c: int) -> list[tuple[int, int]]:
    """Per-layer output (height, width) for an a x c input map."""
    trace = []
    h, w = a, c
    for layer in config.layers:
        h = conv_out_dim(h, layer.kernel[0], layer.stride[0], layer.padding[0])
        w = conv_out_dim(w, layer.kernel[1], layer.stride[1], layer.padding[1])
        trace.append((h, w))
    return trace


class ConvEncoder(Module):
    """Conv stack plus quadrant pooling; input (C, a, c), output (4C',)."""

    def __init__(self, config: ConvEncoderConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        blocks: list[Module] = []
        names: list[str] = []
        in_channels = config.in_channels
        last = len(config.layers) - 1
        for i, spec in enumerate(config.layers):
            blocks.append(
                Conv2d(
                    in_channels,
                    spec.channels,
                    spec.kernel,
                    spec.stride,
                    spec.padding,
                    rng,
                    bias=not spec.batchnorm,
                )
            )
            names.append(f"conv{i + 1}")
            if spec.batchnorm:
                blocks.append(BatchNorm2d(spec.channels))
                names.append(f"bn{i + 1}")
            if i != last:
                blocks.append(ReLU())
                names.append(f"relu{i + 1}")
            in_channels = spec.channels
        blocks.append(QuadrantPool())
        names.append("pool")
        self.stack = Sequential(blocks, names)

    def children(self):
        return [("stack", self.stack)]

    @property
    def out_dim(self) -> int:
        return self.config.out_dim

    def forward(self, tensor: np.ndarray) -> np.ndarray:
        if tensor.shape[0] != self.config.in_channels:
            raise DimensionError(
                f"encoder expects {self.config.in_channels} channels, got {tensor.shape[0]}"
            )
        return self.stack.forward(tensor)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return self.stack.backward(grad_out)


def build_pair_tensor(
    entailed_sentences: list[str] | tuple[str, ...],
    candidate_sentences: list[str] | tuple[str, ...],
    nli_provider: Provider,
    channels: int = 768,
) -> np.ndarray:
    """NLI-embedding tensor of shape (channels, a, c).

    Cell (:, i, j) is the embedding of (entailed sentence i, candidate
    sentence j).
    """
    a, c = len(entailed_sentences), len(candidate_sentences)
    if a < 1 or c < 1:
        raise SchemaError("pair tensor needs at least one sentence on each side")
    tensor = np.empty((channels, a, c))
    for i, premise in enumerate(entailed_sentences):
        for j, hypothesis in enumerate(candidate_sentences):
            embedding = nli_provider.nli(premise, hypothesis).embedding
            if embedding.shape[0] != channels:
                raise DimensionError(
                    f"provider embedding has {embedding.shape[0]} dims, "
                    f"encoder expects {channels}"
                )
            tensor[:, i, j] = embedding
    return tensor


def encode_nli(tensor: np.ndarray, encoder: ConvEncoder) -> np.ndarray:
    """Run the conv encoder; output length is 4 x final channels for any a, c."""
    return encoder.forward(tensor)


# ---------------------------------------------------------------------------
# Metadata embedding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetadataLayout:
    """Slot order: candidate-source one-hot, entailed-source one-hot,
    candidate length, entailed length, candidate system rank, TF-IDF, zero pad."""

    candidate_sources: tuple[str, ...]
    entailed_sources: tuple[str, ...]
    V: int
    M: int

    def __post_init__(self):
        if self.used_width > self.M:
            raise DimensionError(
                f"metadata needs {self.used_width} slots but M={self.M}"
            )

    @property
    def used_width(self) -> int:
        return len(self.candidate_sources) + len(self.entailed_sources) + 3 + self.V

    def to_dict(self) -> dict:
        return {
            "candidate_sources": list(self.candidate_sources),
            "entailed_sources": list(self.entailed_sources),
            "V": self.V,
            "M": self.M,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MetadataLayout":
        return cls(
            candidate_sources=tuple(payload["candidate_sources"]),
            entailed_sources=tuple(payload["entailed_sources"]),
            V=int(payload["V"]),
            M=int(payload["M"]),
        )


def fit_metadata_layout(
    questions: list[QuestionRecord],
    corpus_pairs: list[QAPair],
    V: int,
    M: int | None = DEFAULT_METADATA_WIDTH,
) -> MetadataLayout:
    """Freeze source vocabularies from training data.

    Candidate sources may appear on the entailed side through training-time
    augmentation, so the entailed vocabulary covers both corpus and
    candidate sources. With M=None the layout is packed without padding.
    """
    candidate_sources = tuple(
        sorted({c.source for q in questions for c in q.candidates})
    )
    entailed_sources = tuple(
        sorted({p.source for p in corpus_pairs} | set(candidate_sources))
    )
    if M is None:
        M = len(candidate_sources) + len(entailed_sources) + 3 + V
    return MetadataLayout(
        candidate_sources=candidate_sources,
        entailed_sources=entailed_sources,
        V=V,
        M=M,
    )


def build_metadata(
    candidate: CandidateAnswer,
    candidate_sentence_count: int,
    entailed_source: str,
    entailed_sentence_count: int,
    tfidf: TfidfModel,
    layout: MetadataLayout,
) -> np.ndarray:
    """Metadata vector of length layout.M; unknown sources zero their one-hot."""
    if len(tfidf.vocabulary) != layout.V:
        raise DimensionError(
            f"TF-IDF vocabulary size {len(tfidf.vocabulary)} != layout V={layout.V}"
        )
    vec = np.zeros(layout.M)
    offset = 0
    if candidate.source in layout.candidate_sources:
        vec[offset + layout.candidate_sources.index(candidate.source)] = 1.0
    offset += len(layout.candidate_sources)
    if entailed_source in layout.entailed_sources:
        vec[offset + layout.entailed_sources.index(entailed_source)] = 1.0
    offset += len(layout.entailed_sources)
    vec[offset] = candidate_sentence_count
    vec[offset + 1] = entailed_sentence_count
    vec[offset + 2] = candidate.system_rank
    offset += 3
    vec[offset : offset + layout.V] = tfidf_transform(tfidf, candidate.text)
    return vec


@dataclass(frozen=True)
class JointEmbedding:
    """NLI encoding + RQE embedding + metadata, consumed concatenated."""

    nli: np.ndarray
    rqe: np.ndarray
    meta: np.ndarray

    def concat(self) -> np.ndarray:
        return np.concatenate([self.nli, self.rqe, self.meta])

    @property
    def width(self) -> int:
        return self.nli.shape[0] + self.rqe.shape[0] + self.meta.shape[0]


# ---------------------------------------------------------------------------
# Classifier heads
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HeadConfig:
    """Linear widths; every hidden layer gets batchnorm + ReLU, output sigmoid."""

    widths: tuple[int, ...]

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise DimensionError("head widths must end in an output width of 1")

    @classmethod
    def default_filter(cls, input_dim: int = 3824) -> "HeadConfig":
        return cls((input_dim, 2048, 1024, 512, 512, 256, 64, 1))

    @classmethod
    def default_pair(cls, input_dim: int = 7648) -> "HeadConfig":
        return cls((input_dim, 3824, 2048, 1024, 512, 512, 256, 64, 1))

    @classmethod
    def scaled_filter(cls, input_dim: int = 48) -> "HeadConfig":
        return cls((input_dim, 24, 12, 1))

    @classmethod
    def scaled_pair(cls, input_dim: int = 96) -> "HeadConfig":
        return cls((input_dim, 48, 24, 12, 1))


def build_head(config: HeadConfig, rng: np.random.Generator) -> Sequential:
    blocks: list[Module] = []
    names: list[str] = []
    widths = config.widths
    for i in range(len(widths) - 2):
        blocks.append(Linear(widths[i], widths[i + 1], rng, bias=False))
        names.append(f"linear{i + 1}")
        blocks.append(BatchNorm1d(widths[i + 1]))
        names.append(f"bn{i + 1}")
        blocks.append(ReLU())
        names.append(f"relu{i + 1}")
    blocks.append(Linear(widths[-2], widths[-1], rng))
    names.append(f"linear{len(widths) - 1}")
    blocks.append(Sigmoid())
    names.append("sigmoid")
    return Sequential(blocks, names)


# ---------------------------------------------------------------------------
# The joint model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 2.0
    epochs: int = 30
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    augmentation: bool = True
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)

    def __post_init__(self):
        if self.alpha < 0:
            raise SchemaError("alpha must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise SchemaError(f"unknown optimizer {self.optimizer!r}")


class JointModel(Module):
    """Conv encoder plus filtering and pairwise heads over joint embeddings."""

    def __init__(
        self,
        encoder: ConvEncoder,
        filter_head: Sequential,
        pair_head: Sequential,
        layout: MetadataLayout,
        tfidf: TfidfModel,
        rqe_dim: int,
        filter_config: HeadConfig,
        pair_config: HeadConfig,
    ):
        super().__init__()
        self.encoder = encoder
        self.filter_head = filter_head
        self.pair_head = pair_head
        self.layout = layout
        self.tfidf = tfidf
        self.rqe_dim = rqe_dim
        self.filter_config = filter_config
        self.pair_config = pair_config
        self.audit_dimensions()

    def children(self):
        return [
            ("encoder", self.encoder),
            ("filter_head", self.filter_head),
            ("pair_head", self.pair_head),
        ]

    @property
    def joint_dim(self) -> int:
        return self.encoder.out_dim + self.rqe_dim + self.layout.M

    def audit_dimensions(self) -> None:
        if self.filter_config.widths[0] != self.joint_dim:
            raise DimensionError(
                f"joint embedding width {self.joint_dim} != filtering head "
                f"input {self.filter_config.widths[0]}"
            )
        if self.pair_config.widths[0] != 2 * self.joint_dim:
            raise DimensionError(
                f"pairwise head input {self.pair_config.widths[0]} != "
                f"2 x joint width {2 * self.joint_dim}"
            )

    def forward_filter(self, joints: np.ndarray) -> np.ndarray:
        """Relevance probability per row of a (B, joint_dim) matrix."""
        return self.filter_head.forward(np.atleast_2d(joints))[:, 0]

    def forward_pair(self, joint_i: np.ndarray, joint_j: np.ndarray) -> float:
        """Probability that the first candidate ranks above the second."""
        row = np.concatenate([joint_i, joint_j])[None, :]
        return float(self.pair_head.forward(row)[0, 0])

    def forward_pair_matrix(self, rows: np.ndarray) -> np.ndarray:
        return self.pair_head.forward(rows)[:, 0]


def build_joint_model(
    layout: MetadataLayout,
    tfidf: TfidfModel,
    encoder_config: ConvEncoderConfig,
    rqe_dim: int,
    seed: int = 0,
    filter_config: HeadConfig | None = None,
    pair_config: HeadConfig | None = None,
) -> JointModel:
    joint_dim = encoder_config.out_dim + rqe_dim + layout.M
    if filter_config is None:
        filter_config = HeadConfig.default_filter(joint_dim)
    if pair_config is None:
        pair_config = HeadConfig.default_pair(2 * joint_dim)
    rng = np.random.default_rng(seed)
    encoder = ConvEncoder(encoder_config, rng)
    filter_head = build_head(filter_config, rng)
    pair_head = build_head(pair_config, rng)
    return JointModel(
        encoder,
        filter_head,
        pair_head,
        layout,
        tfidf,
        rqe_dim,
        filter_config,
        pair_config,
    )


# ---------------------------------------------------------------------------
# Training instances
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EntailedInstance:
    """One entailed answer attached to a question, retrieved or synthetic."""

    sentences: tuple[str, ...]
    source: str
    score: float
    rqe_embedding: np.ndarray


def instance_from_retrieved(candidate: EntailedCandidate) -> EntailedInstance:
    sentences = tuple(split_sentences(candidate.pair.answer_text))
    if not sentences:
        sentences = (candidate.pair.answer_text,)
    return EntailedInstance(
        sentences=sentences,
        source=candidate.pair.source,
        score=candidate.score,
        rqe_embedding=candidate.embedding,
    )


def augment_training(
    question: QuestionRecord, rqe_provider: Provider
) -> list[tuple[EntailedInstance, tuple[int, ...]]]:
    """Synthetic instances: each ranked candidate entails all lower-ranked ones.

    For a candidate at reference rank r the candidate set is every candidate
    with reference rank > r; candidates producing an empty set are skipped.
    Synthetic instances carry RQE score 1.0 and the provider's embedding of
    (question, question).
    """
    ranked = [
        (i, c) for i, c in enumerate(question.candidates) if c.reference_rank is not None
    ]
    if len(ranked) < 2:
        return []
    self_embedding = rqe_provider.rqe(question.text, question.text).embedding
    out = []
    for _, anchor in ranked:
        lower = tuple(
            i for i, c in ranked if c.reference_rank > anchor.reference_rank
        )
        if not lower:
            continue
        sentences = tuple(split_sentences(anchor.text)) or (anchor.text,)
        out.append(
            (
                EntailedInstance(
                    sentences=sentences,
                    source=anchor.source,
                    score=1.0,
                    rqe_embedding=self_embedding,
                ),
                lower,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class _PreparedInstance:
    tensors: list[np.ndarray]
    metas: list[np.ndarray]
    rqe_embedding: np.ndarray
    cand_idx: tuple[int, ...]


@dataclass
class _PreparedQuestion:
    question_id: str
    labels: np.ndarray
    ranks: list[int]
    instances: list[_PreparedInstance]


def _prepare_instance(
    model: JointModel,
    instance: EntailedInstance,
    cand_idx: tuple[int, ...],
    candidates: list[CandidateAnswer],
    cand_sentences: list[tuple[str, ...]],
    nli_provider: Provider,
) -> _PreparedInstance:
    tensors = []
    metas = []
    for i in cand_idx:
        tensors.append(
            build_pair_tensor(
                instance.sentences,
                cand_sentences[i],
                nli_provider,
                model.encoder.config.in_channels,
            )
        )
        metas.append(
            build_metadata(
                candidates[i],
                len(cand_sentences[i]),
                instance.source,
                len(instance.sentences),
                model.tfidf,
                model.layout,
            )
        )
    return _PreparedInstance(
        tensors=tensors,
        metas=metas,
        rqe_embedding=np.asarray(instance.rqe_embedding, dtype=np.float64),
        cand_idx=cand_idx,
    )


def _candidate_sentences(question: QuestionRecord) -> list[tuple[str, ...]]:
    out = []
    for candidate in question.candidates:
        sentences = tuple(split_sentences(candidate.text))
        out.append(sentences if sentences else (candidate.text,))
    return out


def _head_forward_train(head: Sequential, matrix: np.ndarray) -> np.ndarray:
    """Train-mode head forward; a batch of one falls back to running stats."""
    if matrix.shape[0] >= 2:
        return head.forward(matrix)
    head.train(False)
    try:
        return head.forward(matrix)
    finally:
        head.train(True)


def question_loss(
    model: JointModel,
    prepared: _PreparedQuestion,
    alpha: float,
    compute_grads: bool = True,
) -> float:
    """Forward (and optionally backward) for one question batch.

    Returns L_total = sum over instances of the summed filter BCE plus alpha
    times the summed pairwise BCE over all ordered candidate pairs.
    """
    joints = []
    filter_targets = []
    row_of = []  # (instance index, position of the global candidate index)
    for k, inst in enumerate(prepared.instances):
        for pos, g in enumerate(inst.cand_idx):
            nli_vec = model.encoder.forward(inst.tensors[pos])
            joints.append(np.concatenate([nli_vec, inst.rqe_embedding, inst.metas[pos]]))
            filter_targets.append(prepared.labels[g])
            row_of.append((k, g))
    joint_matrix = np.stack(joints)
    targets = np.asarray(filter_targets, dtype=np.float64)

    if model.training:
        filter_probs = _head_forward_train(model.filter_head, joint_matrix)[:, 0]
    else:
        filter_probs = model.filter_head.forward(joint_matrix)[:, 0]
    total = bce_loss(filter_probs, targets, reduction="sum")

    pair_rows: list[tuple[int, int]] = []
    pair_targets: list[float] = []
    row_index: dict[tuple[int, int], int] = {
        (k, g): r for r, (k, g) in enumerate(row_of)
    }
    for k, inst in enumerate(prepared.instances):
        for gi in inst.cand_idx:
            for gj in inst.cand_idx:
                if gi == gj:
                    continue
                pair_rows.append((row_index[(k, gi)], row_index[(k, gj)]))
                pair_targets.append(
                    1.0 if prepared.ranks[gi] < prepared.ranks[gj] else 0.0
                )

    pair_probs = None
    if pair_rows:
        pair_matrix = np.stack(
            [np.concatenate([joint_matrix[i], joint_matrix[j]]) for i, j in pair_rows]
        )
        if model.training:
            pair_probs = _head_forward_train(model.pair_head, pair_matrix)[:, 0]
        else:
            pair_probs = model.pair_head.forward(pair_matrix)[:, 0]
        pair_target_arr = np.asarray(pair_targets, dtype=np.float64)
        total += alpha * bce_loss(pair_probs, pair_target_arr, reduction="sum")

    if not compute_grads:
        model.clear_cache()
        return total

    d_joint = np.zeros_like(joint_matrix)
    if pair_rows:
        d_pair = alpha * bce_grad(pair_probs, pair_target_arr)
        d_pair_matrix = model.pair_head.backward(d_pair[:, None])
        width = joint_matrix.shape[1]
        for r, (i, j) in enumerate(pair_rows):
            d_joint[i] += d_pair_matrix[r, :width]
            d_joint[j] += d_pair_matrix[r, width:]
    d_filter = bce_grad(filter_probs, targets)
    d_joint += model.filter_head.backward(d_filter[:, None])

    nli_width = model.encoder.out_dim
    for r in reversed(range(joint_matrix.shape[0])):
        model.encoder.backward(d_joint[r, :nli_width])
    return total


class JointTrainer:
    """Prepares frozen per-question batches and runs seeded training epochs."""

    def __init__(
        self,
        model: JointModel,
        nli_provider: Provider,
        index: EntailmentIndex,
        config: TrainConfig,
    ):
        self.model = model
        self.nli_provider = nli_provider
        self.index = index
        self.config = config
        self.prepared: list[_PreparedQuestion] = []
        params = model.params()
        if config.optimizer == "adam":
            self.optimizer = Adam(params, lr=config.lr)
        else:
            self.optimizer = SGD(params, lr=config.lr)

    def prepare(self, dataset: Dataset) -> None:
        """Retrieve, augment, and embed every question once; order-stable."""
        self.prepared = []
        for question in dataset.questions:
            labels = []
            ranks = []
            for candidate in question.candidates:
                if candidate.reference_score is None or candidate.reference_rank is None:
                    raise SchemaError(
                        f"question {question.question_id!r}: training needs "
                        "reference_rank and reference_score on every candidate"
                    )
                labels.append(derive_label(candidate.reference_score))
                ranks.append(candidate.reference_rank)
            cand_sentences = _candidate_sentences(question)
            all_idx = tuple(range(len(question.candidates)))
            pieces: list[tuple[EntailedInstance, tuple[int, ...]]] = [
                (instance_from_retrieved(hit), all_idx)
                for hit in retrieve(self.index, question.text, self.config.retrieval)
            ]
            if self.config.augmentation:
                pieces.extend(augment_training(question, self.index.provider))
            instances = [
                _prepare_instance(
                    self.model,
                    instance,
                    cand_idx,
                    list(question.candidates),
                    cand_sentences,
                    self.nli_provider,
                )
                for instance, cand_idx in pieces
            ]
            self.prepared.append(
                _PreparedQuestion(
                    question_id=question.question_id,
                    labels=np.asarray(labels, dtype=np.float64),
                    ranks=ranks,
                    instances=instances,
                )
            )

    def run_epoch(self) -> list[float]:
        """One optimizer step per question; returns per-question losses."""
        if not self.prepared:
            raise SchemaError("trainer not prepared; call prepare(dataset) first")
        self.model.train()
        losses = []
        for prepared in self.prepared:
            self.optimizer.zero_grad()
            loss = question_loss(self.model, prepared, self.config.alpha)
            self.optimizer.step()
            losses.append(loss)
        return losses


def training_epoch(trainer: JointTrainer) -> list[float]:
    """Run a single epoch on a prepared trainer."""
    return trainer.run_epoch()


def train_joint(
    model: JointModel,
    dataset: Dataset,
    index: EntailmentIndex,
    nli_provider: Provider,
    config: TrainConfig,
) -> list[list[float]]:
    """Full training loop; leaves the model in eval mode."""
    trainer = JointTrainer(model, nli_provider, index, config)
    trainer.prepare(dataset)
    history = [trainer.run_epoch() for _ in range(config.epochs)]
    model.eval()
    return history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def infer(
    model: JointModel,
    question: QuestionRecord,
    index: EntailmentIndex,
    nli_provider: Provider,
    retrieval_config: RetrievalConfig,
) -> Prediction:
    """Ensemble filtering and ranking over the retrieved entailed answers.

    relevance(i) = [mean_k filter_k(i) >= 0.5]; ranking score
    s(i) = sum_k sum_{j != i} pair_k(i, j), sorted descending with ties
    broken by ascending system rank.
    """
    model.eval()
    model.enable_grad(False)
    try:
        cand_sentences = _candidate_sentences(question)
        candidates = list(question.candidates)
        n = len(candidates)
        all_idx = tuple(range(n))
        hits = retrieve(index, question.text, retrieval_config)
        filter_sum = np.zeros(n)
        pair_sum = np.zeros((n, n))
        for hit in hits:
            instance = instance_from_retrieved(hit)
            prep = _prepare_instance(
                model, instance, all_idx, candidates, cand_sentences, nli_provider
            )
            joints = np.stack(
                [
                    np.concatenate(
                        [
                            model.encoder.forward(prep.tensors[i]),
                            prep.rqe_embedding,
                            prep.metas[i],
                        ]
                    )
                    for i in range(n)
                ]
            )
            filter_sum += model.forward_filter(joints)
            if n > 1:
                rows = []
                coords = []
                for i in range(n):
                    for j in range(n):
                        if i != j:
                            rows.append(np.concatenate([joints[i], joints[j]]))
                            coords.append((i, j))
                probs = model.forward_pair_matrix(np.stack(rows))
                for (i, j), p in zip(coords, probs):
                    pair_sum[i, j] += p
        mean_filter = filter_sum / len(hits)
        scores = pair_sum.sum(axis=1)
        order = sorted(
            range(n), key=lambda i: (-scores[i], candidates[i].system_rank)
        )
        ranking = tuple(candidates[i].answer_id for i in order)
        relevant = tuple(
            candidates[i].answer_id for i in order if mean_filter[i] >= 0.5
        )
        return Prediction(
            question_id=question.question_id,
            ranking=ranking,
            relevant=relevant,
            scores={candidates[i].answer_id: float(scores[i]) for i in range(n)},
        )
    finally:
        model.enable_grad(True)


def predict_dataset(
    model: JointModel,
    dataset: Dataset,
    index: EntailmentIndex,
    nli_provider: Provider,
    retrieval_config: RetrievalConfig,
) -> list[Prediction]:
    return [
        infer(model, question, index, nli_provider, retrieval_config)
        for question in dataset.questions
    ]


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_joint_model(
    model: JointModel,
    path: str | Path,
    train_config: TrainConfig,
    provider_config: ProviderConfig,
    provider_tfidf: TfidfModel | None = None,
) -> None:
    """Self-contained checkpoint: config, layouts, TF-IDF models, weights."""
    encoder_cfg = model.encoder.config
    meta = {
        "kind": "joint",
        "encoder": {
            "in_channels": encoder_cfg.in_channels,
            "layers": [
                {
                    "channels": s.channels,
                    "kernel": list(s.kernel),
                    "stride": list(s.stride),
                    "padding": list(s.padding),
                    "batchnorm": s.batchnorm,
                }
                for s in encoder_cfg.layers
            ],
        },
        "filter_widths": list(model.filter_config.widths),
        "pair_widths": list(model.pair_config.widths),
        "layout": model.layout.to_dict(),
        "tfidf": {
            "vocabulary": model.tfidf.vocabulary,
            "idf": model.tfidf.idf.tolist(),
            "V": model.tfidf.V,
        },
        "rqe_dim": model.rqe_dim,
        "train": {
            "alpha": train_config.alpha,
            "epochs": train_config.epochs,
            "lr": train_config.lr,
            "optimizer": train_config.optimizer,
            "seed": train_config.seed,
            "augmentation": train_config.augmentation,
            "retrieval_N": train_config.retrieval.N,
            "retrieval_T": train_config.retrieval.T,
        },
        "provider": {
            "kind": provider_config.kind,
            "D": provider_config.D,
            "seed": provider_config.seed,
            "vocab_size": provider_config.vocab_size,
        },
        "provider_tfidf": None
        if provider_tfidf is None
        else {
            "vocabulary": provider_tfidf.vocabulary,
            "idf": provider_tfidf.idf.tolist(),
            "V": provider_tfidf.V,
        },
    }
    arrays = {f"param.{name}": t.data for name, t in model.named_params()}
    arrays.update({f"buffer.{name}": b for name, b in model.named_buffers()})
    write_manifest(path, meta, arrays)


# ---------------------------------------------------------------------------
# Gradient verification battery
# ---------------------------------------------------------------------------


def _check_module(
    module: Module, loss_fn, seed_grad, params=None, train_mode: bool = True, **kwargs
) -> float:
    """Populate analytic grads, then finite-difference with caching disabled."""
    from .tensornet import grad_check

    module.train(train_mode)
    module.enable_grad(True)
    module.zero_grad()
    seed_grad()
    module.enable_grad(False)
    try:
        return grad_check(loss_fn, params if params is not None else module.params(), **kwargs)
    finally:
        module.enable_grad(True)


def gradient_check_battery(seed: int = 0, full_model_samples: int = 25) -> dict[str, float]:
    """Central-difference checks for every differentiable component.

    Runs at scaled-down dimensions in double precision; returns the max
    relative error per component. Every value should be <= 1e-4.
    """
    from .providers import ProviderConfig as PC
    from .providers import ToyHashProvider, fit_tfidf

    results: dict[str, float] = {}
    rng = np.random.default_rng(seed)

    # linear + sigmoid + binary cross-entropy
    x = rng.standard_normal((5, 4))
    t = rng.integers(0, 2, size=5).astype(np.float64)
    head = Sequential([Linear(4, 1, rng), Sigmoid()], ["linear", "sigmoid"])

    def linear_loss() -> float:
        return bce_loss(head.forward(x)[:, 0], t)

    def linear_seed() -> None:
        probs = head.forward(x)[:, 0]
        head.backward(bce_grad(probs, t)[:, None])

    results["linear_sigmoid_bce"] = _check_module(head, linear_loss, linear_seed)

    # conv2d under a fixed random linear functional of the output map
    conv = Conv2d(2, 3, (3, 3), (2, 2), (1, 1), rng)
    cx = rng.standard_normal((2, 5, 5))
    cr = rng.standard_normal((3, 3, 3))

    def conv_seed() -> None:
        conv.forward(cx)
        conv.backward(cr)

    results["conv2d"] = _check_module(
        conv, lambda: float((conv.forward(cx) * cr).sum()), conv_seed
    )

    # batchnorm in train mode (batch statistics path)
    bn = BatchNorm1d(4)
    bn.gamma.data[...] = rng.uniform(0.5, 1.5, size=4)
    bn.beta.data[...] = rng.standard_normal(4)
    bx = rng.standard_normal((6, 4))
    br = rng.standard_normal((6, 4))

    def bn_seed() -> None:
        bn.forward(bx)
        bn.backward(br)

    results["batchnorm"] = _check_module(
        bn, lambda: float((bn.forward(bx) * br).sum()), bn_seed
    )

    # full conv encoder composite
    encoder = ConvEncoder(ConvEncoderConfig.scaled_down(), rng)
    ex = rng.standard_normal((8, 3, 4))
    er = rng.standard_normal(encoder.out_dim)

    def encoder_seed() -> None:
        encoder.forward(ex)
        encoder.backward(er)

    results["conv_encoder"] = _check_module(
        encoder, lambda: float((encoder.forward(ex) * er).sum()), encoder_seed
    )

    # filtering and pairwise heads at scaled widths
    for name, config, width in (
        ("filter_head", HeadConfig.scaled_filter(48), 48),
        ("pair_head", HeadConfig.scaled_pair(96), 96),
    ):
        net = build_head(config, rng)
        hx = rng.standard_normal((4, width))
        ht = rng.integers(0, 2, size=4).astype(np.float64)

        def head_loss(net=net, hx=hx, ht=ht) -> float:
            return bce_loss(net.forward(hx)[:, 0], ht)

        def head_seed(net=net, hx=hx, ht=ht) -> None:
            probs = net.forward(hx)[:, 0]
            net.backward(bce_grad(probs, ht)[:, None])

        results[name] = _check_module(net, head_loss, head_seed)

    # the full joint model through question_loss
    docs = [" ".join(f"w{k:02d}" for k in range(i, i + 4)) for i in (0, 4, 8, 12)]
    tfidf = fit_tfidf(docs, V=16)
    provider = ToyHashProvider(PC(kind="toy_hash", D=8, seed=seed))
    layout = MetadataLayout(
        candidate_sources=("src",), entailed_sources=("faq", "src"), V=16, M=24
    )
    model = build_joint_model(
        layout,
        tfidf,
        ConvEncoderConfig.scaled_down(),
        rqe_dim=8,
        seed=seed,
        filter_config=HeadConfig.scaled_filter(48),
        pair_config=HeadConfig.scaled_pair(96),
    )
    question = QuestionRecord(
        question_id="gc-q",
        text="w00 w01 w02",
        candidates=(
            CandidateAnswer("gc-a", "w00 w01. W02 w03.", "src", 1, 1, 4),
            CandidateAnswer("gc-b", "w08 w09. W10.", "src", 2, 2, 1),
        ),
    )
    instance = EntailedInstance(
        sentences=("w00 w01 w04", "w02 w05"),
        source="faq",
        score=0.9,
        rqe_embedding=provider.rqe(question.text, question.text).embedding,
    )
    prepared = _PreparedQuestion(
        question_id=question.question_id,
        labels=np.array([1.0, 0.0]),
        ranks=[1, 2],
        instances=[
            _prepare_instance(
                model,
                instance,
                (0, 1),
                list(question.candidates),
                _candidate_sentences(question),
                provider,
            )
        ],
    )
    # Check the composed model at a generic parameter point: freshly
    # initialized eval-mode batchnorm leaves every zero-padded border cell
    # exactly on the ReLU kink, where finite differences cannot match any
    # subgradient choice. Randomizing the normalization state moves the
    # check off that measure-zero configuration.
    from .tensornet import _BatchNormBase

    state_rng = np.random.default_rng([seed, 17])
    for sub in model.modules():
        if isinstance(sub, _BatchNormBase):
            sub.gamma.data[...] = state_rng.uniform(0.8, 1.25, sub.channels)
            sub.beta.data[...] = 0.3 * state_rng.standard_normal(sub.channels)
            sub.running_mean = 0.2 * state_rng.standard_normal(sub.channels)
            sub.running_var = state_rng.uniform(0.7, 1.5, sub.channels)
    for name, tensor in model.named_params():
        if name.endswith("bias"):
            tensor.data += 0.1 * state_rng.standard_normal(tensor.data.shape)

    # The composed model runs with eval-mode normalization: the question batch
    # shares features across rows (the RQE embedding, the one-hots), and batch
    # statistics would cancel those directions to true-zero gradients that
    # finite differences cannot resolve. Train-mode batchnorm backward is
    # covered by the standalone and per-head checks above.
    results["full_model"] = _check_module(
        model,
        lambda: question_loss(model, prepared, alpha=2.0, compute_grads=False),
        lambda: question_loss(model, prepared, alpha=2.0, compute_grads=True),
        train_mode=False,
        sample_per_param=full_model_samples,
        seed=seed,
    )
    return results


def load_joint_model(path: str | Path) -> tuple[JointModel, dict]:
    meta, arrays = read_manifest(path)
    if meta.get("kind") != "joint":
        raise SchemaError(f"{path}: not a joint-model checkpoint")
    encoder_cfg = ConvEncoderConfig(
        in_channels=meta["encoder"]["in_channels"],
        layers=tuple(
            ConvLayerSpec(
                channels=s["channels"],
                kernel=tuple(s["kernel"]),
                stride=tuple(s["stride"]),
                padding=tuple(s["padding"]),
                batchnorm=s["batchnorm"],
            )
            for s in meta["encoder"]["layers"]
        ),
    )
    layout = MetadataLayout.from_dict(meta["layout"])
    tfidf = TfidfModel(
        vocabulary=list(meta["tfidf"]["vocabulary"]),
        idf=np.asarray(meta["tfidf"]["idf"], dtype=np.float64),
        V=int(meta["tfidf"]["V"]),
    )
    model = build_joint_model(
        layout,
        tfidf,
        encoder_cfg,
        rqe_dim=int(meta["rqe_dim"]),
        seed=int(meta["train"]["seed"]),
        filter_config=HeadConfig(tuple(meta["filter_widths"])),
        pair_config=HeadConfig(tuple(meta["pair_widths"])),
    )
    for name, tensor in model.named_params():
        stored = arrays.get(f"param.{name}")
        if stored is None or stored.shape != tensor.data.shape:
            raise SchemaError(f"{path}: checkpoint missing or misshaped {name!r}")
        tensor.data[...] = stored
    for name, buffer in model.named_buffers():
        stored = arrays.get(f"buffer.{name}")
        if stored is None or stored.shape != buffer.shape:
            raise SchemaError(f"{path}: checkpoint missing or misshaped buffer {name!r}")
        buffer[...] = stored
    model.eval()
    return model, meta
