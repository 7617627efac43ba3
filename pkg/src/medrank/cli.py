"""Command-line pipeline: ingest, features, training, prediction, evaluation.

Every command is seed-deterministic: identical inputs and seed produce
byte-identical outputs. Errors print a single machine-parseable JSON line to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import evalkit
from .config import RunConfig
from .corpus import (
    Dataset,
    derive_label,
    load_dataset,
    load_qa_corpus,
    save_dataset,
)
from .errors import ConfigError, MedrankError
from .joint import (
    ConvEncoderConfig,
    HeadConfig,
    TrainConfig,
    build_joint_model,
    fit_metadata_layout,
    gradient_check_battery,
    load_joint_model,
    predict_dataset,
    save_joint_model,
    train_joint,
)
from .preprocess import (
    AbbreviationDict,
    DEFAULT_GUARDS,
    expand_abbreviations,
    load_guard_list,
    normalize_answer,
)
from .providers import (
    Provider,
    ProviderConfig,
    TfidfCosineProvider,
    TfidfModel,
    build_provider,
    fit_tfidf,
    load_tfidf,
    save_tfidf,
)
from .retrieval import (
    EntailmentIndex,
    RetrievalConfig,
    build_cache,
    retrieve,
    save_cache,
)
from .synth import write_synth
from .tensornet import read_manifest, write_manifest

GRADCHECK_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    path = args.config or os.environ.get("MEDRANK_CONFIG")
    config = RunConfig.from_file(path) if path else RunConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        config.set_value(dotted.strip(), raw.strip())
    if args.seed is not None:
        config.train.seed = args.seed
        config.synth.seed = args.seed
    if args.scaled_down:
        config.scaled_down = True
    return config


def _corpus_texts(pairs) -> list[str]:
    texts = []
    for pair in pairs:
        texts.append(pair.question_text)
        texts.append(pair.answer_text)
    return texts


def _build_run_provider(
    config: RunConfig, corpus_pairs
) -> tuple[Provider, TfidfModel | None]:
    provider_config = config.provider_config()
    if provider_config.kind == "tfidf_cosine":
        provider_tfidf = fit_tfidf(
            _corpus_texts(corpus_pairs), V=provider_config.vocab_size
        )
        return TfidfCosineProvider(provider_config, provider_tfidf), provider_tfidf
    return build_provider(provider_config), None


def _provider_spec(config: ProviderConfig) -> dict:
    return {
        "kind": config.kind,
        "D": config.D,
        "seed": config.seed,
        "vocab_size": config.vocab_size,
        "path": config.path,
        "fallback_zero": config.fallback_zero,
    }


def _provider_from_spec(spec: dict, corpus_pairs) -> Provider:
    """Rebuild the provider a model was extracted/trained with."""
    provider_config = ProviderConfig(
        kind=spec["kind"],
        D=int(spec["D"]),
        seed=int(spec["seed"]),
        vocab_size=int(spec["vocab_size"]),
        path=spec.get("path"),
        fallback_zero=bool(spec.get("fallback_zero", False)),
    )
    if provider_config.kind == "tfidf_cosine":
        provider_tfidf = fit_tfidf(
            _corpus_texts(corpus_pairs), V=provider_config.vocab_size
        )
        return TfidfCosineProvider(provider_config, provider_tfidf)
    return build_provider(provider_config)


def _provider_from_meta(meta: dict) -> Provider:
    spec = meta["provider"]
    provider_config = ProviderConfig(
        kind=spec["kind"],
        D=int(spec["D"]),
        seed=int(spec["seed"]),
        vocab_size=int(spec["vocab_size"]),
    )
    if provider_config.kind == "tfidf_cosine":
        stored = meta.get("provider_tfidf")
        if stored is None:
            raise MedrankError("checkpoint lacks the provider TF-IDF model")
        model = TfidfModel(
            vocabulary=list(stored["vocabulary"]),
            idf=np.asarray(stored["idf"], dtype=np.float64),
            V=int(stored["V"]),
        )
        return TfidfCosineProvider(provider_config, model)
    return build_provider(provider_config)


def _extract_feature_rows(
    dataset: Dataset,
    index: EntailmentIndex,
    tfidf: TfidfModel,
    feature_config: bl.BaselineFeatureConfig,
    retrieval_config: RetrievalConfig,
    provider: Provider,
) -> list[dict]:
    """Baseline rows; below-threshold questions keep zero-filled slots."""
    rows = []
    for question in dataset.questions:
        entailed = retrieve(index, question.text, retrieval_config, fallback=False)
        for candidate in question.candidates:
            features = bl.assemble_baseline_features(
                question, candidate, entailed, tfidf, feature_config, provider
            )
            row = {
                "question_id": question.question_id,
                "answer_id": candidate.answer_id,
                "features": features.tolist(),
            }
            if candidate.reference_score is not None:
                row["label"] = derive_label(candidate.reference_score)
            rows.append(row)
    return rows


def _feature_config_from_meta(meta: dict) -> bl.BaselineFeatureConfig:
    spec = meta["feature_config"]
    return bl.BaselineFeatureConfig(
        N=int(spec["N"]),
        V=int(spec["V"]),
        D=int(spec["D"]),
        source_vocab=tuple(spec["source_vocab"]),
        T=float(spec["T"]),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_ingest(config: RunConfig, args) -> int:
    dataset = load_dataset(args.dataset, args.split)
    abbreviations = None
    abbrev_path = args.abbrev or config.paths.abbreviations
    if abbrev_path:
        abbreviations = AbbreviationDict.from_tsv(abbrev_path)
    guards = DEFAULT_GUARDS
    guard_path = args.guard or config.paths.guard_list
    if guard_path:
        guards = DEFAULT_GUARDS | load_guard_list(guard_path)
    questions = []
    for question in dataset.questions:
        text = question.text
        if abbreviations is not None and not args.no_expand_questions:
            text = expand_abbreviations(text, abbreviations)
        candidates = []
        for candidate in question.candidates:
            answer_abbrev = abbreviations if not args.no_expand_answers else None
            cleaned = normalize_answer(candidate.text, answer_abbrev, guards)
            candidates.append(
                dataclasses.replace(candidate, text=cleaned if cleaned else candidate.text)
            )
        questions.append(
            dataclasses.replace(question, text=text, candidates=tuple(candidates))
        )
    save_dataset(Dataset(split=dataset.split, questions=tuple(questions)), args.out)
    print(f"ingested {len(questions)} questions -> {args.out}")
    return 0


def cmd_fit_tfidf(config: RunConfig, args) -> int:
    pairs = load_qa_corpus(args.corpus)
    vocab_size = args.vocab_size or config.metadata_vocab_size()
    model = fit_tfidf([p.answer_text for p in pairs], V=vocab_size)
    save_tfidf(model, args.out)
    print(f"fitted tf-idf on {len(pairs)} documents, |vocab|={len(model.vocabulary)}")
    return 0


def cmd_build_index(config: RunConfig, args) -> int:
    dataset = load_dataset(args.dataset, args.split)
    pairs = load_qa_corpus(args.corpus)
    provider, _ = _build_run_provider(config, pairs)
    index = EntailmentIndex(pairs, provider)
    cache = build_cache(
        index,
        {q.question_id: q.text for q in dataset.questions},
        config.retrieval_config(),
    )
    save_cache(cache, args.out)
    print(f"cached retrieval scores for {len(cache)} questions -> {args.out}")
    return 0


def cmd_extract_features(config: RunConfig, args) -> int:
    dataset = load_dataset(args.dataset, args.split)
    pairs = load_qa_corpus(args.corpus)
    tfidf = load_tfidf(args.tfidf)
    provider, _ = _build_run_provider(config, pairs)
    index = EntailmentIndex(pairs, provider)
    retrieval_config = config.retrieval_config()
    layout_path = Path(args.layout)
    if layout_path.exists():
        spec = json.loads(layout_path.read_text(encoding="utf-8"))
        feature_config = _feature_config_from_meta({"feature_config": spec})
    else:
        feature_config = bl.BaselineFeatureConfig(
            N=retrieval_config.N,
            V=len(tfidf.vocabulary),
            D=config.provider_config().D,
            source_vocab=bl.fit_source_vocab(list(dataset.questions)),
            T=retrieval_config.T,
        )
        layout_path.write_text(
            json.dumps(
                {
                    "N": feature_config.N,
                    "V": feature_config.V,
                    "D": feature_config.D,
                    "T": feature_config.T,
                    "source_vocab": list(feature_config.source_vocab),
                    "slots": bl.feature_layout(feature_config),
                    "provider": _provider_spec(config.provider_config()),
                },
                sort_keys=True,
            ),
            encoding="utf-8",
        )
    rows = _extract_feature_rows(
        dataset, index, tfidf, feature_config, retrieval_config, provider
    )
    with Path(args.out).open("w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"extracted {len(rows)} feature rows -> {args.out}")
    return 0


def cmd_train_baseline(config: RunConfig, args) -> int:
    rows = bl.load_features(args.features)
    dataset = load_dataset(args.dataset, args.split)
    layout_spec = json.loads(Path(args.layout).read_text(encoding="utf-8"))
    features = np.asarray([row["features"] for row in rows], dtype=np.float64)
    labels = np.asarray([row.get("label") for row in rows], dtype=np.float64)
    logreg = bl.train_logreg_filter(
        features,
        labels,
        lr=config.baseline.lr,
        steps=config.baseline.steps,
        weight_decay=config.baseline.weight_decay,
    )
    by_question: dict[str, list[dict]] = {}
    for row in rows:
        by_question.setdefault(row["question_id"], []).append(row)
    groups = []
    for question in dataset.questions:
        qrows = by_question.get(question.question_id, [])
        if len(qrows) < 2:
            continue
        ranks = [
            question.candidate(row["answer_id"]).reference_rank for row in qrows
        ]
        groups.append(
            (
                np.asarray([row["features"] for row in qrows], dtype=np.float64),
                np.asarray(ranks),
            )
        )
    hinge = bl.train_pairwise_hinge(
        groups,
        lr=config.baseline.hinge_lr,
        steps=config.baseline.hinge_steps,
        weight_decay=config.baseline.weight_decay,
    )
    meta = {
        "kind": "baseline",
        "ranker": config.baseline.ranker,
        "feature_config": layout_spec,
    }
    arrays = {
        "logreg.weight": logreg.weight,
        "logreg.bias": np.array([logreg.bias]),
        "hinge.weight": hinge.weight,
    }
    write_manifest(args.out, meta, arrays)
    print(f"trained baseline on {len(rows)} rows -> {args.out}")
    return 0


def cmd_train_joint(config: RunConfig, args) -> int:
    dataset = load_dataset(args.dataset, "train")
    pairs = load_qa_corpus(args.corpus)
    provider, provider_tfidf = _build_run_provider(config, pairs)
    index = EntailmentIndex(pairs, provider)
    metadata_tfidf = fit_tfidf(
        [p.answer_text for p in pairs], V=config.metadata_vocab_size()
    )
    pack = config.scaled_down or args.pack_metadata
    layout = fit_metadata_layout(
        list(dataset.questions),
        pairs,
        V=len(metadata_tfidf.vocabulary),
        M=None if pack else 2032,
    )
    encoder_config = (
        ConvEncoderConfig.scaled_down()
        if config.scaled_down
        else ConvEncoderConfig.default()
    )
    rqe_dim = config.provider_config().D
    joint_dim = encoder_config.out_dim + rqe_dim + layout.M
    if config.scaled_down:
        filter_config = HeadConfig.scaled_filter(joint_dim)
        pair_config = HeadConfig.scaled_pair(2 * joint_dim)
    else:
        filter_config = HeadConfig.default_filter(joint_dim)
        pair_config = HeadConfig.default_pair(2 * joint_dim)
    train_config = TrainConfig(
        alpha=config.train.alpha,
        epochs=args.epochs or config.train.epochs,
        lr=config.train.lr,
        optimizer=config.train.optimizer,
        seed=config.train.seed,
        augmentation=config.train.augmentation,
        retrieval=config.retrieval_config(),
    )
    model = build_joint_model(
        layout,
        metadata_tfidf,
        encoder_config,
        rqe_dim=rqe_dim,
        seed=train_config.seed,
        filter_config=filter_config,
        pair_config=pair_config,
    )
    history = train_joint(model, dataset, index, provider, train_config)
    save_joint_model(
        model, args.out, train_config, config.provider_config(), provider_tfidf
    )
    first = float(np.mean(history[0]))
    last = float(np.mean(history[-1]))
    print(
        f"trained joint model for {train_config.epochs} epochs "
        f"(mean loss {first:.4f} -> {last:.4f}) -> {args.out}"
    )
    return 0


def cmd_predict(config: RunConfig, args) -> int:
    meta, arrays = read_manifest(args.model)
    dataset = load_dataset(args.dataset, args.split)
    pairs = load_qa_corpus(args.corpus)
    if meta["kind"] == "joint":
        model, meta = load_joint_model(args.model)
        provider = _provider_from_meta(meta)
        index = EntailmentIndex(pairs, provider)
        retrieval_config = RetrievalConfig(
            N=int(meta["train"]["retrieval_N"]), T=float(meta["train"]["retrieval_T"])
        )
        predictions = predict_dataset(model, dataset, index, provider, retrieval_config)
    elif meta["kind"] == "baseline":
        feature_config = _feature_config_from_meta(meta)
        provider_spec = meta["feature_config"].get("provider")
        if provider_spec is not None:
            provider = _provider_from_spec(provider_spec, pairs)
        else:
            provider, _ = _build_run_provider(config, pairs)
        index = EntailmentIndex(pairs, provider)
        tfidf = load_tfidf(args.tfidf)
        retrieval_config = RetrievalConfig(N=feature_config.N, T=feature_config.T)
        logreg = bl.LogregModel(
            weight=arrays["logreg.weight"], bias=float(arrays["logreg.bias"][0])
        )
        hinge = bl.HingeRankModel(weight=arrays["hinge.weight"])
        ranker = args.ranker or meta.get("ranker", "logreg")
        predictions = []
        for question in dataset.questions:
            entailed = retrieve(index, question.text, retrieval_config, fallback=False)
            features = np.asarray(
                [
                    bl.assemble_baseline_features(
                        question, c, entailed, tfidf, feature_config, provider
                    )
                    for c in question.candidates
                ]
            )
            probs = bl.predict_logreg(logreg, features)
            scores = probs if ranker == "logreg" else bl.hinge_score(hinge, features)
            ids = [c.answer_id for c in question.candidates]
            system_ranks = [c.system_rank for c in question.candidates]
            ranking = bl.rank_by_scores(ids, scores, system_ranks)
            relevant = tuple(
                aid for aid in ranking if probs[ids.index(aid)] >= 0.5
            )
            predictions.append(
                evalkit.Prediction(
                    question_id=question.question_id,
                    ranking=tuple(ranking),
                    relevant=relevant,
                    scores={aid: float(scores[ids.index(aid)]) for aid in ids},
                )
            )
    else:
        raise MedrankError(f"unknown model kind {meta.get('kind')!r}")
    evalkit.save_predictions(predictions, args.out)
    print(f"wrote predictions for {len(predictions)} questions -> {args.out}")
    return 0


def cmd_evaluate(config: RunConfig, args) -> int:
    predictions = evalkit.load_predictions(args.predictions)
    dataset = load_dataset(args.dataset, args.split)
    report = evalkit.evaluate(predictions, dataset)
    print(
        f"accuracy={report.accuracy:.4f} precision={report.precision:.4f} "
        f"mrr={report.mrr:.4f} mean_rho={report.mean_rho:.4f} "
        f"mean_rho_full={report.mean_rho_full:.4f}"
    )
    if args.out:
        evalkit.save_report(report, args.out)
    return 0


def cmd_analyze(config: RunConfig, args) -> int:
    predictions = evalkit.load_predictions(args.predictions)
    dataset = load_dataset(args.dataset, args.split)
    buckets = evalkit.analyze(predictions, dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "buckets.json").write_text(
        json.dumps(buckets, sort_keys=True, indent=2), encoding="utf-8"
    )
    written = evalkit.save_bucket_csvs(buckets, out_dir)
    print(f"wrote {len(written) + 1} analysis files -> {out_dir}")
    return 0


def cmd_gradcheck(config: RunConfig, args) -> int:
    results = gradient_check_battery(seed=config.train.seed)
    worst = max(results.values())
    for name in sorted(results):
        print(f"gradcheck {name}: max_rel_err={results[name]:.3e}")
    ok = worst <= GRADCHECK_TOLERANCE
    print(f"gradcheck overall: max_rel_err={worst:.3e} "
          f"{'OK' if ok else 'FAIL'} (tolerance {GRADCHECK_TOLERANCE:.0e})")
    return 0 if ok else 1


def cmd_synth(config: RunConfig, args) -> int:
    paths = write_synth(config.synth_config(), args.out_dir)
    for name in sorted(paths):
        print(f"synth {name}: {paths[name]}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medrank",
        description="Filtering and re-ranking of candidate answers to medical questions.",
    )
    parser.add_argument("--config", help="config file (fallback: $MEDRANK_CONFIG)")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a dotted config key",
    )
    parser.add_argument("--seed", type=int, help="override train/synth seeds")
    parser.add_argument(
        "--scaled-down", action="store_true", help="use the scaled-down test configuration"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate and normalize a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.add_argument("--abbrev")
    p.add_argument("--guard")
    p.add_argument("--no-expand-questions", action="store_true")
    p.add_argument("--no-expand-answers", action="store_true")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("fit-tfidf", help="fit the TF-IDF model on corpus answers")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(handler=cmd_fit_tfidf)

    p = sub.add_parser("build-index", help="cache retrieval scores for a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_build_index)

    p = sub.add_parser("extract-features", help="baseline feature vectors")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tfidf", required=True)
    p.add_argument("--layout", required=True, help="layout JSON (fit when missing)")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_extract_features)

    p = sub.add_parser("train-baseline", help="logistic filter + hinge ranker")
    p.add_argument("--features", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--layout", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_train_baseline)

    p = sub.add_parser("train-joint", help="train the multi-task joint model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument(
        "--pack-metadata",
        action="store_true",
        help="size the metadata block without padding",
    )
    p.set_defaults(handler=cmd_train_joint)

    p = sub.add_parser("predict", help="run a trained model over a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--corpus", required=True)
    p.add_argument("--tfidf", help="TF-IDF model (baseline checkpoints)")
    p.add_argument("--ranker", choices=["logreg", "hinge"])
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against references")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("analyze", help="error-analysis bucket tables")
    p.add_argument("--predictions", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", default="validation")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("synth", help="generate a synthetic dataset + corpus")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(handler=cmd_synth)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config(args)
        return args.handler(config, args)
    except (MedrankError, OSError, KeyError, ValueError) as exc:
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 2


if __name__ == "__main__":
    sys.exit(main())
