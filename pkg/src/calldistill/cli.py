"""Command line pipeline driver.

One subcommand per stage, each of which validates its inputs before
touching the output directory, takes an exclusive lock while writing, and
leaves a ``manifest_<stage>.json`` recording checksums of everything read
and written. Exit codes: 0 success, 1 configuration problem, 2 runtime
failure, 64 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import analytics, corpus as corpus_mod, features as features_mod
from . import neural, reporting, teacher as teacher_mod, topics as topics_mod
from . import training as training_mod
from .analytics import FilterSpec, FilterThresholds
from .config import RunConfig, dump_config
from .embeddings import (
    EmbeddingProvider,
    load_embeddings,
    make_embedding_endpoint,
    save_embeddings,
)
from .errors import CalldistillError, ConfigError
from .manifest import ManifestBuilder, OutputLock, write_json_atomic
from .teacher import RetryPolicy, make_teacher_endpoint

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_USAGE = 64

# default artifact names under the output directory
F_CORPUS = "corpus.jsonl"
F_SAMPLE = {"discovery": "sample_discovery.json", "labeling": "sample_labeling.json"}
F_TOPICS = "topics.json"
F_TOPIC_STATS = "topic_stats.json"
F_DISCOVERY_LABELS = "labels_discovery.jsonl"
F_TOPICS_REDUCED = "topics_reduced.json"
F_REVIEW_SHEET = "review_sheet.csv"
F_CLUSTER_REPORT = "cluster_report.json"
F_ELBOW = "elbow.json"
F_LABELS = "labels.jsonl"
F_ATTRITION = "attrition.json"
F_LABEL_STATE = "label_state"
F_SPLIT_PLAN = "split_plan.json"
F_SEARCH_RESULT = "search_result.json"
F_TOPIC_MODEL = "topic_model.bin"
F_SENTIMENT_MODEL = "sentiment_model.bin"
F_SENTIMENT_REPORT = "sentiment_report.json"
F_EMBED_CACHE = "embeddings.bin"
F_SCORES = "scores.csv"
F_PANEL = "panel.csv"
F_IC_CSV = "ic.csv"
F_IC_SERIES = "ic_series.json"
F_FILTERED = "filtered.csv"
F_REVIEW_SAMPLE = "review_sample.csv"
F_REVIEW_ACCURACY = "review_accuracy.json"
F_REPORT_DIR = "report"
F_CONFIG_SNAPSHOT = "config_effective.json"


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, object] = {}
    if getattr(args, "out", None):
        overrides["paths.out_dir"] = args.out
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return RunConfig.from_file(getattr(args, "config", None), overrides)


def _in_path(cfg: RunConfig, name: str, default_name: str) -> Path:
    """Resolve an input artifact: explicit path wins, else the out_dir default."""
    explicit = cfg.path(name)
    path = explicit if explicit is not None else cfg.out_dir / default_name
    if not path.exists():
        raise ConfigError(
            f"required input {name!r} not found at {path}; set paths.{name} "
            "or run the producing stage first"
        )
    return path


def _opt_path(cfg: RunConfig, name: str, default_name: str) -> Path | None:
    explicit = cfg.path(name)
    path = explicit if explicit is not None else cfg.out_dir / default_name
    return path if path.exists() else None


def _out_path(cfg: RunConfig, name: str, default_name: str) -> Path:
    explicit = cfg.path(name)
    return explicit if explicit is not None else cfg.out_dir / default_name


def _manifest(cfg: RunConfig, stage: str) -> ManifestBuilder:
    return ManifestBuilder(
        stage=stage,
        out_dir=cfg.out_dir,
        deterministic=bool(cfg["deterministic"]),
        config_snapshot=cfg.snapshot(),
    )


def _teacher_endpoint(cfg: RunConfig) -> teacher_mod.TeacherEndpoint:
    section = cfg.section("teacher")
    mock = section["mock"]
    kwargs = {
        "seed": mock["seed"],
        "bad_format_rate": mock["bad_format_rate"],
        "unknown_topic_rate": mock["unknown_topic_rate"],
        "bad_sentiment_rate": mock["bad_sentiment_rate"],
    }
    if mock["topics"]:
        kwargs["topics"] = tuple(mock["topics"])
    return make_teacher_endpoint(section["endpoint"], model=section["model"], **kwargs)


def _retry_policy(cfg: RunConfig) -> RetryPolicy:
    section = cfg.section("teacher")
    return RetryPolicy(
        max_retries=int(section["max_retries"]),
        backoff_base=float(section["backoff_base"]),
        parallel=int(section["parallel"]),
    )


def _embedding_provider(cfg: RunConfig) -> EmbeddingProvider:
    section = cfg.section("embedding")
    store = None
    store_path = cfg.path("embeddings")
    if store_path is not None and store_path.exists():
        store = load_embeddings(store_path)
    endpoint = make_embedding_endpoint(section["endpoint"], dim=int(section["dim"]))
    return EmbeddingProvider(
        store=store, endpoint=endpoint, normalize=bool(section["normalize"])
    )


def _load_corpus(cfg: RunConfig) -> tuple[corpus_mod.Corpus, Path]:
    path = _in_path(cfg, "corpus", F_CORPUS)
    return corpus_mod.ingest_transcripts(path), path


def _sentence_meta(corpus: corpus_mod.Corpus) -> dict[str, tuple[str, str]]:
    """sentence id -> (month, sector) for the trend breakdowns."""
    meta: dict[str, tuple[str, str]] = {}
    for transcript in corpus.iter_transcripts():
        pair = (transcript.month, transcript.sector)
        for sentence in transcript.sentences:
            meta[sentence.sentence_id] = pair
    return meta


def _doc_meta(corpus: corpus_mod.Corpus) -> dict[str, tuple[str, str]]:
    """doc id -> (company_id, month)."""
    return {
        t.doc_id: (t.company_id, t.month) for t in corpus.iter_transcripts()
    }


def _batched_probabilities(model: neural.MlpModel, x: np.ndarray) -> np.ndarray:
    chunks = []
    for start in range(0, x.shape[0], 4096):
        logits = neural.forward(model, x[start : start + 4096], mode="eval")
        chunks.append(neural.softmax(logits))
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, model.num_classes))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace, cfg: RunConfig) -> int:
    raw_path = cfg.path("corpus")
    if args.input:
        raw_path = Path(args.input)
    if raw_path is None or not raw_path.exists():
        raise ConfigError("ingest needs an existing input file (positional or paths.corpus)")
    corpus = corpus_mod.ingest_transcripts(raw_path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        out = cfg.out_dir / F_CORPUS
        corpus_mod.write_corpus(corpus, out)
        manifest = _manifest(cfg, "ingest")
        manifest.add_input("raw", raw_path)
        manifest.add_output("corpus", out)
        manifest.note("documents", len(corpus.transcripts))
        manifest.note("sentences", corpus.num_sentences)
        manifest.write()
    logger.info(
        "ingested %d documents, %d sentences", len(corpus.transcripts),
        corpus.num_sentences,
    )
    return EXIT_OK


def cmd_sample(args: argparse.Namespace, cfg: RunConfig) -> int:
    role = args.role
    spec = cfg.section("sampling")[role]
    corpus, corpus_path = _load_corpus(cfg)
    exclude: list[str] = []
    if role == "labeling" and spec["exclude_discovery"]:
        disc = _opt_path(cfg, "sample_discovery", F_SAMPLE["discovery"])
        if disc is not None:
            exclude = list(corpus_mod.load_sample(disc).sentence_ids)
    sample = corpus_mod.sample_sentences(
        corpus,
        fraction=spec["fraction"] if spec["count"] is None else None,
        count=spec["count"],
        seed=int(spec["seed"]),
        exclude=exclude,
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        out = _out_path(cfg, f"sample_{role}", F_SAMPLE[role])
        corpus_mod.save_sample(sample, out)
        manifest = _manifest(cfg, f"sample_{role}")
        manifest.add_input("corpus", corpus_path)
        manifest.add_output("sample", out)
        manifest.note("sampled", len(sample.sentence_ids))
        manifest.note("excluded", len(exclude))
        manifest.write()
    logger.info("sampled %d sentences for %s", len(sample.sentence_ids), role)
    return EXIT_OK


def cmd_discover_topics(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus, corpus_path = _load_corpus(cfg)
    sample_path = _in_path(cfg, "sample_discovery", F_SAMPLE["discovery"])
    sample = corpus_mod.load_sample(sample_path)
    endpoint = _teacher_endpoint(cfg)
    policy = _retry_policy(cfg)
    batch = int(cfg.section("teacher")["batch_size"])

    topics = teacher_mod.discover_topics(corpus, sample, endpoint, policy, batch)
    # frequency pass: classify the same sample against the fresh list
    labels, attrition = teacher_mod.label_dataset(
        corpus, sample, topics, endpoint, policy,
        with_sentiment=False, batch_size=batch,
        source=teacher_mod.LabelSource.PRELIMINARY_TEACHER.value,
    )
    stats = topics_mod.compute_topic_stats(labels)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        topics_out = _out_path(cfg, "topics", F_TOPICS)
        stats_out = _out_path(cfg, "topic_stats", F_TOPIC_STATS)
        labels_out = cfg.out_dir / F_DISCOVERY_LABELS
        topics_mod.save_topics(topics, topics_out)
        topics_mod.save_topic_stats(stats, stats_out)
        teacher_mod.save_labels(labels, labels_out)
        manifest = _manifest(cfg, "discover_topics")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("sample", sample_path)
        manifest.add_output("topics", topics_out)
        manifest.add_output("topic_stats", stats_out)
        manifest.add_output("discovery_labels", labels_out)
        manifest.note("topics_found", len(topics))
        manifest.note("attrition", attrition.to_dict())
        manifest.write()
    logger.info("discovered %d topics", len(topics))
    return EXIT_OK


def cmd_reduce_topics(args: argparse.Namespace, cfg: RunConfig) -> int:
    section = cfg.section("reduction")
    method = section["method"]
    topics_path = _in_path(cfg, "topics", F_TOPICS)
    stats_path = _in_path(cfg, "topic_stats", F_TOPIC_STATS)
    topics = topics_mod.load_topics(topics_path)
    stats = topics_mod.load_topic_stats(stats_path)

    cluster_report = None
    elbow = None
    if method == "threshold":
        mode = "cumulative" if section["cumulative"] else "per_topic"
        reduced = topics_mod.reduce_by_threshold(
            stats, float(section["threshold"]), mode=mode
        )
    elif method == "cluster":
        provider = _embedding_provider(cfg)
        vectors = {t: provider.get(t) for t in topics}
        k = int(section["k"])
        clusters = topics_mod.cluster_topics(
            topics, vectors, k, int(section["seed"]), stats=stats
        )
        reduced = [
            clusters.representatives[j] for j in sorted(clusters.representatives)
        ]
        cluster_report = clusters
        k_max = min(int(section["elbow_max_k"]), len(topics))
        if k_max >= 2:
            elbow = topics_mod.elbow_curve(
                topics, vectors, list(range(2, k_max + 1)), int(section["seed"])
            )
            for k_value, objective in elbow:
                logger.info("elbow k=%d objective=%.6f", k_value, objective)
    else:
        reduced = topics_mod.reduce_by_teacher(topics, _teacher_endpoint(cfg))

    examples: dict[str, list[str]] = {}
    labels_path = _opt_path(cfg, "labels", F_DISCOVERY_LABELS)
    corpus_path = _opt_path(cfg, "corpus", F_CORPUS)
    if labels_path is not None and corpus_path is not None:
        corpus = corpus_mod.ingest_transcripts(corpus_path)
        for label in teacher_mod.load_labels(labels_path):
            if label.topic and label.sentence_id in corpus:
                examples.setdefault(label.topic, []).append(
                    corpus.text_of(label.sentence_id)
                )

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        out = _out_path(cfg, "topics", F_TOPICS_REDUCED) if cfg.path("topics") is None \
            else cfg.out_dir / F_TOPICS_REDUCED
        topics_mod.save_topics(reduced, out)
        manifest = _manifest(cfg, "reduce_topics")
        manifest.add_input("topics", topics_path)
        manifest.add_input("topic_stats", stats_path)
        manifest.add_output("topics_reduced", out)
        manifest.note("method", method)
        manifest.note("kept", len(reduced))
        manifest.note("dropped", len(topics) - len(reduced))
        if cluster_report is not None:
            report_out = cfg.out_dir / F_CLUSTER_REPORT
            topics_mod.save_cluster_report(cluster_report, report_out)
            manifest.add_output("cluster_report", report_out)
        if elbow is not None:
            elbow_out = cfg.out_dir / F_ELBOW
            write_json_atomic(
                elbow_out, [{"k": k, "objective": obj} for k, obj in elbow]
            )
            manifest.add_output("elbow", elbow_out)
        sheet_out = cfg.out_dir / F_REVIEW_SHEET
        kept_stats = [s for s in stats if s.topic in set(reduced)]
        topics_mod.export_review_sheet(
            sheet_out, kept_stats, examples,
            examples_per_topic=int(section["review_examples"]),
            seed=int(section["seed"]),
        )
        manifest.add_output("review_sheet", sheet_out)
        manifest.write()
    logger.info("reduced %d topics to %d via %s", len(topics), len(reduced), method)
    return EXIT_OK


def cmd_label(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus, corpus_path = _load_corpus(cfg)
    sample_path = _in_path(cfg, "sample_labeling", F_SAMPLE["labeling"])
    sample = corpus_mod.load_sample(sample_path)
    topics_path = _opt_path(cfg, "topics", F_TOPICS_REDUCED)
    if topics_path is None:
        topics_path = _in_path(cfg, "topics", F_TOPICS)
    topics = topics_mod.load_topics(topics_path)
    section = cfg.section("teacher")
    endpoint = _teacher_endpoint(cfg)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        state_dir = cfg.out_dir / F_LABEL_STATE
        state_dir.mkdir(exist_ok=True)
        labels, attrition = teacher_mod.label_dataset(
            corpus, sample, topics, endpoint, _retry_policy(cfg),
            with_sentiment=bool(section["with_sentiment"]),
            batch_size=int(section["batch_size"]),
            state_dir=state_dir,
        )
        labels_out = _out_path(cfg, "labels", F_LABELS)
        teacher_mod.save_labels(labels, labels_out)
        attrition_out = cfg.out_dir / F_ATTRITION
        write_json_atomic(attrition_out, attrition.to_dict())
        manifest = _manifest(cfg, "label")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("sample", sample_path)
        manifest.add_input("topics", topics_path)
        manifest.add_output("labels", labels_out)
        manifest.add_output("attrition", attrition_out)
        manifest.note("attrition", attrition.to_dict())
        manifest.write()
    logger.info(
        "labeled %d of %d sentences (%d discarded)",
        attrition.well_formed, attrition.requested,
        attrition.discarded_format + attrition.discarded_unknown_topic,
    )
    return EXIT_OK


def cmd_train_topic(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus, corpus_path = _load_corpus(cfg)
    labels_path = _in_path(cfg, "labels", F_LABELS)
    topics_path = _opt_path(cfg, "topics", F_TOPICS_REDUCED)
    if topics_path is None:
        topics_path = _in_path(cfg, "topics", F_TOPICS)
    labels = [l for l in teacher_mod.load_labels(labels_path) if l.topic]
    classes = sorted(topics_mod.load_topics(topics_path))
    provider = _embedding_provider(cfg)
    texts = {l.sentence_id: corpus.text_of(l.sentence_id) for l in labels}
    dataset, dropped = training_mod.build_dataset(labels, texts, provider, classes)
    plan = training_mod.make_split_plan(
        {sid: int(dataset.y[i]) for i, sid in enumerate(dataset.ids)},
        seed=int(cfg.section("split")["seed"]),
    )
    search_cfg = cfg.section("search")
    result = training_mod.random_search(
        dataset, plan,
        trials=int(search_cfg["trials"]), seed=int(search_cfg["seed"]),
        max_epochs=int(search_cfg["max_epochs"]),
        patience=int(search_cfg["patience"]),
        averaging=search_cfg["averaging"],
    )
    model, report = training_mod.final_retrain(
        result.best_config, dataset, seed=int(search_cfg["seed"]),
        max_epochs=int(search_cfg["max_epochs"]),
        patience=int(search_cfg["patience"]),
        split=plan, averaging=search_cfg["averaging"],
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        model_out = _out_path(cfg, "topic_model", F_TOPIC_MODEL)
        neural.save_checkpoint(model, model_out)
        search_out = cfg.out_dir / F_SEARCH_RESULT
        training_mod.save_search_result(result, search_out)
        plan_out = cfg.out_dir / F_SPLIT_PLAN
        training_mod.save_split_plan(plan, plan_out)
        cache_out = cfg.out_dir / F_EMBED_CACHE
        provider.save_cache(cache_out)
        manifest = _manifest(cfg, "train_topic")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("labels", labels_path)
        manifest.add_input("topics", topics_path)
        manifest.add_output("topic_model", model_out)
        manifest.add_output("search_result", search_out)
        manifest.add_output("split_plan", plan_out)
        manifest.add_output("embedding_cache", cache_out)
        manifest.note("dropped_labels", dropped)
        manifest.note("final_val_f1", report.best_val_f1)
        best = max((t.f1 for t in result.trials), default=-1.0)
        manifest.note("search_best_f1", best)
        manifest.write()
    logger.info(
        "topic model trained: search best F1 %.4f, final val F1 %.4f",
        max((t.f1 for t in result.trials), default=-1.0), report.best_val_f1,
    )
    return EXIT_OK


def cmd_train_sentiment(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus, corpus_path = _load_corpus(cfg)
    labels_path = _in_path(cfg, "labels", F_LABELS)
    section = cfg.section("sentiment")
    approach = section["approach"]
    provider = _embedding_provider(cfg)
    classes = list(features_mod.SENTIMENT_ORDER)

    def dataset_from(path: Path) -> training_mod.Dataset:
        labels = [l for l in teacher_mod.load_labels(path) if l.sentiment]
        texts = {l.sentence_id: corpus.text_of(l.sentence_id) for l in labels}
        ds, _ = training_mod.build_dataset(
            labels, texts, provider, classes, label_field="sentiment"
        )
        return ds

    finetune = dataset_from(labels_path)
    pretrain = None
    pretrain_path = None
    if approach == "transfer":
        pretrain_path = _in_path(cfg, "pretrain_labels", "labels_pretrain.jsonl")
        pretrain = dataset_from(pretrain_path)
    plan = training_mod.SentimentTrainPlan(
        approach=approach,
        config=neural.MlpConfig.from_dict(section["config"]),
    )
    model, reports = training_mod.train_sentiment(
        plan, finetune, pretrain, seed=int(section["seed"]),
        max_epochs=int(section["max_epochs"]), patience=int(section["patience"]),
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        model_out = _out_path(cfg, "sentiment_model", F_SENTIMENT_MODEL)
        neural.save_checkpoint(model, model_out)
        report_out = cfg.out_dir / F_SENTIMENT_REPORT
        write_json_atomic(
            report_out,
            {"approach": approach,
             "stages": {name: r.to_dict() for name, r in reports.items()}},
        )
        manifest = _manifest(cfg, "train_sentiment")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("labels", labels_path)
        if pretrain_path is not None:
            manifest.add_input("pretrain_labels", pretrain_path)
        manifest.add_output("sentiment_model", model_out)
        manifest.add_output("sentiment_report", report_out)
        manifest.note("approach", approach)
        manifest.write()
    final = reports.get("finetune") or reports.get("direct")
    logger.info("sentiment model trained (%s): val F1 %.4f", approach,
                final.best_val_f1 if final else float("nan"))
    return EXIT_OK


def cmd_score(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus, corpus_path = _load_corpus(cfg)
    topic_model_path = _in_path(cfg, "topic_model", F_TOPIC_MODEL)
    sentiment_model_path = _in_path(cfg, "sentiment_model", F_SENTIMENT_MODEL)
    topic_model = neural.load_checkpoint(topic_model_path)
    sentiment_model = neural.load_checkpoint(sentiment_model_path)
    provider = _embedding_provider(cfg)

    sentences = corpus.sentences_sorted()
    texts = [s.text for s in sentences]
    x = provider.get_many(texts).astype(np.float64)
    topic_probs = _batched_probabilities(topic_model, x)
    sent_probs = _batched_probabilities(sentiment_model, x)
    sent_index = [
        sentiment_model.classes.index(name) for name in features_mod.SENTIMENT_ORDER
    ]

    scores: list[features_mod.SentenceScore] = []
    doc_of: dict[str, str] = {}
    for i, sentence in enumerate(sentences):
        t_dist = {
            cls: float(topic_probs[i, j])
            for j, cls in enumerate(topic_model.classes)
        }
        s_tuple = tuple(float(sent_probs[i, j]) for j in sent_index)
        scores.append(features_mod.SentenceScore(
            sentence_id=sentence.sentence_id,
            topic_distribution=t_dist,
            predicted_topic=topic_model.classes[int(np.argmax(topic_probs[i]))],
            sentiment_distribution=s_tuple,
            predicted_sentiment=features_mod.SENTIMENT_ORDER[
                int(np.argmax(s_tuple))
            ],
        ))
        doc_of[sentence.sentence_id] = sentence.doc_id
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        out = _out_path(cfg, "scores", F_SCORES)
        features_mod.write_scores_csv(scores, doc_of, out)
        manifest = _manifest(cfg, "score")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("topic_model", topic_model_path)
        manifest.add_input("sentiment_model", sentiment_model_path)
        manifest.add_output("scores", out)
        manifest.note("sentences", len(scores))
        manifest.write()
    logger.info("scored %d sentences", len(scores))
    return EXIT_OK


def cmd_features(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus, corpus_path = _load_corpus(cfg)
    scores_path = _in_path(cfg, "scores", F_SCORES)
    scores, doc_of = features_mod.load_scores_csv(scores_path)
    section = cfg.section("features")
    by_doc: dict[str, list[features_mod.SentenceScore]] = {}
    for score in scores:
        by_doc.setdefault(doc_of[score.sentence_id], []).append(score)
    meta = _doc_meta(corpus)
    docs = []
    for doc_id in sorted(by_doc):
        company_id, month = meta[doc_id]
        docs.append(features_mod.compute_document_features(
            doc_id, company_id, month, by_doc[doc_id],
            mode=section["mode"], sentiment_mode=section["sentiment_mode"],
        ))
    panel = features_mod.monthly_aggregate(docs)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        out = _out_path(cfg, "panel", F_PANEL)
        features_mod.write_panel_csv(panel, out)
        manifest = _manifest(cfg, "features")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("scores", scores_path)
        manifest.add_output("panel", out)
        manifest.note("documents", len(docs))
        manifest.note("rows", len(panel.rows))
        manifest.note("mode", section["mode"])
        manifest.write()
    logger.info("aggregated %d documents into %d company-month rows",
                len(docs), len(panel.rows))
    return EXIT_OK


def cmd_ic(args: argparse.Namespace, cfg: RunConfig) -> int:
    panel_path = _in_path(cfg, "panel", F_PANEL)
    returns_path = cfg.path("returns")
    if returns_path is None or not returns_path.exists():
        raise ConfigError("ic needs paths.returns pointing at a returns CSV")
    panel = features_mod.load_panel_csv(panel_path)
    returns = analytics.load_returns_csv(returns_path)
    section = cfg.section("ic")
    series = analytics.cumulative_ic(
        panel, section["feature"], returns,
        horizon=int(section["horizon"]), method=section["method"],
        min_obs=int(section["min_obs"]),
    )
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        csv_out = cfg.out_dir / F_IC_CSV
        analytics.write_ic_csv(series, csv_out)
        series_out = cfg.out_dir / F_IC_SERIES
        write_json_atomic(series_out, _ic_series_to_dict(series))
        manifest = _manifest(cfg, "ic")
        manifest.add_input("panel", panel_path)
        manifest.add_input("returns", returns_path)
        manifest.add_output("ic_csv", csv_out)
        manifest.add_output("ic_series", series_out)
        scored = [p for p in series.points if p.ic is not None]
        manifest.note("months_scored", len(scored))
        manifest.note("final_cumulative",
                      series.points[-1].cumulative if series.points else 0.0)
        manifest.write()
    final = series.points[-1].cumulative if series.points else 0.0
    logger.info("IC over %d months, final cumulative %.4f", len(series.points), final)
    return EXIT_OK


def _ic_series_to_dict(series: analytics.IcSeries) -> dict:
    return {
        "feature": series.feature,
        "method": series.method,
        "horizon": series.horizon,
        "min_obs": series.min_obs,
        "points": [
            {"period": p.period, "ic": p.ic, "cumulative": p.cumulative,
             "n_obs": p.n_obs, "skipped_reason": p.skipped_reason}
            for p in series.points
        ],
    }


def _ic_series_from_dict(obj: dict) -> analytics.IcSeries:
    return analytics.IcSeries(
        feature=obj["feature"], method=obj["method"], horizon=obj["horizon"],
        min_obs=obj["min_obs"],
        points=[analytics.IcPoint(
            period=p["period"], ic=p["ic"], cumulative=p["cumulative"],
            n_obs=p["n_obs"], skipped_reason=p["skipped_reason"],
        ) for p in obj["points"]],
    )


def cmd_filter(args: argparse.Namespace, cfg: RunConfig) -> int:
    scores_path = _in_path(cfg, "scores", F_SCORES)
    scores, _ = features_mod.load_scores_csv(scores_path)
    section = cfg.section("filter")
    thresholds = FilterThresholds(
        theta_hi=float(section["theta_hi"]),
        theta_med=float(section["theta_med"]),
        theta_lo=float(section["theta_lo"]),
    )
    kept: dict[str, list[str]] = {}
    for target in section["targets"]:
        spec = FilterSpec.for_target(target)
        kept[target] = analytics.filter_corpus(scores, spec, thresholds)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        out = _out_path(cfg, "filtered", F_FILTERED)
        _write_filtered_csv(out, kept)
        manifest = _manifest(cfg, "filter")
        manifest.add_input("scores", scores_path)
        manifest.add_output("filtered", out)
        for target in sorted(kept):
            manifest.note(f"kept_{target}", len(kept[target]))
        manifest.write()
    for target in sorted(kept):
        logger.info("filter %s kept %d sentences", target, len(kept[target]))
    return EXIT_OK


def _write_filtered_csv(path: Path, kept: dict[str, list[str]]) -> None:
    import csv as _csv

    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = _csv.writer(fh, lineterminator="\n")
        writer.writerow(["target", "sentence_id"])
        for target in sorted(kept):
            for sid in kept[target]:
                writer.writerow([target, sid])


def _read_filtered_csv(path: Path) -> dict[str, list[str]]:
    import csv as _csv

    kept: dict[str, list[str]] = {}
    with path.open("r", encoding="utf-8", newline="") as fh:
        for rec in _csv.DictReader(fh):
            kept.setdefault(rec["target"], []).append(rec["sentence_id"])
    return kept


def cmd_trends(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus, corpus_path = _load_corpus(cfg)
    scores_path = _in_path(cfg, "scores", F_SCORES)
    scores, _ = features_mod.load_scores_csv(scores_path)
    scores_by_id = {s.sentence_id: s for s in scores}
    meta = _sentence_meta(corpus)
    section = cfg.section("trends")

    filtered_path = _opt_path(cfg, "filtered", F_FILTERED)
    if filtered_path is not None:
        kept = _read_filtered_csv(filtered_path)
    else:
        thresholds_cfg = cfg.section("filter")
        thresholds = FilterThresholds(
            theta_hi=float(thresholds_cfg["theta_hi"]),
            theta_med=float(thresholds_cfg["theta_med"]),
            theta_lo=float(thresholds_cfg["theta_lo"]),
        )
        kept = {
            target: analytics.filter_corpus(
                scores, FilterSpec.for_target(target), thresholds
            )
            for target in thresholds_cfg["targets"]
        }
    trend_points = {
        target: analytics.negativity_trend(
            ids, scores_by_id, meta, grouping=section["grouping"]
        )
        for target, ids in kept.items()
    }
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        manifest = _manifest(cfg, "trends")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("scores", scores_path)
        if filtered_path is not None:
            manifest.add_input("filtered", filtered_path)
        for target in sorted(trend_points):
            out = cfg.out_dir / f"trends_{target}.csv"
            analytics.write_trend_csv(trend_points[target], out)
            manifest.add_output(f"trends_{target}", out)
        manifest.note("grouping", section["grouping"])
        manifest.write()
    logger.info("wrote negativity trends for %d targets", len(trend_points))
    return EXIT_OK


def cmd_validate_sample(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.review:
        review_path = Path(args.review)
        if not review_path.exists():
            raise ConfigError(f"review file not found: {review_path}")
        accuracy = analytics.score_validation_review(review_path)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        with OutputLock(cfg.out_dir):
            out = cfg.out_dir / F_REVIEW_ACCURACY
            write_json_atomic(out, accuracy)
            manifest = _manifest(cfg, "validate_sample")
            manifest.add_input("review", review_path)
            manifest.add_output("review_accuracy", out)
            manifest.note("accuracy", accuracy)
            manifest.write()
        for target in sorted(accuracy):
            logger.info("review accuracy %s: %.3f", target, accuracy[target])
        return EXIT_OK

    corpus, corpus_path = _load_corpus(cfg)
    filtered_path = _in_path(cfg, "filtered", F_FILTERED)
    kept = _read_filtered_csv(filtered_path)
    texts = {
        sid: corpus.text_of(sid)
        for ids in kept.values() for sid in ids if sid in corpus
    }
    section = cfg.section("validate")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        out = cfg.out_dir / F_REVIEW_SAMPLE
        n = analytics.export_validation_sample(
            out, kept, texts,
            sample_size=int(section["sample_size"]), seed=int(section["seed"]),
        )
        manifest = _manifest(cfg, "validate_sample")
        manifest.add_input("corpus", corpus_path)
        manifest.add_input("filtered", filtered_path)
        manifest.add_output("review_sample", out)
        manifest.note("rows", n)
        manifest.write()
    logger.info("exported %d sentences for review", n)
    return EXIT_OK


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    import json as _json

    inputs = reporting.ReportInputs()
    consumed: dict[str, Path] = {}
    stats_path = _opt_path(cfg, "topic_stats", F_TOPIC_STATS)
    if stats_path is not None:
        inputs.topic_stats = topics_mod.load_topic_stats(stats_path)
        consumed["topic_stats"] = stats_path
    panel_path = _opt_path(cfg, "panel", F_PANEL)
    if panel_path is not None:
        inputs.panel = features_mod.load_panel_csv(panel_path)
        consumed["panel"] = panel_path
    series_path = cfg.out_dir / F_IC_SERIES
    if series_path.exists():
        inputs.ic_series = _ic_series_from_dict(
            _json.loads(series_path.read_text(encoding="utf-8"))
        )
        consumed["ic_series"] = series_path
    trends: dict[str, list[analytics.TrendPoint]] = {}
    for path in sorted(cfg.out_dir.glob("trends_*.csv")):
        target = path.stem[len("trends_"):]
        trends[target] = _read_trend_csv(path)
        consumed[f"trends_{target}"] = path
    if trends:
        inputs.trends = trends
    search_path = cfg.out_dir / F_SEARCH_RESULT
    if search_path.exists():
        payload = _json.loads(search_path.read_text(encoding="utf-8"))
        best = max(
            (t for t in payload.get("trials", []) if t.get("f1") is not None),
            key=lambda t: t["f1"], default=None,
        )
        inputs.search_summary = {
            "trials": len(payload.get("trials", [])),
            "best_f1": best["f1"] if best else None,
            "best_config": payload.get("best_config"),
        }
        consumed["search_result"] = search_path

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with OutputLock(cfg.out_dir):
        report_dir = cfg.out_dir / F_REPORT_DIR
        written = reporting.build_report(
            report_dir, inputs, render_figures=bool(cfg.section("report")["figures"])
        )
        snapshot_out = report_dir / F_CONFIG_SNAPSHOT
        dump_config(cfg, snapshot_out)
        written.append(snapshot_out)
        manifest = _manifest(cfg, "report")
        for name, path in sorted(consumed.items()):
            manifest.add_input(name, path)
        for path in written:
            manifest.add_output(path.relative_to(cfg.out_dir).as_posix(), path)
        manifest.write()
    logger.info("report bundle written to %s (%d files)", report_dir, len(written))
    return EXIT_OK


def _read_trend_csv(path: Path) -> list[analytics.TrendPoint]:
    import csv as _csv

    points = []
    with path.open("r", encoding="utf-8", newline="") as fh:
        for rec in _csv.DictReader(fh):
            points.append(analytics.TrendPoint(
                period=rec["period"], group=rec["group"],
                negativity=float(rec["negativity"]),
                n_sentences=int(rec["n_sentences"]),
            ))
    return points


# ---------------------------------------------------------------------------
# Parser and dispatch
# ---------------------------------------------------------------------------

HANDLERS = {
    "ingest": cmd_ingest,
    "sample": cmd_sample,
    "discover-topics": cmd_discover_topics,
    "reduce-topics": cmd_reduce_topics,
    "label": cmd_label,
    "train-topic": cmd_train_topic,
    "train-sentiment": cmd_train_sentiment,
    "score": cmd_score,
    "features": cmd_features,
    "ic": cmd_ic,
    "filter": cmd_filter,
    "trends": cmd_trends,
    "validate-sample": cmd_validate_sample,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--out", help="output directory (overrides paths.out_dir)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(
        prog="calldistill",
        description="Distill transcript topic and sentiment knowledge into "
                    "small models and quantitative features.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("ingest", parents=[common],
                       help="segment raw transcripts into the canonical corpus")
    p.add_argument("input", nargs="?", help="raw transcript JSONL")

    p = sub.add_parser("sample", parents=[common],
                       help="draw a deterministic sentence sample")
    p.add_argument("--role", choices=("discovery", "labeling"), required=True)

    sub.add_parser("discover-topics", parents=[common],
                   help="elicit a topic vocabulary from the teacher")
    sub.add_parser("reduce-topics", parents=[common],
                   help="shrink the topic list by frequency, clustering, or the teacher")
    sub.add_parser("label", parents=[common],
                   help="label the training sample through the teacher")
    sub.add_parser("train-topic", parents=[common],
                   help="hyperparameter search and final topic model training")
    sub.add_parser("train-sentiment", parents=[common],
                   help="train the sentiment model (direct or transfer)")
    sub.add_parser("score", parents=[common],
                   help="score every corpus sentence with both models")
    sub.add_parser("features", parents=[common],
                   help="aggregate sentence scores into company-month features")
    sub.add_parser("ic", parents=[common],
                   help="information coefficient of a feature against forward returns")
    sub.add_parser("filter", parents=[common],
                   help="select sentences matching the target likelihood bands")
    sub.add_parser("trends", parents=[common],
                   help="negativity share through time for filtered sentences")

    p = sub.add_parser("validate-sample", parents=[common],
                       help="export filtered sentences for expert review")
    p.add_argument("--review", help="completed review CSV to score instead")

    sub.add_parser("report", parents=[common],
                   help="collect summaries and figures into a report bundle")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    _setup_logging(bool(getattr(args, "verbose", False)))
    try:
        cfg = _load_run_config(args)
        return HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        logger.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except CalldistillError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    except RuntimeError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
