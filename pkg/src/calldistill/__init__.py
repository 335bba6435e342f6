"""Distill transcript topic and sentiment knowledge from a large teacher
model into small feed-forward students, then turn their sentence scores
into monthly quantitative features and diagnostics."""

from .analytics import (
    FilterSpec,
    FilterThresholds,
    IcSeries,
    ReturnsRecord,
    cumulative_ic,
    filter_corpus,
    information_coefficient,
    negativity_trend,
    sector_neutral_return,
)
from .corpus import Corpus, ingest_transcripts, sample_sentences, split_sentences
from .embeddings import EmbeddingProvider, EmbeddingStore, make_embedding_endpoint
from .errors import CalldistillError
from .features import (
    MonthlyFeaturePanel,
    SentenceScore,
    compute_document_features,
    monthly_aggregate,
    topic_propensity,
    topic_sentiment,
)
from .metrics import f1_score
from .neural import MlpConfig, MlpModel, build_mlp, load_checkpoint, save_checkpoint
from .teacher import (
    LabeledSentence,
    MockTeacherEndpoint,
    discover_topics,
    label_dataset,
    make_teacher_endpoint,
)
from .topics import compute_topic_stats, kmeans, reduce_by_threshold
from .training import (
    SplitPlan,
    build_dataset,
    final_retrain,
    make_split_plan,
    random_search,
    train_sentiment,
)

__version__ = "0.1.0"

__all__ = [
    "CalldistillError",
    "Corpus",
    "EmbeddingProvider",
    "EmbeddingStore",
    "FilterSpec",
    "FilterThresholds",
    "IcSeries",
    "LabeledSentence",
    "MlpConfig",
    "MlpModel",
    "MockTeacherEndpoint",
    "MonthlyFeaturePanel",
    "ReturnsRecord",
    "SentenceScore",
    "SplitPlan",
    "build_dataset",
    "build_mlp",
    "compute_document_features",
    "compute_topic_stats",
    "cumulative_ic",
    "discover_topics",
    "f1_score",
    "filter_corpus",
    "final_retrain",
    "information_coefficient",
    "ingest_transcripts",
    "kmeans",
    "label_dataset",
    "load_checkpoint",
    "make_embedding_endpoint",
    "make_split_plan",
    "make_teacher_endpoint",
    "monthly_aggregate",
    "negativity_trend",
    "random_search",
    "reduce_by_threshold",
    "sample_sentences",
    "save_checkpoint",
    "sector_neutral_return",
    "split_sentences",
    "topic_propensity",
    "topic_sentiment",
    "train_sentiment",
]
