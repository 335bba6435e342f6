"""Document-level features from sentence scores, aggregated monthly.

For a document with J scored sentences, the share of sentences assigned to a
topic is that topic's propensity; the average of (positive minus negative)
sentiment weight over a topic's sentences is its net sentiment, defined only
where the topic actually occurs. Features roll up to company-month panels.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import EmptyDocumentError

logger = logging.getLogger(__name__)

MODE_HARD = "hard"
MODE_LIKELIHOOD = "likelihood"
SENTIMENT_TOPIC_RESTRICTED = "topic_restricted"
SENTIMENT_LITERAL = "literal"

SENTIMENT_ORDER = ("Negative", "Neutral", "Positive")


@dataclass(frozen=True)
class SentenceScore:
    """Student-model output for one sentence."""

    sentence_id: str
    topic_distribution: Mapping[str, float]
    predicted_topic: str
    sentiment_distribution: tuple[float, float, float]  # (neg, neu, pos)
    predicted_sentiment: str

    def net_sentiment(self) -> float:
        return self.sentiment_distribution[2] - self.sentiment_distribution[0]


@dataclass
class DocumentFeatures:
    doc_id: str
    company_id: str
    month: str
    mode: str
    propensity: dict[str, float]
    sentiment: dict[str, float]  # defined only for topics with propensity > 0


@dataclass(frozen=True)
class PanelRow:
    company_id: str
    month: str
    propensity: Mapping[str, float]
    sentiment: Mapping[str, float]
    n_calls: int


@dataclass
class MonthlyFeaturePanel:
    rows: list[PanelRow]
    topics: list[str]

    def value(self, company_id: str, month: str, column: str) -> float | None:
        """Look up ``p_<topic>`` or ``s_<topic>`` for a company-month."""
        for row in self.rows:
            if row.company_id == company_id and row.month == month:
                kind, topic = column.split("_", 1)
                table = row.propensity if kind == "p" else row.sentiment
                return table.get(topic)
        return None


def topic_counts(scores: Sequence[SentenceScore]) -> dict[str, int]:
    """Hard assignment counts per topic (zero-count topics included)."""
    counts = {t: 0 for t in scores[0].topic_distribution} if scores else {}
    for s in scores:
        counts[s.predicted_topic] = counts.get(s.predicted_topic, 0) + 1
    return counts


def topic_propensity(
    scores: Sequence[SentenceScore], mode: str = MODE_HARD
) -> dict[str, float]:
    """Per-topic share of a document's sentences.

    Hard mode counts argmax assignments, so each value is count/J and the
    values sum to one exactly in rational arithmetic. Likelihood mode
    averages the topic distributions instead.
    """
    if not scores:
        raise EmptyDocumentError("no scored sentences in document")
    j = len(scores)
    if mode == MODE_HARD:
        return {t: c / j for t, c in topic_counts(scores).items()}
    if mode == MODE_LIKELIHOOD:
        topics = set()
        for s in scores:
            topics.update(s.topic_distribution)
        return {
            t: sum(s.topic_distribution.get(t, 0.0) for s in scores) / j
            for t in topics
        }
    raise ValueError(f"unknown propensity mode {mode!r}")


def topic_sentiment(
    scores: Sequence[SentenceScore],
    topic: str,
    mode: str = SENTIMENT_TOPIC_RESTRICTED,
) -> float | None:
    """Net sentiment for a topic within a document, or None when absent.

    Topic-restricted mode averages (positive minus negative) over the
    sentences assigned to the topic. Literal mode averages over all J
    sentences regardless of assignment and therefore yields the same
    value for every topic that occurs; both modes return None for a topic
    with zero assigned sentences.
    """
    if not scores:
        raise EmptyDocumentError("no scored sentences in document")
    assigned = [s for s in scores if s.predicted_topic == topic]
    if not assigned:
        return None
    if mode == SENTIMENT_TOPIC_RESTRICTED:
        return sum(s.net_sentiment() for s in assigned) / len(assigned)
    if mode == SENTIMENT_LITERAL:
        return sum(s.net_sentiment() for s in scores) / len(scores)
    raise ValueError(f"unknown sentiment mode {mode!r}")


def compute_document_features(
    doc_id: str,
    company_id: str,
    month: str,
    scores: Sequence[SentenceScore],
    mode: str = MODE_HARD,
    sentiment_mode: str = SENTIMENT_TOPIC_RESTRICTED,
) -> DocumentFeatures:
    """Propensity and per-topic net sentiment for one document."""
    propensity = topic_propensity(scores, mode=mode)
    sentiment: dict[str, float] = {}
    for topic in propensity:
        value = topic_sentiment(scores, topic, mode=sentiment_mode)
        if value is not None:
            sentiment[topic] = value
    return DocumentFeatures(
        doc_id=doc_id,
        company_id=company_id,
        month=month,
        mode=mode,
        propensity=propensity,
        sentiment=sentiment,
    )


def monthly_aggregate(features: Iterable[DocumentFeatures]) -> MonthlyFeaturePanel:
    """Average document features into company-month rows.

    Propensities average over all of the month's calls (a topic missing from
    one call contributes zero). Sentiments average only over the calls where
    they are defined; a topic with no defined call stays absent.
    """
    grouped: dict[tuple[str, str], list[DocumentFeatures]] = {}
    for f in features:
        grouped.setdefault((f.company_id, f.month), []).append(f)
    topics: set[str] = set()
    rows: list[PanelRow] = []
    for (company_id, month) in sorted(grouped):
        docs = grouped[(company_id, month)]
        month_topics: set[str] = set()
        for d in docs:
            month_topics.update(d.propensity)
        topics.update(month_topics)
        propensity = {
            t: sum(d.propensity.get(t, 0.0) for d in docs) / len(docs)
            for t in sorted(month_topics)
        }
        sentiment: dict[str, float] = {}
        for t in sorted(month_topics):
            defined = [d.sentiment[t] for d in docs if t in d.sentiment]
            if defined:
                sentiment[t] = sum(defined) / len(defined)
        rows.append(PanelRow(
            company_id=company_id, month=month,
            propensity=propensity, sentiment=sentiment, n_calls=len(docs),
        ))
    return MonthlyFeaturePanel(rows=rows, topics=sorted(topics))


def write_panel_csv(panel: MonthlyFeaturePanel, path: str | Path) -> None:
    """Write the panel wide: one p_<topic> and s_<topic> column per topic.

    An undefined sentiment is an empty cell, never zero.
    """
    columns = [f"p_{t}" for t in panel.topics] + [f"s_{t}" for t in panel.topics]
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["company_id", "month"] + columns)
        for row in panel.rows:
            cells: list[str] = [row.company_id, row.month]
            for t in panel.topics:
                cells.append(f"{row.propensity.get(t, 0.0):.10g}")
            for t in panel.topics:
                value = row.sentiment.get(t)
                cells.append("" if value is None else f"{value:.10g}")
            writer.writerow(cells)


def load_panel_csv(path: str | Path) -> MonthlyFeaturePanel:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        topics = sorted(
            name[2:] for name in reader.fieldnames or [] if name.startswith("p_")
        )
        rows: list[PanelRow] = []
        for rec in reader:
            propensity = {t: float(rec[f"p_{t}"]) for t in topics if rec.get(f"p_{t}", "") != ""}
            sentiment = {t: float(rec[f"s_{t}"]) for t in topics if rec.get(f"s_{t}", "") != ""}
            rows.append(PanelRow(
                company_id=rec["company_id"], month=rec["month"],
                propensity=propensity, sentiment=sentiment, n_calls=1,
            ))
    return MonthlyFeaturePanel(rows=rows, topics=topics)


def write_scores_csv(
    scores: Sequence[SentenceScore],
    doc_of: Mapping[str, str],
    path: str | Path,
) -> None:
    """Persist sentence scores wide, with per-topic likelihood columns."""
    topics = sorted(scores[0].topic_distribution) if scores else []
    header = (
        ["sentence_id", "doc_id", "predicted_topic", "predicted_sentiment"]
        + [f"p_{t}" for t in topics]
        + ["s_negative", "s_neutral", "s_positive"]
    )
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for s in sorted(scores, key=lambda s: s.sentence_id):
            row = [
                s.sentence_id, doc_of.get(s.sentence_id, ""),
                s.predicted_topic, s.predicted_sentiment,
            ]
            row += [f"{s.topic_distribution.get(t, 0.0):.10g}" for t in topics]
            row += [f"{v:.10g}" for v in s.sentiment_distribution]
            writer.writerow(row)


def load_scores_csv(path: str | Path) -> tuple[list[SentenceScore], dict[str, str]]:
    scores: list[SentenceScore] = []
    doc_of: dict[str, str] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        topics = [n[2:] for n in reader.fieldnames or [] if n.startswith("p_")]
        for rec in reader:
            sid = rec["sentence_id"]
            doc_of[sid] = rec["doc_id"]
            scores.append(SentenceScore(
                sentence_id=sid,
                topic_distribution={t: float(rec[f"p_{t}"]) for t in topics},
                predicted_topic=rec["predicted_topic"],
                sentiment_distribution=(
                    float(rec["s_negative"]),
                    float(rec["s_neutral"]),
                    float(rec["s_positive"]),
                ),
                predicted_sentiment=rec["predicted_sentiment"],
            ))
    return scores, doc_of
