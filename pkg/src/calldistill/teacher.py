"""Teacher-model client: prompt construction, response parsing, labeling runs.

The teacher is a text-completion endpoint reached over HTTP, or a fully
deterministic in-process mock selected by the ``mock:`` URL scheme. Prompt
wording is part of the data contract and must not drift, so the templates
live here as frozen constants and are covered by golden tests.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence
from urllib.parse import parse_qs, urlparse

import requests

from .corpus import Corpus, SentenceSample
from .errors import (
    BatchTooLargeError,
    EmptyBatchError,
    EmptyTopicListError,
    EndpointUnreachableError,
    MalformedResponseError,
    ResumeStateError,
    TransportError,
)

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Prompt templates. These strings are contractual; golden tests compare them
# byte for byte against fixture files.
# ---------------------------------------------------------------------------

TOPIC_DISCOVERY_QUESTION = (
    "Can you provide financial topics that would describe the following "
    "sentences using a general classification?"
)

TOPIC_DISCOVERY_FORMAT = (
    "Format your answer by separating all the detected topics with semi-colons."
)

CLASSIFICATION_TEMPLATE = (
    "Considering the following list of topics: [list of topics], could you "
    "provide a classification on the following sentences topics? Please "
    "format your answer in the following way: Topic: Topic identified."
)

SENTIMENT_INSTRUCTION = (
    "Please also share your view on the financial statement's sentiment, "
    "categorizing it as either Negative, Neutral, or Positive. Structure "
    "your response in the format: Sentiment: [Negative/Neutral/Positive]."
)

_TOPIC_LIST_PLACEHOLDER = "[list of topics]"

SENTIMENT_CLASSES = ("Negative", "Neutral", "Positive")

DEFAULT_BATCH_LIMIT = 20

TOKEN_ENV_VAR = "TEACHER_API_TOKEN"

_TOPIC_LINE_RE = re.compile(r"Topic:\s*(.+)")
_SENTIMENT_LINE_RE = re.compile(r"Sentiment:\s*(.+)")
_SENTIMENT_VALUE_RE = re.compile(r"^(Negative|Neutral|Positive)\.?$", re.IGNORECASE)
_NUMBERED_LINE_RE = re.compile(r"^\s*(\d+)\.\s+(.*\S)\s*$")


class PromptKind(str, Enum):
    TOPIC_DISCOVERY = "topic_discovery"
    TOPIC_CLASSIFICATION = "topic_classification"
    SENTIMENT_AUGMENT = "sentiment_augment"


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    body: str


TEMPLATES: dict[PromptKind, PromptTemplate] = {
    PromptKind.TOPIC_DISCOVERY: PromptTemplate(
        PromptKind.TOPIC_DISCOVERY,
        TOPIC_DISCOVERY_QUESTION + "\n" + TOPIC_DISCOVERY_FORMAT,
    ),
    PromptKind.TOPIC_CLASSIFICATION: PromptTemplate(
        PromptKind.TOPIC_CLASSIFICATION, CLASSIFICATION_TEMPLATE
    ),
    PromptKind.SENTIMENT_AUGMENT: PromptTemplate(
        PromptKind.SENTIMENT_AUGMENT, SENTIMENT_INSTRUCTION
    ),
}


class LabelSource(str, Enum):
    TEACHER = "teacher"
    PRELIMINARY_TEACHER = "preliminary_teacher"
    HUMAN = "human"
    STUDENT = "student"


@dataclass(frozen=True)
class LabeledSentence:
    """A sentence-level label produced by some source."""

    sentence_id: str
    topic: str | None
    sentiment: str | None
    source: str = LabelSource.TEACHER.value
    raw_response_ref: str | None = None

    def validate(self) -> None:
        if self.topic is None and self.sentiment is None:
            raise ValueError(f"label for {self.sentence_id} has neither topic nor sentiment")
        if self.sentiment is not None and self.sentiment not in SENTIMENT_CLASSES:
            raise ValueError(f"invalid sentiment {self.sentiment!r}")


@dataclass(frozen=True)
class TeacherResponse:
    """Verbatim teacher output, archived for audit."""

    request_id: str
    raw_text: str
    received_at: str
    attempt: int


@dataclass(frozen=True)
class AttritionReport:
    """Bookkeeping for a labeling run; the four counts always balance."""

    requested: int
    well_formed: int
    discarded_format: int
    discarded_unknown_topic: int

    def __post_init__(self) -> None:
        total = self.well_formed + self.discarded_format + self.discarded_unknown_topic
        if total != self.requested:
            raise ValueError(
                f"attrition mismatch: {self.requested} requested vs {total} accounted"
            )

    def to_dict(self) -> dict:
        return {
            "requested": self.requested,
            "well_formed": self.well_formed,
            "discarded_format": self.discarded_format,
            "discarded_unknown_topic": self.discarded_unknown_topic,
        }


# Parse outcomes for one sentence slot in a classification response.
@dataclass(frozen=True)
class ParsedLabel:
    topic: str
    sentiment: str | None = None


@dataclass(frozen=True)
class Discard:
    reason: str  # bad_format | unknown_topic | bad_sentiment
    line: str | None = None


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 3
    backoff_base: float = 0.5
    backoff_cap: float = 8.0
    parallel: int = 4
    sleeper: Callable[[float], None] = time.sleep


# ---------------------------------------------------------------------------
# Prompt builders
# ---------------------------------------------------------------------------

def _check_batch(sentences: Sequence[str], limit: int) -> None:
    if len(sentences) == 0:
        raise EmptyBatchError("prompt batch is empty")
    if len(sentences) > limit:
        raise BatchTooLargeError(len(sentences), limit)


def _numbered(sentences: Sequence[str]) -> str:
    return "\n".join(f"{i}. {s}" for i, s in enumerate(sentences, start=1))


def build_topic_discovery_prompt(
    sentences: Sequence[str], limit: int = DEFAULT_BATCH_LIMIT
) -> str:
    """Prompt asking the teacher to name topics for a batch of sentences."""
    _check_batch(sentences, limit)
    return (
        TOPIC_DISCOVERY_QUESTION
        + "\n"
        + TOPIC_DISCOVERY_FORMAT
        + "\n\n"
        + _numbered(sentences)
    )


def build_classification_prompt(
    topics: Sequence[str],
    sentences: Sequence[str],
    with_sentiment: bool = False,
    limit: int = DEFAULT_BATCH_LIMIT,
) -> str:
    """Prompt asking for one ``Topic:`` line per sentence.

    With ``with_sentiment`` the sentiment instruction is appended and each
    sentence is expected to come back as a ``Topic:`` line followed by a
    ``Sentiment:`` line.
    """
    if len(topics) == 0:
        raise EmptyTopicListError("classification prompt needs at least one topic")
    _check_batch(sentences, limit)
    header = CLASSIFICATION_TEMPLATE.replace(_TOPIC_LIST_PLACEHOLDER, ", ".join(topics))
    if with_sentiment:
        header += "\n" + SENTIMENT_INSTRUCTION
    return header + "\n\n" + _numbered(sentences)


def build_sentiment_augment_prompt() -> str:
    """The sentiment add-on instruction by itself."""
    return SENTIMENT_INSTRUCTION


# ---------------------------------------------------------------------------
# Response parsers (total: any input text maps to results, never raises)
# ---------------------------------------------------------------------------

def parse_topic_list(raw: str) -> list[str]:
    """Parse a semicolon-separated topic list.

    Splits on ';', trims whitespace, drops empties and deduplicates
    case-insensitively keeping the first-seen casing.
    """
    topics: list[str] = []
    seen: set[str] = set()
    for part in raw.split(";"):
        name = part.strip()
        if not name:
            continue
        key = name.lower()
        if key in seen:
            continue
        seen.add(key)
        topics.append(name)
    if not topics:
        raise MalformedResponseError(f"no topics found in response: {raw!r}")
    return topics


def parse_classification(
    raw: str,
    allowed_topics: Sequence[str],
    expect_sentiment: bool = False,
    expected_count: int | None = None,
) -> list[ParsedLabel | Discard]:
    """Parse a classification response into per-sentence outcomes.

    Non-empty lines are consumed in fixed-size blocks, one block per
    sentence: a ``Topic:`` line, plus a ``Sentiment:`` line when
    ``expect_sentiment`` is set. Topic names must match the allowed list
    case-insensitively; matches are canonicalized to the allowed casing.
    Anything that fails these rules becomes a :class:`Discard`, so the
    function is total over arbitrary input text.
    """
    canon = {t.lower(): t for t in allowed_topics}
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    block = 2 if expect_sentiment else 1
    n_out = expected_count if expected_count is not None else math.ceil(len(lines) / block)
    results: list[ParsedLabel | Discard] = []
    for i in range(n_out):
        chunk = lines[i * block : (i + 1) * block]
        if not chunk:
            results.append(Discard("bad_format", None))
            continue
        topic_match = _TOPIC_LINE_RE.search(chunk[0])
        if not topic_match:
            results.append(Discard("bad_format", chunk[0]))
            continue
        topic_raw = topic_match.group(1).strip()
        topic = canon.get(topic_raw.lower())
        if topic is None:
            results.append(Discard("unknown_topic", chunk[0]))
            continue
        sentiment: str | None = None
        if expect_sentiment:
            if len(chunk) < 2:
                results.append(Discard("bad_format", None))
                continue
            sent_match = _SENTIMENT_LINE_RE.search(chunk[1])
            if not sent_match:
                results.append(Discard("bad_format", chunk[1]))
                continue
            value = _SENTIMENT_VALUE_RE.match(sent_match.group(1).strip())
            if not value:
                results.append(Discard("bad_sentiment", chunk[1]))
                continue
            sentiment = value.group(1).capitalize()
        results.append(ParsedLabel(topic=topic, sentiment=sentiment))
    return results


# ---------------------------------------------------------------------------
# Endpoints
# ---------------------------------------------------------------------------

class TeacherEndpoint:
    """Protocol for completion endpoints.

    ``offset`` is the global ordinal of the first sentence in the prompt's
    batch; the HTTP endpoint ignores it, while the mock uses it to keep its
    noise schedule a pure function of sentence position (which is what makes
    resumed and parallel runs reproduce sequential ones).
    """

    deterministic = False

    def complete(self, prompt: str, offset: int | None = None) -> str:
        raise NotImplementedError


class HttpTeacherEndpoint(TeacherEndpoint):
    """POSTs ``{"model": ..., "prompt": ...}`` and expects ``{"text": ...}``."""

    def __init__(
        self,
        url: str,
        model: str = "teacher-default",
        token_env: str = TOKEN_ENV_VAR,
        timeout: float = 60.0,
    ):
        self.url = url
        self.model = model
        self.token_env = token_env
        self.timeout = timeout

    def complete(self, prompt: str, offset: int | None = None) -> str:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(
                self.url,
                json={"model": self.model, "prompt": prompt},
                headers=headers,
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()["text"]
        except (requests.RequestException, KeyError, ValueError) as exc:
            raise TransportError(f"teacher request failed: {exc}") from exc


def _hash_pick(seed: int, key: str, n: int, salt: str = "") -> int:
    """Deterministic choice of an index in [0, n) from (seed, key)."""
    digest = hashlib.blake2b(
        (key + "\x1f" + salt).encode("utf-8"),
        digest_size=8,
        key=str(seed).encode("utf-8")[:64],
    ).digest()
    return int.from_bytes(digest, "little") % n


def _staircase_hit(index: int, rate: float) -> bool:
    """True for exactly floor(n * rate) of the first n indices."""
    return math.floor((index + 1) * rate) - math.floor(index * rate) >= 1


DEFAULT_MOCK_TOPICS = (
    "Earnings",
    "Revenue",
    "Guidance",
    "Margins",
    "Dividend & Buyback",
    "Products & Services",
    "Cost Management",
    "Others",
)


class MockTeacherEndpoint(TeacherEndpoint):
    """Deterministic stand-in for the remote teacher.

    Labels are a pure function of (seed, sentence text), optionally overridden
    by a fixture mapping. Noise is injected on a staircase schedule over the
    global sentence ordinal so that a rate of r corrupts exactly
    ``floor(n * r)`` of the first n sentences. When several noise types are
    configured and their schedules collide on one ordinal, the earlier type
    (format, then topic, then sentiment) wins.
    """

    deterministic = True

    def __init__(
        self,
        seed: int = 0,
        topics: Sequence[str] = DEFAULT_MOCK_TOPICS,
        bad_format_rate: float = 0.0,
        unknown_topic_rate: float = 0.0,
        bad_sentiment_rate: float = 0.0,
        fixture_labels: Mapping[str, tuple[str, str]] | None = None,
        fail_requests: Iterable[int] = (),
        fail_always: bool = False,
    ):
        self.seed = seed
        self.topics = tuple(topics)
        self.bad_format_rate = bad_format_rate
        self.unknown_topic_rate = unknown_topic_rate
        self.bad_sentiment_rate = bad_sentiment_rate
        self.fixture_labels = dict(fixture_labels or {})
        self.fail_requests = set(fail_requests)
        self.fail_always = fail_always
        self._sentence_counter = 0
        self._request_counter = 0

    # -- helpers ------------------------------------------------------------

    def _prompt_sentences(self, prompt: str) -> list[str]:
        return [m.group(2) for ln in prompt.splitlines() if (m := _NUMBERED_LINE_RE.match(ln))]

    def _prompt_topic_list(self, prompt: str) -> list[str]:
        prefix = "Considering the following list of topics: "
        marker = ", could you provide a classification"
        head = prompt.splitlines()[0]
        start = head.index(prefix) + len(prefix)
        end = head.index(marker)
        return [t.strip() for t in head[start:end].split(",") if t.strip()]

    def _label_for(self, text: str, allowed: Sequence[str]) -> tuple[str, str]:
        if text in self.fixture_labels:
            return self.fixture_labels[text]
        topic = allowed[_hash_pick(self.seed, text, len(allowed), salt="topic")]
        sentiment = SENTIMENT_CLASSES[_hash_pick(self.seed, text, 3, salt="sentiment")]
        return topic, sentiment

    def _noise_for(self, ordinal: int) -> str | None:
        if _staircase_hit(ordinal, self.bad_format_rate):
            return "bad_format"
        if _staircase_hit(ordinal, self.unknown_topic_rate):
            return "unknown_topic"
        if _staircase_hit(ordinal, self.bad_sentiment_rate):
            return "bad_sentiment"
        return None

    # -- response synthesis --------------------------------------------------

    def _discovery_response(self, sentences: Sequence[str]) -> str:
        picked: list[str] = []
        for text in sentences:
            idx = _hash_pick(self.seed, text, len(self.topics), salt="discover")
            for name in (self.topics[idx], self.topics[(idx + 1) % len(self.topics)]):
                if name not in picked:
                    picked.append(name)
        return "; ".join(picked)

    def _reduction_response(self, prompt: str) -> str:
        candidates = [
            ln[2:].strip() for ln in prompt.splitlines() if ln.startswith("- ")
        ]
        kept = [t for t in candidates if _hash_pick(self.seed, t, 2, salt="reduce") == 0]
        if not kept and candidates:
            kept = [candidates[0]]
        return "; ".join(kept)

    def _classification_response(
        self, prompt: str, sentences: Sequence[str], offset: int
    ) -> str:
        allowed = self._prompt_topic_list(prompt)
        with_sentiment = SENTIMENT_INSTRUCTION in prompt
        lines: list[str] = []
        for i, text in enumerate(sentences):
            ordinal = offset + i
            topic, sentiment = self._label_for(text, allowed)
            noise = self._noise_for(ordinal)
            if noise == "bad_format":
                lines.append(topic)  # bare topic, missing the required prefix
            elif noise == "unknown_topic":
                lines.append("Topic: Uncategorized Miscellany")
            else:
                lines.append(f"Topic: {topic}")
            if with_sentiment:
                if noise == "bad_sentiment":
                    lines.append("Sentiment: Mixed")
                else:
                    lines.append(f"Sentiment: {sentiment}")
        return "\n".join(lines)

    def complete(self, prompt: str, offset: int | None = None) -> str:
        request_index = self._request_counter
        self._request_counter += 1
        if self.fail_always or request_index in self.fail_requests:
            raise TransportError(f"mock transport failure on request {request_index}")
        sentences = self._prompt_sentences(prompt)
        if offset is None:
            offset = self._sentence_counter
        self._sentence_counter = offset + len(sentences)
        if prompt.startswith(TOPIC_DISCOVERY_QUESTION):
            return self._discovery_response(sentences)
        if prompt.startswith("Considering the following list of topics: "):
            return self._classification_response(prompt, sentences, offset)
        if TOPIC_DISCOVERY_FORMAT in prompt:
            return self._reduction_response(prompt)
        return ""


def make_teacher_endpoint(
    url: str, model: str = "teacher-default", **mock_kwargs
) -> TeacherEndpoint:
    """Build an endpoint from a URL; ``mock:`` selects the in-process mock.

    Mock query parameters (e.g. ``mock:?seed=7&bad_format_rate=0.375``)
    override keyword arguments.
    """
    if url.startswith("mock:"):
        parsed = urlparse(url)
        params = {k: v[-1] for k, v in parse_qs(parsed.query).items()}
        kwargs = dict(mock_kwargs)
        for key in ("bad_format_rate", "unknown_topic_rate", "bad_sentiment_rate"):
            if key in params:
                kwargs[key] = float(params[key])
        if "seed" in params:
            kwargs["seed"] = int(params["seed"])
        return MockTeacherEndpoint(**kwargs)
    return HttpTeacherEndpoint(url, model=model)


# ---------------------------------------------------------------------------
# Labeling runs
# ---------------------------------------------------------------------------

def _sample_checksum(sample: SentenceSample) -> str:
    payload = json.dumps(
        [sample.seed, sample.fraction, list(sample.sentence_ids)], sort_keys=True
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _mock_timestamp(offset: int) -> str:
    return f"1970-01-01T00:00:00+00:00#{offset}"


class _LabelState:
    """Durable per-batch progress for a labeling run."""

    def __init__(self, state_dir: Path, sample: SentenceSample):
        self.dir = state_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cursor_path = self.dir / "label_cursor.json"
        self.labels_path = self.dir / "labels.jsonl"
        self.discards_path = self.dir / "discards.jsonl"
        self.responses_path = self.dir / "responses.jsonl"
        self.checksum = _sample_checksum(sample)
        self.next_batch = 0
        if self.cursor_path.exists():
            cursor = json.loads(self.cursor_path.read_text(encoding="utf-8"))
            if cursor.get("sample_sha256") != self.checksum:
                raise ResumeStateError(
                    f"resume state in {self.dir} belongs to a different sample"
                )
            self.next_batch = int(cursor["next_batch"])

    def record_batch(
        self,
        batch_index: int,
        sentences_done: int,
        labels: list[LabeledSentence],
        discards: list[dict],
        response: TeacherResponse,
    ) -> None:
        with self.responses_path.open("a", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({
                "request_id": response.request_id,
                "raw_text": response.raw_text,
                "received_at": response.received_at,
                "attempt": response.attempt,
            }, sort_keys=True) + "\n")
        with self.labels_path.open("a", encoding="utf-8", newline="\n") as fh:
            for lab in labels:
                fh.write(json.dumps({
                    "sentence_id": lab.sentence_id,
                    "topic": lab.topic,
                    "sentiment": lab.sentiment,
                    "source": lab.source,
                    "raw_response_ref": lab.raw_response_ref,
                }, sort_keys=True) + "\n")
        with self.discards_path.open("a", encoding="utf-8", newline="\n") as fh:
            for rec in discards:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        tmp = self.cursor_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({
            "next_batch": batch_index + 1,
            "sentences_done": sentences_done,
            "sample_sha256": self.checksum,
        }, sort_keys=True), encoding="utf-8")
        os.replace(tmp, self.cursor_path)

    def load_existing(self) -> tuple[list[LabeledSentence], list[dict]]:
        labels: list[LabeledSentence] = []
        discards: list[dict] = []
        if self.labels_path.exists():
            for line in self.labels_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    labels.append(labeled_sentence_from_dict(json.loads(line)))
        if self.discards_path.exists():
            for line in self.discards_path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    discards.append(json.loads(line))
        return labels, discards


def labeled_sentence_from_dict(obj: Mapping) -> LabeledSentence:
    return LabeledSentence(
        sentence_id=obj["sentence_id"],
        topic=obj.get("topic"),
        sentiment=obj.get("sentiment"),
        source=obj.get("source", LabelSource.TEACHER.value),
        raw_response_ref=obj.get("raw_response_ref"),
    )


def save_labels(labels: Iterable[LabeledSentence], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for lab in labels:
            fh.write(json.dumps({
                "sentence_id": lab.sentence_id,
                "topic": lab.topic,
                "sentiment": lab.sentiment,
                "source": lab.source,
                "raw_response_ref": lab.raw_response_ref,
            }, sort_keys=True) + "\n")


def load_labels(path: str | Path) -> list[LabeledSentence]:
    labels = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            labels.append(labeled_sentence_from_dict(json.loads(line)))
    return labels


def _complete_with_retry(
    endpoint: TeacherEndpoint,
    prompt: str,
    offset: int,
    policy: RetryPolicy,
) -> tuple[str, int]:
    """Run one request with exponential backoff; returns (text, attempt)."""
    last_error: Exception | None = None
    for attempt in range(policy.max_retries + 1):
        try:
            return endpoint.complete(prompt, offset=offset), attempt + 1
        except TransportError as exc:
            last_error = exc
            if attempt < policy.max_retries:
                delay = min(policy.backoff_base * (2 ** attempt), policy.backoff_cap)
                policy.sleeper(delay)
    raise EndpointUnreachableError(
        f"giving up after {policy.max_retries + 1} attempts: {last_error}"
    ) from last_error


def label_dataset(
    corpus: Corpus,
    sample: SentenceSample,
    topics: Sequence[str],
    endpoint: TeacherEndpoint,
    policy: RetryPolicy | None = None,
    with_sentiment: bool = True,
    batch_size: int = DEFAULT_BATCH_LIMIT,
    state_dir: str | Path | None = None,
    source: str = LabelSource.TEACHER.value,
) -> tuple[list[LabeledSentence], AttritionReport]:
    """Label every sampled sentence through the teacher endpoint.

    Sentences are grouped into fixed-size batches and dispatched with up to
    ``policy.parallel`` requests in flight; results are merged in batch order
    regardless of completion order, and the returned labels are sorted by
    sentence id. Transport errors are retried with exponential backoff;
    malformed or off-list answers are counted and discarded, never retried.
    With ``state_dir`` set, progress is durable per batch and an interrupted
    run resumes where it left off.
    """
    policy = policy or RetryPolicy()
    ids = list(sample.sentence_ids)
    texts = [corpus.text_of(sid) for sid in ids]
    batches = [
        (ids[i : i + batch_size], texts[i : i + batch_size], i)
        for i in range(0, len(ids), batch_size)
    ]
    state = _LabelState(Path(state_dir), sample) if state_dir is not None else None
    start_batch = state.next_batch if state else 0

    labels: list[LabeledSentence] = []
    discards: list[dict] = []
    if state:
        labels, discards = state.load_existing()

    def run_batch(batch_index: int) -> tuple[TeacherResponse, list, list]:
        batch_ids, batch_texts, offset = batches[batch_index]
        prompt = build_classification_prompt(
            topics, batch_texts, with_sentiment=with_sentiment, limit=batch_size
        )
        text, attempt = _complete_with_retry(endpoint, prompt, offset, policy)
        request_id = f"req-{batch_index:06d}"
        received = (
            _mock_timestamp(offset)
            if getattr(endpoint, "deterministic", False)
            else time.strftime("%Y-%m-%dT%H:%M:%S+00:00", time.gmtime())
        )
        response = TeacherResponse(request_id, text, received, attempt)
        parsed = parse_classification(
            text, topics, expect_sentiment=with_sentiment, expected_count=len(batch_ids)
        )
        batch_labels: list[LabeledSentence] = []
        batch_discards: list[dict] = []
        for sid, outcome in zip(batch_ids, parsed):
            if isinstance(outcome, ParsedLabel):
                batch_labels.append(LabeledSentence(
                    sentence_id=sid,
                    topic=outcome.topic,
                    sentiment=outcome.sentiment,
                    source=source,
                    raw_response_ref=request_id,
                ))
            else:
                batch_discards.append({
                    "sentence_id": sid,
                    "reason": outcome.reason,
                    "raw_line": outcome.line,
                    "raw_response_ref": request_id,
                })
        return response, batch_labels, batch_discards

    pending = range(start_batch, len(batches))
    with ThreadPoolExecutor(max_workers=max(1, policy.parallel)) as pool:
        futures = {i: pool.submit(run_batch, i) for i in pending}
        try:
            for i in pending:
                response, batch_labels, batch_discards = futures[i].result()
                labels.extend(batch_labels)
                discards.extend(batch_discards)
                if state:
                    done = batches[i][2] + len(batches[i][0])
                    state.record_batch(i, done, batch_labels, batch_discards, response)
        except EndpointUnreachableError:
            for fut in futures.values():
                fut.cancel()
            raise

    labels.sort(key=lambda lab: lab.sentence_id)
    n_unknown = sum(1 for d in discards if d["reason"] == "unknown_topic")
    n_format = len(discards) - n_unknown
    report = AttritionReport(
        requested=len(ids),
        well_formed=len(labels),
        discarded_format=n_format,
        discarded_unknown_topic=n_unknown,
    )
    logger.info(
        "labeled %d/%d sentences (%d format discards, %d unknown-topic discards)",
        report.well_formed, report.requested,
        report.discarded_format, report.discarded_unknown_topic,
    )
    return labels, report


def discover_topics(
    corpus: Corpus,
    sample: SentenceSample,
    endpoint: TeacherEndpoint,
    policy: RetryPolicy | None = None,
    batch_size: int = DEFAULT_BATCH_LIMIT,
) -> list[str]:
    """Accumulate a deduplicated topic list over discovery prompts."""
    policy = policy or RetryPolicy()
    ids = list(sample.sentence_ids)
    texts = [corpus.text_of(sid) for sid in ids]
    topics: list[str] = []
    seen: set[str] = set()
    for start in range(0, len(texts), batch_size):
        batch = texts[start : start + batch_size]
        prompt = build_topic_discovery_prompt(batch, limit=batch_size)
        text, _ = _complete_with_retry(endpoint, prompt, start, policy)
        try:
            found = parse_topic_list(text)
        except MalformedResponseError:
            logger.warning("discovery batch at %d returned no topics", start)
            continue
        for name in found:
            key = name.lower()
            if key not in seen:
                seen.add(key)
                topics.append(name)
    if not topics:
        raise MalformedResponseError("topic discovery produced an empty list")
    return topics
