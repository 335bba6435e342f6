"""Earnings-call corpus handling: ingestion, segmentation, seeded sampling.

A corpus is a collection of call transcripts. Each transcript carries company
metadata and an ordered list of sentences; sentence ids are stable strings of
the form ``<doc_id>:<index>`` so that lexicographic order within a document
matches positional order.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DuplicateDocIdError,
    EmptyCorpusError,
    MalformedRecordError,
)

logger = logging.getLogger(__name__)

# Tokens that end with terminal punctuation but never end a sentence.
DEFAULT_ABBREVIATIONS = ("i.e.", "e.g.", "vs.", "Inc.", "Corp.", "U.S.")

# Single capital initial such as "J." in "J. Smith".
_INITIAL_RE = re.compile(r"^[A-Z]\.$")

_TERMINAL_CHARS = (".", "!", "?")

# Closing quotes/brackets that may trail terminal punctuation.
_CLOSERS = "\"')]»’”"

# Identifier of the sampling algorithm, recorded in run manifests.
SAMPLE_ALGORITHM = "pcg64-fisher-yates-prefix"

_REQUIRED_FIELDS = ("doc_id", "company_id", "call_date", "sector")


@dataclass(frozen=True)
class Sentence:
    """One segmented sentence of a transcript."""

    sentence_id: str
    doc_id: str
    index_j: int
    text: str
    word_count: int


@dataclass
class Transcript:
    """A single earnings-call document."""

    doc_id: str
    company_id: str
    call_date: date
    sector: str
    sentences: list[Sentence]

    @property
    def month(self) -> str:
        return f"{self.call_date.year:04d}-{self.call_date.month:02d}"


@dataclass(frozen=True)
class SentenceSample:
    """A reproducible draw of sentence ids from a corpus."""

    fraction: float
    seed: int
    sentence_ids: tuple[str, ...]


class Corpus:
    """Container of transcripts with sentence lookup by id."""

    def __init__(self, transcripts: Iterable[Transcript]):
        self.transcripts: dict[str, Transcript] = {}
        for t in transcripts:
            if t.doc_id in self.transcripts:
                raise DuplicateDocIdError([t.doc_id])
            self.transcripts[t.doc_id] = t
        self._by_id: dict[str, Sentence] = {}
        self._doc_of: dict[str, str] = {}
        for t in self.transcripts.values():
            for s in t.sentences:
                self._by_id[s.sentence_id] = s
                self._doc_of[s.sentence_id] = t.doc_id

    def __len__(self) -> int:
        return len(self.transcripts)

    @property
    def num_sentences(self) -> int:
        return len(self._by_id)

    def sentences_sorted(self) -> list[Sentence]:
        """All sentences ordered by (doc_id, index_j)."""
        out: list[Sentence] = []
        for doc_id in sorted(self.transcripts):
            out.extend(self.transcripts[doc_id].sentences)
        return out

    def sentence(self, sentence_id: str) -> Sentence:
        return self._by_id[sentence_id]

    def text_of(self, sentence_id: str) -> str:
        return self._by_id[sentence_id].text

    def transcript_of(self, sentence_id: str) -> Transcript:
        return self.transcripts[self._doc_of[sentence_id]]

    def __contains__(self, sentence_id: str) -> bool:
        return sentence_id in self._by_id

    def iter_transcripts(self) -> Iterator[Transcript]:
        for doc_id in sorted(self.transcripts):
            yield self.transcripts[doc_id]


def _is_boundary(token: str, abbreviations: Sequence[str]) -> bool:
    """Whether ``token`` ends a sentence."""
    stripped = token.rstrip(_CLOSERS)
    if not stripped or not stripped.endswith(_TERMINAL_CHARS):
        return False
    if stripped.endswith(("!", "?")):
        return True
    if stripped in abbreviations:
        return False
    if _INITIAL_RE.match(stripped):
        return False
    return True


def split_sentences(
    raw: str, abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS
) -> list[str]:
    """Segment raw transcript text into sentences.

    Whitespace runs are collapsed to single spaces; terminal ``.``, ``!`` or
    ``?`` ends a sentence unless the final token is a known abbreviation or a
    single capital initial. Joining the output with spaces preserves every
    non-whitespace character of the input.
    """
    tokens = raw.split()
    sentences: list[str] = []
    current: list[str] = []
    for token in tokens:
        current.append(token)
        if _is_boundary(token, abbreviations):
            sentences.append(" ".join(current))
            current = []
    if current:
        sentences.append(" ".join(current))
    return sentences


def _make_sentence(doc_id: str, index_j: int, text: str) -> Sentence:
    return Sentence(
        sentence_id=f"{doc_id}:{index_j:05d}",
        doc_id=doc_id,
        index_j=index_j,
        text=text,
        word_count=len(text.split()),
    )


def _parse_record(obj: dict, abbreviations: Sequence[str]) -> Transcript:
    for field in _REQUIRED_FIELDS:
        if field not in obj or not isinstance(obj[field], str) or not obj[field]:
            raise ValueError(f"missing or invalid field {field!r}")
    call_date = date.fromisoformat(obj["call_date"])
    if "sentences" in obj:
        texts = obj["sentences"]
        if not isinstance(texts, list) or not all(isinstance(t, str) for t in texts):
            raise ValueError("'sentences' must be a list of strings")
        texts = [" ".join(t.split()) for t in texts if t.strip()]
    elif "text" in obj:
        if not isinstance(obj["text"], str):
            raise ValueError("'text' must be a string")
        texts = split_sentences(obj["text"], abbreviations)
    else:
        raise ValueError("record needs either 'sentences' or 'text'")
    doc_id = obj["doc_id"]
    sentences = [_make_sentence(doc_id, j, t) for j, t in enumerate(texts)]
    return Transcript(
        doc_id=doc_id,
        company_id=obj["company_id"],
        call_date=call_date,
        sector=obj["sector"],
        sentences=sentences,
    )


def ingest_transcripts(
    path: str | Path, abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS
) -> Corpus:
    """Read a JSONL transcript file into a :class:`Corpus`.

    All malformed lines are collected before aborting so the error lists
    every offender. Duplicate ``doc_id`` values abort as well. An empty file
    yields an empty corpus.
    """
    path = Path(path)
    transcripts: list[Transcript] = []
    bad_lines: list[int] = []
    details: list[str] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("record is not an object")
                transcripts.append(_parse_record(obj, abbreviations))
            except (ValueError, KeyError, TypeError) as exc:
                bad_lines.append(lineno)
                details.append(f"line {lineno}: {exc}")
    if bad_lines:
        raise MalformedRecordError(bad_lines, details)
    seen: set[str] = set()
    dups: list[str] = []
    for t in transcripts:
        if t.doc_id in seen and t.doc_id not in dups:
            dups.append(t.doc_id)
        seen.add(t.doc_id)
    if dups:
        raise DuplicateDocIdError(dups)
    corpus = Corpus(transcripts)
    logger.info(
        "ingested %d transcripts, %d sentences from %s",
        len(corpus), corpus.num_sentences, path,
    )
    return corpus


def write_corpus(corpus: Corpus, path: str | Path) -> None:
    """Write a corpus back out as JSONL with pre-segmented sentences."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for t in corpus.iter_transcripts():
            rec = {
                "doc_id": t.doc_id,
                "company_id": t.company_id,
                "call_date": t.call_date.isoformat(),
                "sector": t.sector,
                "sentences": [s.text for s in t.sentences],
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def sample_sentences(
    corpus: Corpus,
    fraction: float | None = None,
    seed: int = 0,
    count: int | None = None,
    exclude: Iterable[str] = (),
) -> SentenceSample:
    """Draw a uniform sample of sentence ids without replacement.

    The draw shuffles the (doc_id, index_j)-ordered sentence list with a
    PCG64 generator seeded by ``seed`` and keeps the prefix, so a given
    (corpus, seed, size) triple always yields the same sample. Exactly one of
    ``fraction`` (sample size ``floor(fraction * population)``) or ``count``
    must be given; ``exclude`` removes ids from the eligible population, which
    is how a second sample is kept disjoint from a first.
    """
    if (fraction is None) == (count is None):
        raise ValueError("exactly one of fraction or count must be given")
    excluded = set(exclude)
    ids = [s.sentence_id for s in corpus.sentences_sorted() if s.sentence_id not in excluded]
    n = len(ids)
    if n == 0:
        raise EmptyCorpusError("no sentences available to sample")
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        k = math.floor(fraction * n)
        recorded_fraction = fraction
    else:
        if not 0 < count <= n:
            raise ValueError(f"count must be in [1, {n}], got {count}")
        k = count
        recorded_fraction = count / n
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    chosen = sorted(
        (ids[i] for i in perm[:k]),
        key=lambda sid: (corpus.sentence(sid).doc_id, corpus.sentence(sid).index_j),
    )
    return SentenceSample(
        fraction=recorded_fraction, seed=seed, sentence_ids=tuple(chosen)
    )


def save_sample(sample: SentenceSample, path: str | Path) -> None:
    payload = {
        "fraction": sample.fraction,
        "seed": sample.seed,
        "sentence_ids": list(sample.sentence_ids),
    }
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_sample(path: str | Path) -> SentenceSample:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return SentenceSample(
        fraction=float(obj["fraction"]),
        seed=int(obj["seed"]),
        sentence_ids=tuple(obj["sentence_ids"]),
    )
