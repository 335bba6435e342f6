"""Shared fixtures: tiny corpora, mock endpoints, fixture paths."""
from __future__ import annotations

import json
from datetime import date
from pathlib import Path

import pytest

from calldistill.corpus import Corpus, Sentence, Transcript

FIXTURES = Path(__file__).parent / "fixtures"


def make_transcript(
    doc_id: str,
    texts: list[str],
    company_id: str = "C1",
    call_date: date = date(2020, 1, 15),
    sector: str = "Tech",
) -> Transcript:
    sentences = [
        Sentence(
            sentence_id=f"{doc_id}:{j:05d}",
            doc_id=doc_id,
            index_j=j,
            text=t,
            word_count=len(t.split()),
        )
        for j, t in enumerate(texts)
    ]
    return Transcript(
        doc_id=doc_id, company_id=company_id, call_date=call_date,
        sector=sector, sentences=sentences,
    )


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def tiny_corpus() -> Corpus:
    """Three documents, two companies, two sectors, eleven sentences."""
    return Corpus([
        make_transcript(
            "doc-a", [
                "Revenue grew 12% year over year.",
                "We expect margins to compress in the second half.",
                "The board approved a buyback.",
                "Churn remained low.",
            ],
            company_id="C1", call_date=date(2020, 1, 15), sector="Tech",
        ),
        make_transcript(
            "doc-b", [
                "Earnings missed our guidance.",
                "Costs rose sharply.",
                "We are cutting spend.",
            ],
            company_id="C2", call_date=date(2020, 1, 20), sector="Energy",
        ),
        make_transcript(
            "doc-c", [
                "Guidance for next year is strong.",
                "Demand is stable.",
                "Pricing held up well.",
                "Dividend unchanged.",
            ],
            company_id="C1", call_date=date(2020, 2, 10), sector="Tech",
        ),
    ])


@pytest.fixture
def raw_transcripts_file(tmp_path: Path) -> Path:
    """A small raw JSONL file with one pre-segmented and one raw-text record."""
    records = [
        {
            "doc_id": "raw-1", "company_id": "C9", "call_date": "2021-03-01",
            "sector": "Retail",
            "sentences": ["Sales were flat.", "Inventory is heavy."],
        },
        {
            "doc_id": "raw-2", "company_id": "C9", "call_date": "2021-06-01",
            "sector": "Retail",
            "text": "Traffic improved. Margins, i.e. gross margins, held.",
        },
    ]
    path = tmp_path / "raw.jsonl"
    path.write_text(
        "".join(json.dumps(r, sort_keys=True) + "\n" for r in records),
        encoding="utf-8",
    )
    return path
