"""Corpus ingestion, sentence segmentation, and seeded sampling."""
from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calldistill.corpus import (
    Corpus,
    DEFAULT_ABBREVIATIONS,
    ingest_transcripts,
    load_sample,
    sample_sentences,
    save_sample,
    split_sentences,
    write_corpus,
)
from calldistill.errors import (
    DuplicateDocIdError,
    EmptyCorpusError,
    MalformedRecordError,
)

from conftest import FIXTURES, make_transcript

_CASES = json.loads((FIXTURES / "segmentation_cases.json").read_text("utf-8"))["cases"]


class TestSplitSentences:
    @pytest.mark.parametrize(
        "raw, expected",
        [(c["raw"], c["expected"]) for c in _CASES],
        ids=[c["raw"][:32] for c in _CASES],
    )
    def test_hand_segmented_cases(self, raw, expected):
        """Each fixture case was segmented by hand from the documented rule."""
        assert split_sentences(raw) == expected

    def test_empty_input_gives_no_sentences(self):
        """Blank or whitespace-only text segments to nothing."""
        assert split_sentences("") == []
        assert split_sentences("   \n\t ") == []

    def test_custom_abbreviations_override_defaults(self):
        """A caller-supplied abbreviation list replaces the default one."""
        raw = "Dr. Jones spoke. Then Q&A."
        assert split_sentences(raw) == ["Dr.", "Jones spoke.", "Then Q&A."]
        custom = DEFAULT_ABBREVIATIONS + ("Dr.",)
        assert split_sentences(raw, custom) == ["Dr. Jones spoke.", "Then Q&A."]

    @given(st.text(max_size=300))
    @settings(max_examples=200, deadline=None)
    def test_whitespace_collapsed_round_trip(self, raw):
        """Joining the sentences reproduces the whitespace-collapsed input."""
        sentences = split_sentences(raw)
        assert " ".join(sentences) == " ".join(raw.split())

    @given(st.text(max_size=300))
    @settings(max_examples=200, deadline=None)
    def test_sentences_are_nonempty(self, raw):
        for s in split_sentences(raw):
            assert s.strip() == s
            assert s


class TestIngest:
    def test_reads_presegmented_and_raw_records(self, raw_transcripts_file):
        corpus = ingest_transcripts(raw_transcripts_file)
        assert len(corpus) == 2
        assert corpus.num_sentences == 4
        t = corpus.transcripts["raw-2"]
        assert [s.text for s in t.sentences] == [
            "Traffic improved.",
            "Margins, i.e. gross margins, held.",
        ]

    def test_sentence_ids_sort_in_document_order(self, raw_transcripts_file):
        """Lexicographic id order must equal positional order."""
        corpus = ingest_transcripts(raw_transcripts_file)
        ids = [s.sentence_id for s in corpus.sentences_sorted()]
        assert ids == sorted(ids)
        assert ids[0] == "raw-1:00000"

    def test_month_property(self, raw_transcripts_file):
        corpus = ingest_transcripts(raw_transcripts_file)
        assert corpus.transcripts["raw-1"].month == "2021-03"

    def test_all_malformed_lines_reported(self, tmp_path):
        """Every bad line is collected before the ingest aborts."""
        lines = [
            json.dumps({"doc_id": "ok", "company_id": "C", "call_date": "2020-01-01",
                        "sector": "S", "sentences": ["Fine."]}),
            "not json at all",
            json.dumps({"company_id": "C"}),
            json.dumps({"doc_id": "x", "company_id": "C",
                        "call_date": "never", "sector": "S", "text": "Hi."}),
        ]
        path = tmp_path / "bad.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        with pytest.raises(MalformedRecordError) as err:
            ingest_transcripts(path)
        assert err.value.lines == [2, 3, 4]

    def test_duplicate_doc_ids_rejected(self, tmp_path):
        rec = {"doc_id": "dup", "company_id": "C", "call_date": "2020-01-01",
               "sector": "S", "sentences": ["One."]}
        path = tmp_path / "dup.jsonl"
        path.write_text(json.dumps(rec) + "\n" + json.dumps(rec) + "\n", "utf-8")
        with pytest.raises(DuplicateDocIdError) as err:
            ingest_transcripts(path)
        assert "dup" in str(err.value)

    def test_blank_lines_skipped(self, tmp_path):
        rec = {"doc_id": "a", "company_id": "C", "call_date": "2020-01-01",
               "sector": "S", "sentences": ["One."]}
        path = tmp_path / "gaps.jsonl"
        path.write_text("\n" + json.dumps(rec) + "\n\n", "utf-8")
        assert len(ingest_transcripts(path)) == 1

    def test_write_then_ingest_round_trips(self, raw_transcripts_file, tmp_path):
        corpus = ingest_transcripts(raw_transcripts_file)
        out = tmp_path / "canonical.jsonl"
        write_corpus(corpus, out)
        again = ingest_transcripts(out)
        assert [s.text for s in again.sentences_sorted()] == [
            s.text for s in corpus.sentences_sorted()
        ]
        # canonical file is byte-stable under a second round trip
        out2 = tmp_path / "canonical2.jsonl"
        write_corpus(again, out2)
        assert out.read_bytes() == out2.read_bytes()


class TestSampling:
    def test_fraction_size_law(self, tiny_corpus):
        """Sample size is floor(fraction * population)."""
        n = tiny_corpus.num_sentences
        for fraction in (0.1, 0.25, 0.5, 0.9, 1.0):
            sample = sample_sentences(tiny_corpus, fraction=fraction, seed=3)
            assert len(sample.sentence_ids) == math.floor(fraction * n)

    def test_same_seed_same_sample(self, tiny_corpus):
        a = sample_sentences(tiny_corpus, fraction=0.5, seed=42)
        b = sample_sentences(tiny_corpus, fraction=0.5, seed=42)
        assert a.sentence_ids == b.sentence_ids

    def test_different_seed_different_sample(self, tiny_corpus):
        draws = {
            sample_sentences(tiny_corpus, fraction=0.5, seed=s).sentence_ids
            for s in range(8)
        }
        assert len(draws) > 1

    def test_ids_sorted_by_document_position(self, tiny_corpus):
        sample = sample_sentences(tiny_corpus, fraction=0.8, seed=1)
        keys = [
            (tiny_corpus.sentence(sid).doc_id, tiny_corpus.sentence(sid).index_j)
            for sid in sample.sentence_ids
        ]
        assert keys == sorted(keys)

    def test_exclude_keeps_samples_disjoint(self, tiny_corpus):
        first = sample_sentences(tiny_corpus, fraction=0.4, seed=7)
        second = sample_sentences(
            tiny_corpus, fraction=0.5, seed=8, exclude=first.sentence_ids
        )
        assert not set(first.sentence_ids) & set(second.sentence_ids)
        # size law applies to the reduced population
        remaining = tiny_corpus.num_sentences - len(first.sentence_ids)
        assert len(second.sentence_ids) == math.floor(0.5 * remaining)

    def test_count_mode(self, tiny_corpus):
        sample = sample_sentences(tiny_corpus, count=5, seed=0)
        assert len(sample.sentence_ids) == 5
        assert sample.fraction == 5 / tiny_corpus.num_sentences

    def test_exactly_one_of_fraction_and_count(self, tiny_corpus):
        with pytest.raises(ValueError):
            sample_sentences(tiny_corpus, fraction=0.5, count=3)
        with pytest.raises(ValueError):
            sample_sentences(tiny_corpus)

    def test_fraction_bounds(self, tiny_corpus):
        with pytest.raises(ValueError):
            sample_sentences(tiny_corpus, fraction=0.0)
        with pytest.raises(ValueError):
            sample_sentences(tiny_corpus, fraction=1.5)

    def test_empty_population_rejected(self, tiny_corpus):
        everything = [s.sentence_id for s in tiny_corpus.sentences_sorted()]
        with pytest.raises(EmptyCorpusError):
            sample_sentences(tiny_corpus, fraction=0.5, exclude=everything)
        with pytest.raises(EmptyCorpusError):
            sample_sentences(Corpus([]), fraction=0.5)

    def test_save_load_round_trip(self, tiny_corpus, tmp_path):
        sample = sample_sentences(tiny_corpus, fraction=0.5, seed=5)
        path = tmp_path / "sample.json"
        save_sample(sample, path)
        loaded = load_sample(path)
        assert loaded == sample

    @given(
        fraction=st.floats(min_value=0.01, max_value=1.0,
                           allow_nan=False, allow_infinity=False),
        seed=st.integers(min_value=0, max_value=2**31),
    )
    @settings(max_examples=60, deadline=None)
    def test_size_law_holds_for_any_fraction(self, fraction, seed):
        """floor law and uniqueness hold across the fraction range."""
        corpus = Corpus([make_transcript("d", [f"Sentence {i}." for i in range(23)])])
        sample = sample_sentences(corpus, fraction=fraction, seed=seed)
        assert len(sample.sentence_ids) == math.floor(fraction * 23)
        assert len(set(sample.sentence_ids)) == len(sample.sentence_ids)
