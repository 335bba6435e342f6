"""Prompt construction, response parsing, the deterministic mock teacher,
and the durable labeling loop."""
from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from calldistill.corpus import Corpus, sample_sentences
from calldistill.errors import (
    BatchTooLargeError,
    EmptyBatchError,
    EmptyTopicListError,
    EndpointUnreachableError,
    MalformedResponseError,
    ResumeStateError,
    TransportError,
)
from calldistill.teacher import (
    CLASSIFICATION_TEMPLATE,
    HttpTeacherEndpoint,
    MockTeacherEndpoint,
    ParsedLabel,
    RetryPolicy,
    SENTIMENT_INSTRUCTION,
    TOPIC_DISCOVERY_FORMAT,
    TOPIC_DISCOVERY_QUESTION,
    AttritionReport,
    Discard,
    build_classification_prompt,
    build_sentiment_augment_prompt,
    build_topic_discovery_prompt,
    discover_topics,
    label_dataset,
    make_teacher_endpoint,
    parse_classification,
    parse_topic_list,
)

from conftest import FIXTURES, make_transcript

SENTENCES = [
    "Revenue grew 12% year over year.",
    "We expect margins to compress in the second half.",
    "The board approved a $500 million buyback.",
]
TOPICS = ["Earnings", "Revenue", "Guidance"]


def big_corpus(n: int) -> Corpus:
    return Corpus([make_transcript("doc", [f"Sentence number {i} is here." for i in range(n)])])


class TestPromptTexts:
    def test_discovery_question_verbatim(self):
        """The discovery question is fixed text; any drift breaks the teacher."""
        assert TOPIC_DISCOVERY_QUESTION == (
            "Can you provide financial topics that would describe the "
            "following sentences using a general classification?"
        )
        assert TOPIC_DISCOVERY_FORMAT == (
            "Format your answer by separating all the detected topics "
            "with semi-colons."
        )

    def test_classification_template_verbatim(self):
        assert CLASSIFICATION_TEMPLATE == (
            "Considering the following list of topics: [list of topics], "
            "could you provide a classification on the following sentences "
            "topics? Please format your answer in the following way: "
            "Topic: Topic identified."
        )

    def test_sentiment_instruction_verbatim(self):
        assert SENTIMENT_INSTRUCTION == (
            "Please also share your view on the financial statement's "
            "sentiment, categorizing it as either Negative, Neutral, or "
            "Positive. Structure your response in the format: "
            "Sentiment: [Negative/Neutral/Positive]."
        )
        assert build_sentiment_augment_prompt() == SENTIMENT_INSTRUCTION

    def test_discovery_prompt_matches_golden(self):
        expected = (FIXTURES / "prompt_topic_discovery.txt").read_text("utf-8")
        assert build_topic_discovery_prompt(SENTENCES) == expected

    def test_classification_prompt_matches_golden(self):
        expected = (FIXTURES / "prompt_classification.txt").read_text("utf-8")
        assert build_classification_prompt(TOPICS, SENTENCES) == expected

    def test_classification_with_sentiment_matches_golden(self):
        expected = (FIXTURES / "prompt_classification_sentiment.txt").read_text("utf-8")
        got = build_classification_prompt(TOPICS, SENTENCES, with_sentiment=True)
        assert got == expected

    def test_empty_batch_rejected(self):
        with pytest.raises(EmptyBatchError):
            build_topic_discovery_prompt([])
        with pytest.raises(EmptyBatchError):
            build_classification_prompt(TOPICS, [])

    def test_oversize_batch_rejected(self):
        with pytest.raises(BatchTooLargeError):
            build_topic_discovery_prompt(["x."] * 21, limit=20)

    def test_empty_topic_list_rejected(self):
        with pytest.raises(EmptyTopicListError):
            build_classification_prompt([], SENTENCES)


class TestParseTopicList:
    def test_splits_on_semicolons_and_trims(self):
        raw = " Earnings ; Revenue;  Guidance ;"
        assert parse_topic_list(raw) == ["Earnings", "Revenue", "Guidance"]

    def test_dedupes_case_insensitively_keeping_first_casing(self):
        assert parse_topic_list("Margins; MARGINS; margins; Debt") == ["Margins", "Debt"]

    def test_rejects_responses_without_topics(self):
        with pytest.raises(MalformedResponseError):
            parse_topic_list(" ;; ; ")


class TestParseClassification:
    def test_topic_only_blocks(self):
        raw = "Topic: Earnings\nTopic: Revenue"
        out = parse_classification(raw, TOPICS)
        assert out == [ParsedLabel("Earnings"), ParsedLabel("Revenue")]

    def test_topic_and_sentiment_blocks(self):
        raw = "Topic: Earnings\nSentiment: Positive\nTopic: Revenue\nSentiment: Negative"
        out = parse_classification(raw, TOPICS, expect_sentiment=True)
        assert out == [
            ParsedLabel("Earnings", "Positive"),
            ParsedLabel("Revenue", "Negative"),
        ]

    def test_topic_canonicalized_to_allowed_casing(self):
        out = parse_classification("Topic: earnings", TOPICS)
        assert out == [ParsedLabel("Earnings")]

    def test_unknown_topic_discarded_with_reason(self):
        out = parse_classification("Topic: Weather", TOPICS)
        assert out == [Discard("unknown_topic", "Topic: Weather")]

    def test_missing_prefix_is_a_format_discard(self):
        out = parse_classification("Earnings", TOPICS)
        assert out[0].reason == "bad_format"

    def test_off_scale_sentiment_discarded_as_bad_sentiment(self):
        raw = "Topic: Earnings\nSentiment: Mixed"
        out = parse_classification(raw, TOPICS, expect_sentiment=True)
        assert out == [Discard("bad_sentiment", "Sentiment: Mixed")]

    def test_sentiment_value_case_and_period_tolerated(self):
        raw = "Topic: Earnings\nSentiment: positive."
        out = parse_classification(raw, TOPICS, expect_sentiment=True)
        assert out == [ParsedLabel("Earnings", "Positive")]

    def test_missing_tail_blocks_become_discards(self):
        """expected_count pads short responses with format discards."""
        out = parse_classification("Topic: Earnings", TOPICS, expected_count=3)
        assert out[0] == ParsedLabel("Earnings")
        assert [d.reason for d in out[1:]] == ["bad_format", "bad_format"]

    def test_prose_around_the_marker_is_tolerated(self):
        out = parse_classification("1. Topic: Revenue", TOPICS)
        assert out == [ParsedLabel("Revenue")]

    @given(st.text(max_size=400), st.booleans())
    @settings(max_examples=150, deadline=None)
    def test_total_over_arbitrary_text(self, raw, expect_sentiment):
        """The parser classifies every block; it never raises."""
        out = parse_classification(raw, TOPICS, expect_sentiment=expect_sentiment)
        for item in out:
            assert isinstance(item, (ParsedLabel, Discard))

    @given(st.text(max_size=400), st.integers(min_value=0, max_value=10))
    @settings(max_examples=100, deadline=None)
    def test_expected_count_always_honoured(self, raw, n):
        assert len(parse_classification(raw, TOPICS, expected_count=n)) == n


class TestAttritionReport:
    def test_counts_must_balance(self):
        AttritionReport(10, 7, 2, 1)
        with pytest.raises(ValueError):
            AttritionReport(10, 7, 2, 2)

    def test_to_dict_round_trip(self):
        report = AttritionReport(5, 3, 1, 1)
        assert report.to_dict() == {
            "requested": 5, "well_formed": 3,
            "discarded_format": 1, "discarded_unknown_topic": 1,
        }


class TestMockEndpoint:
    def test_same_prompt_same_offset_same_response(self):
        prompt = build_classification_prompt(TOPICS, SENTENCES, with_sentiment=True)
        a = MockTeacherEndpoint(seed=3).complete(prompt, offset=0)
        b = MockTeacherEndpoint(seed=3).complete(prompt, offset=0)
        assert a == b

    def test_label_depends_only_on_text_and_seed(self):
        """The same sentence gets the same label in any batch position."""
        e = MockTeacherEndpoint(seed=3)
        p1 = build_classification_prompt(TOPICS, ["Alpha.", "Beta."])
        p2 = build_classification_prompt(TOPICS, ["Gamma.", "Alpha."])
        r1 = parse_classification(e.complete(p1, offset=0), TOPICS)
        r2 = parse_classification(e.complete(p2, offset=100), TOPICS)
        assert r1[0] == r2[1]

    def test_seed_changes_labels(self):
        prompt = build_classification_prompt(TOPICS, [f"Item {i}." for i in range(12)])
        a = MockTeacherEndpoint(seed=1).complete(prompt, offset=0)
        b = MockTeacherEndpoint(seed=2).complete(prompt, offset=0)
        assert a != b

    def test_discovery_response_parses_to_topics(self):
        e = MockTeacherEndpoint(seed=0)
        raw = e.complete(build_topic_discovery_prompt(SENTENCES))
        topics = parse_topic_list(raw)
        assert topics
        assert len(set(t.lower() for t in topics)) == len(topics)

    def test_fixture_labels_override_hashing(self):
        e = MockTeacherEndpoint(
            seed=0, fixture_labels={"Alpha.": ("Revenue", "Negative")}
        )
        prompt = build_classification_prompt(TOPICS, ["Alpha."], with_sentiment=True)
        out = parse_classification(e.complete(prompt, offset=0), TOPICS, True)
        assert out == [ParsedLabel("Revenue", "Negative")]

    @pytest.mark.parametrize("rate", [0.0, 0.1, 0.25, 0.375, 0.5, 1.0])
    def test_single_rate_staircase_is_exact(self, rate):
        """A corruption rate r over n sentences discards exactly floor(n*r)."""
        n = 40
        texts = [f"Sentence number {i} is here." for i in range(n)]
        e = MockTeacherEndpoint(seed=5, bad_format_rate=rate)
        discards = 0
        for start in range(0, n, 10):
            prompt = build_classification_prompt(TOPICS, texts[start:start + 10])
            parsed = parse_classification(
                e.complete(prompt, offset=start), TOPICS, expected_count=10
            )
            discards += sum(1 for p in parsed if isinstance(p, Discard))
        assert discards == math.floor(n * rate)

    def test_mixed_rates_match_floor_oracle(self):
        """Discard counts per bucket equal an independent floor-arithmetic
        enumeration of the priority schedule."""
        n, rates = 60, (0.2, 0.15, 0.1)
        f_rate, u_rate, s_rate = rates

        def hit(i, r):
            return math.floor((i + 1) * r) - math.floor(i * r) >= 1

        want = {"bad_format": 0, "unknown_topic": 0, "bad_sentiment": 0}
        for i in range(n):
            if hit(i, f_rate):
                want["bad_format"] += 1
            elif hit(i, u_rate):
                want["unknown_topic"] += 1
            elif hit(i, s_rate):
                want["bad_sentiment"] += 1

        texts = [f"Mixed case sentence {i}." for i in range(n)]
        e = MockTeacherEndpoint(
            seed=9, bad_format_rate=f_rate,
            unknown_topic_rate=u_rate, bad_sentiment_rate=s_rate,
        )
        got = {"bad_format": 0, "unknown_topic": 0, "bad_sentiment": 0}
        for start in range(0, n, 20):
            prompt = build_classification_prompt(
                TOPICS, texts[start:start + 20], with_sentiment=True
            )
            for item in parse_classification(
                e.complete(prompt, offset=start), TOPICS, True, expected_count=20
            ):
                if isinstance(item, Discard):
                    got[item.reason] += 1
        assert got == want

    def test_offset_makes_noise_independent_of_call_order(self):
        """Explicit offsets let batches run in any order with identical noise."""
        texts = [f"Order test {i}." for i in range(20)]
        p1 = build_classification_prompt(TOPICS, texts[:10])
        p2 = build_classification_prompt(TOPICS, texts[10:])
        forward = MockTeacherEndpoint(seed=1, bad_format_rate=0.3)
        r1, r2 = forward.complete(p1, offset=0), forward.complete(p2, offset=10)
        backward = MockTeacherEndpoint(seed=1, bad_format_rate=0.3)
        q2, q1 = backward.complete(p2, offset=10), backward.complete(p1, offset=0)
        assert (r1, r2) == (q1, q2)

    def test_factory_parses_mock_url_parameters(self):
        e = make_teacher_endpoint("mock:?seed=11&bad_format_rate=0.25")
        assert isinstance(e, MockTeacherEndpoint)
        assert e.seed == 11
        assert e.bad_format_rate == 0.25

    def test_factory_builds_http_endpoint_for_urls(self):
        e = make_teacher_endpoint("http://example.invalid/v1", model="m")
        assert isinstance(e, HttpTeacherEndpoint)


class TestRetry:
    def test_backoff_sequence_then_success(self):
        delays: list[float] = []
        endpoint = MockTeacherEndpoint(seed=0, fail_requests={0, 1})
        policy = RetryPolicy(max_retries=3, backoff_base=0.5, parallel=1,
                             sleeper=delays.append)
        prompt = build_classification_prompt(TOPICS, ["Alpha."])
        corpus = Corpus([make_transcript("d", ["Alpha."])])
        sample = sample_sentences(corpus, fraction=1.0, seed=0)
        labels, report = label_dataset(
            corpus, sample, TOPICS, endpoint, policy, with_sentiment=False
        )
        assert delays == [0.5, 1.0]
        assert report.well_formed == 1
        assert prompt  # silence unused warning in readers

    def test_unreachable_after_exhausting_retries(self):
        endpoint = MockTeacherEndpoint(seed=0, fail_always=True)
        policy = RetryPolicy(max_retries=2, parallel=1, sleeper=lambda _d: None)
        corpus = Corpus([make_transcript("d", ["Alpha."])])
        sample = sample_sentences(corpus, fraction=1.0, seed=0)
        with pytest.raises(EndpointUnreachableError):
            label_dataset(corpus, sample, TOPICS, endpoint, policy)

    def test_http_transport_failure_raises(self):
        endpoint = HttpTeacherEndpoint("http://127.0.0.1:9/complete", model="m")
        with pytest.raises(TransportError):
            endpoint.complete("ping")


class TestLabelDataset:
    def run(self, n=40, batch=10, parallel=4, state_dir=None, endpoint=None, **kw):
        corpus = big_corpus(n)
        sample = sample_sentences(corpus, fraction=1.0, seed=0)
        endpoint = endpoint or MockTeacherEndpoint(seed=5, **kw)
        policy = RetryPolicy(parallel=parallel, sleeper=lambda _d: None)
        return label_dataset(
            corpus, sample, TOPICS, endpoint, policy,
            batch_size=batch, state_dir=state_dir,
        )

    def test_labels_all_sentences_when_noise_free(self):
        labels, report = self.run()
        assert report.requested == 40
        assert report.well_formed == 40
        assert [l.sentence_id for l in labels] == sorted(l.sentence_id for l in labels)
        for label in labels:
            assert label.topic in TOPICS
            assert label.sentiment in ("Negative", "Neutral", "Positive")

    def test_exact_attrition_at_rate(self):
        labels, report = self.run(bad_format_rate=0.375)
        assert report.requested == 40
        assert report.discarded_format == 15  # floor(40 * 0.375)
        assert report.well_formed == 25

    def test_parallel_equals_sequential(self):
        seq_labels, seq_report = self.run(parallel=1, bad_format_rate=0.2)
        par_labels, par_report = self.run(parallel=4, bad_format_rate=0.2)
        assert seq_labels == par_labels
        assert seq_report == par_report

    def test_resume_after_failure_matches_clean_run(self, tmp_path):
        state = tmp_path / "state"
        failing = MockTeacherEndpoint(
            seed=5, fail_requests={2, 3, 4, 5}
        )
        policy = RetryPolicy(max_retries=3, parallel=1, sleeper=lambda _d: None)
        corpus = big_corpus(40)
        sample = sample_sentences(corpus, fraction=1.0, seed=0)
        with pytest.raises(EndpointUnreachableError):
            label_dataset(corpus, sample, TOPICS, failing, policy,
                          batch_size=10, state_dir=state)
        cursor = json.loads((state / "label_cursor.json").read_text("utf-8"))
        assert cursor["next_batch"] == 2

        resumed, resumed_report = label_dataset(
            corpus, sample, TOPICS, MockTeacherEndpoint(seed=5), policy,
            batch_size=10, state_dir=state,
        )
        clean, clean_report = self.run(parallel=1)
        assert resumed == clean
        assert resumed_report == clean_report

    def test_responses_carry_logical_timestamps(self, tmp_path):
        """Mock runs record counter-based timestamps, not wall-clock ones."""
        state = tmp_path / "state"
        self.run(n=20, state_dir=state)
        lines = (state / "responses.jsonl").read_text("utf-8").splitlines()
        assert len(lines) == 2
        for line in lines:
            assert json.loads(line)["received_at"].startswith("1970-01-01T00:00:00")

    def test_resume_with_different_sample_rejected(self, tmp_path):
        state = tmp_path / "state"
        self.run(state_dir=state)
        corpus = big_corpus(40)
        other = sample_sentences(corpus, fraction=0.5, seed=1)
        with pytest.raises(ResumeStateError):
            label_dataset(
                corpus, other, TOPICS, MockTeacherEndpoint(seed=5),
                RetryPolicy(parallel=1, sleeper=lambda _d: None),
                batch_size=10, state_dir=state,
            )

    def test_source_recorded_on_labels(self):
        corpus = big_corpus(4)
        sample = sample_sentences(corpus, fraction=1.0, seed=0)
        labels, _ = label_dataset(
            corpus, sample, TOPICS, MockTeacherEndpoint(seed=5),
            RetryPolicy(parallel=1, sleeper=lambda _d: None),
            source="preliminary_teacher",
        )
        assert {l.source for l in labels} == {"preliminary_teacher"}


class TestDiscoverTopics:
    def test_returns_deduplicated_topics(self):
        corpus = big_corpus(30)
        sample = sample_sentences(corpus, fraction=1.0, seed=0)
        policy = RetryPolicy(parallel=1, sleeper=lambda _d: None)
        topics = discover_topics(corpus, sample, MockTeacherEndpoint(seed=2), policy)
        assert topics
        assert len({t.lower() for t in topics}) == len(topics)

    def test_deterministic_for_fixed_seed(self):
        corpus = big_corpus(30)
        sample = sample_sentences(corpus, fraction=1.0, seed=0)
        policy = RetryPolicy(parallel=1, sleeper=lambda _d: None)
        a = discover_topics(corpus, sample, MockTeacherEndpoint(seed=2), policy)
        b = discover_topics(corpus, sample, MockTeacherEndpoint(seed=2), policy)
        assert a == b
