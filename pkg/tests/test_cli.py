"""Command line pipeline: stage wiring, artifacts, and exit codes."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest
import yaml

from calldistill.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    EXIT_USAGE,
    main,
)
from calldistill.manifest import LOCK_NAME, sha256_file

COMPANIES = [f"C{i:02d}" for i in range(12)]
SECTORS = ("Tech", "Energy", "Retail")
MONTHS = ("2020-01", "2020-02")

TEMPLATES = (
    "Revenue grew {a} percent compared with the prior year.",
    "We expect earnings per share of {a} cents next quarter.",
    "Gross margin expanded {a} basis points on cost discipline.",
    "Guidance for the full year remains between {a} and {b} dollars.",
    "Our buyback program returned {a} million to shareholders.",
    "Operating costs fell {a} percent on lower logistics spend.",
    "Demand across region {b} stayed resilient through the quarter.",
    "Free cash flow reached {a} million, ahead of plan.",
    "We launched {b} new products during the period.",
    "The pipeline for enterprise deals grew {a} percent.",
    "Churn improved to {a} percent of the installed base.",
    "Capital expenditure will rise modestly as we expand capacity phase {b}.",
)


def write_fixture(root: Path) -> tuple[Path, Path, Path]:
    """Deterministic raw transcripts, forward returns, and a pipeline config."""
    raw = root / "raw.jsonl"
    lines = []
    for ci, company in enumerate(COMPANIES):
        sector = SECTORS[ci % len(SECTORS)]
        for mi, month in enumerate(MONTHS):
            doc_id = f"{company}-{month}"
            sentences = [
                template.format(a=ci * 7 + mi * 3 + si, b=si + ci)
                for si, template in enumerate(TEMPLATES)
            ]
            lines.append(json.dumps({
                "doc_id": doc_id,
                "company_id": company,
                "call_date": f"{month}-15",
                "sector": sector,
                "sentences": sentences,
            }, sort_keys=True))
    raw.write_text("\n".join(lines) + "\n", encoding="utf-8")

    returns = root / "returns.csv"
    with returns.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([
            "company_id", "period_start", "period_end", "total_return",
            "sector", "sector_return", "market_cap_weight",
        ])
        for month in ("2020-02", "2020-03"):
            for ci, company in enumerate(COMPANIES):
                sector = SECTORS[ci % len(SECTORS)]
                total = ((ci * 13 + int(month[-2:])) % 11 - 5) / 100.0
                writer.writerow([
                    company, f"{month}-01", f"{month}-28", f"{total:.4f}",
                    sector, "0.0025", "1.0",
                ])

    config = root / "config.yaml"
    config.write_text(yaml.safe_dump({
        "seed": 1234,
        "paths": {"returns": str(returns)},
        "teacher": {
            "mock": {"seed": 7, "topics": ["Earnings", "Revenue", "Guidance", "Others"]},
        },
        "embedding": {"dim": 32},
        "sampling": {
            "discovery": {"fraction": 0.25, "seed": 11},
            "labeling": {"fraction": 0.9, "seed": 13},
        },
        "search": {"trials": 2, "max_epochs": 6, "patience": 1},
        "sentiment": {
            "approach": "direct",
            "max_epochs": 8,
            "patience": 1,
            "config": {
                "hidden_layers": 1, "first_layer_size": 32,
                "learning_rate": 0.005, "batch_size": 16,
            },
        },
        "ic": {"feature": "p_Earnings", "min_obs": 5},
        # wide open bands so the filter keeps every sentence; band logic
        # itself is covered by the unit tests
        "filter": {"theta_hi": 0.0, "theta_med": 0.0, "theta_lo": 1.0},
        "validate": {"sample_size": 8, "seed": 29},
    }, sort_keys=True), encoding="utf-8")
    return raw, returns, config


def run(*argv: str) -> int:
    return main(list(argv))


@pytest.fixture(scope="class")
def pipeline(tmp_path_factory):
    """One fully executed pipeline shared by the artifact assertions."""
    root = tmp_path_factory.mktemp("pipeline")
    raw, returns, config = write_fixture(root)
    out = root / "out"
    base = ("--config", str(config), "--out", str(out))
    stages = (
        ("ingest", str(raw)),
        ("sample", "--role", "discovery"),
        ("sample", "--role", "labeling"),
        ("discover-topics",),
        ("reduce-topics",),
        ("label",),
        ("train-topic",),
        ("train-sentiment",),
        ("score",),
        ("features",),
        ("ic",),
        ("filter",),
        ("trends",),
        ("validate-sample",),
        ("report",),
    )
    for stage in stages:
        code = run(*stage, *base)
        assert code == EXIT_OK, f"stage {stage[0]} exited {code}"
    return root, out, config


@pytest.mark.usefixtures("pipeline")
class TestPipelineArtifacts:
    N_SENTENCES = len(COMPANIES) * len(MONTHS) * len(TEMPLATES)

    def test_corpus_and_samples(self, pipeline):
        _, out, _ = pipeline
        corpus_lines = (out / "corpus.jsonl").read_text().splitlines()
        assert len(corpus_lines) == len(COMPANIES) * len(MONTHS)
        discovery = json.loads((out / "sample_discovery.json").read_text())
        labeling = json.loads((out / "sample_labeling.json").read_text())
        assert len(discovery["sentence_ids"]) == int(0.25 * self.N_SENTENCES)
        assert not set(discovery["sentence_ids"]) & set(labeling["sentence_ids"])

    def test_topics_discovered_and_reduced(self, pipeline):
        _, out, _ = pipeline
        topics = json.loads((out / "topics.json").read_text())["topics"]
        reduced = json.loads((out / "topics_reduced.json").read_text())["topics"]
        assert set(reduced) == {"Earnings", "Revenue", "Guidance", "Others"}
        assert set(reduced) <= set(topics)
        assert (out / "topic_stats.json").exists()
        assert (out / "review_sheet.csv").exists()

    def test_labels_and_attrition(self, pipeline):
        _, out, _ = pipeline
        labels = (out / "labels.jsonl").read_text().splitlines()
        attrition = json.loads((out / "attrition.json").read_text())
        assert attrition["requested"] == len(labels)  # zero noise configured
        assert attrition["well_formed"] == attrition["requested"]
        assert attrition["discarded_format"] == 0
        first = json.loads(labels[0])
        assert set(first) >= {"sentence_id", "topic", "sentiment"}

    def test_models_and_search_artifacts(self, pipeline):
        _, out, _ = pipeline
        assert (out / "topic_model.bin").stat().st_size > 0
        assert (out / "sentiment_model.bin").stat().st_size > 0
        search = json.loads((out / "search_result.json").read_text())
        assert len(search["trials"]) == 2
        assert search["best_config"] in [t["config"] for t in search["trials"]]
        report = json.loads((out / "sentiment_report.json").read_text())
        assert report["approach"] == "direct"
        assert "direct" in report["stages"]
        assert (out / "split_plan.json").exists()
        assert (out / "embeddings.bin").stat().st_size > 0

    def test_scores_cover_every_sentence(self, pipeline):
        _, out, _ = pipeline
        with (out / "scores.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == self.N_SENTENCES
        assert set(r["predicted_topic"] for r in rows) <= {
            "Earnings", "Revenue", "Guidance", "Others",
        }

    def test_panel_has_a_row_per_company_month(self, pipeline):
        _, out, _ = pipeline
        with (out / "panel.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == len(COMPANIES) * len(MONTHS)
        assert {r["month"] for r in rows} == set(MONTHS)

    def test_ic_series_spans_both_months(self, pipeline):
        _, out, _ = pipeline
        series = json.loads((out / "ic_series.json").read_text())
        assert series["feature"] == "p_Earnings"
        assert [p["period"] for p in series["points"]] == list(MONTHS)
        for point in series["points"]:
            assert point["skipped_reason"] is None
            assert point["n_obs"] == len(COMPANIES)
        lines = (out / "ic.csv").read_text().splitlines()
        assert lines[0] == "month,ic,cumulative,n_obs,skipped_reason"
        assert len(lines) == 1 + len(MONTHS)

    def test_filter_keeps_everything_under_open_bands(self, pipeline):
        _, out, _ = pipeline
        with (out / "filtered.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        targets = {r["target"] for r in rows}
        assert targets == {
            "earnings_outlook", "earnings_trailing",
            "revenue_outlook", "revenue_trailing",
        }
        assert len(rows) == 4 * self.N_SENTENCES

    def test_trend_files_per_target(self, pipeline):
        _, out, _ = pipeline
        for target in ("earnings_outlook", "earnings_trailing",
                       "revenue_outlook", "revenue_trailing"):
            lines = (out / f"trends_{target}.csv").read_text().splitlines()
            assert lines[0] == "period,group,negativity,n_sentences"
            assert len(lines) > 1

    def test_review_export_and_scoring(self, pipeline):
        root, out, config = pipeline
        with (out / "review_sample.csv").open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4 * 8  # sample_size per target
        assert all(r["relevant"] == "" for r in rows)

        filled = root / "review_filled.csv"
        with filled.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["target", "sentence_id", "text", "relevant"])
            writer.writeheader()
            for i, row in enumerate(rows):
                row["relevant"] = "1" if i % 2 == 0 else "0"
                writer.writerow(row)
        code = run("validate-sample", "--review", str(filled),
                   "--config", str(config), "--out", str(out))
        assert code == EXIT_OK
        accuracy = json.loads((out / "review_accuracy.json").read_text())
        assert set(accuracy) == {
            "earnings_outlook", "earnings_trailing",
            "revenue_outlook", "revenue_trailing",
        }
        assert all(a == 0.5 for a in accuracy.values())

    def test_report_bundle(self, pipeline):
        _, out, _ = pipeline
        report = json.loads((out / "report" / "report.json").read_text())
        assert report["sections"] == ["topics", "panel", "ic", "trends", "search"]
        figures = sorted(p.name for p in (out / "report" / "figures").iterdir())
        assert "cumulative_ic.png" in figures
        assert "topic_distribution.png" in figures
        assert (out / "report" / "config_effective.json").exists()

    def test_manifests_are_deterministic_records(self, pipeline):
        """Stage manifests carry null timings and relative output paths."""
        _, out, _ = pipeline
        manifest = json.loads((out / "manifest_ingest.json").read_text())
        assert manifest["created_at"] is None
        assert manifest["elapsed_seconds"] is None
        assert manifest["config"]["paths"]["out_dir"] == "."
        entry = manifest["outputs"]["corpus"]
        assert entry["path"] == "corpus.jsonl"
        assert entry["sha256"] == sha256_file(out / "corpus.jsonl")
        assert not (out / LOCK_NAME).exists()


class TestDeterminism:
    def test_repeated_stage_is_byte_identical(self, tmp_path):
        """The same raw input produces identical bytes in fresh directories."""
        raw, _, config = write_fixture(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        for out in (out_a, out_b):
            assert run("ingest", str(raw), "--config", str(config),
                       "--out", str(out)) == EXIT_OK
            assert run("sample", "--role", "discovery", "--config", str(config),
                       "--out", str(out)) == EXIT_OK
        for name in ("corpus.jsonl", "sample_discovery.json",
                     "manifest_ingest.json", "manifest_sample_discovery.json"):
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name


class TestExitCodes:
    def test_no_command_is_usage(self):
        assert run() == EXIT_USAGE

    def test_unknown_command_is_usage(self):
        assert run("distill-everything") == EXIT_USAGE

    def test_missing_required_option_is_usage(self, tmp_path):
        assert run("sample", "--out", str(tmp_path)) == EXIT_USAGE

    def test_help_exits_clean(self):
        assert run("--help") == EXIT_OK

    def test_missing_ingest_input_is_config_error(self, tmp_path):
        assert run("ingest", str(tmp_path / "nope.jsonl"),
                   "--out", str(tmp_path / "out")) == EXIT_CONFIG

    def test_unknown_config_key_is_config_error(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("temperature: 0.7\n")
        assert run("ingest", "--config", str(config),
                   "--out", str(tmp_path / "out")) == EXIT_CONFIG

    def test_invalid_choice_value_is_config_error(self, tmp_path):
        config = tmp_path / "config.yaml"
        config.write_text("features:\n  mode: fuzzy\n")
        assert run("features", "--config", str(config),
                   "--out", str(tmp_path / "out")) == EXIT_CONFIG

    def test_missing_stage_inputs_are_config_errors(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        assert run("features", "--out", str(out)) == EXIT_CONFIG
        assert run("ic", "--out", str(out)) == EXIT_CONFIG

    def test_malformed_raw_input_is_runtime_error(self, tmp_path):
        raw = tmp_path / "raw.jsonl"
        raw.write_text('{"doc_id": "d1"\n')
        assert run("ingest", str(raw), "--out", str(tmp_path / "out")) == EXIT_RUNTIME

    def test_held_lock_is_runtime_error(self, tmp_path):
        raw, _, config = write_fixture(tmp_path)
        out = tmp_path / "out"
        out.mkdir()
        (out / LOCK_NAME).touch()
        assert run("ingest", str(raw), "--config", str(config),
                   "--out", str(out)) == EXIT_RUNTIME

    def test_report_without_artifacts_is_runtime_error(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        assert run("report", "--out", str(out)) == EXIT_RUNTIME

    def test_seed_override_lands_in_manifest(self, tmp_path):
        raw, _, config = write_fixture(tmp_path)
        out = tmp_path / "out"
        assert run("ingest", str(raw), "--config", str(config),
                   "--out", str(out), "--seed", "99") == EXIT_OK
        manifest = json.loads((out / "manifest_ingest.json").read_text())
        assert manifest["config"]["seed"] == 99
