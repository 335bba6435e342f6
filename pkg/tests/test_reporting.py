"""Report bundle assembly and reproducible figure rendering."""
from __future__ import annotations

import json

import pytest

from calldistill.analytics import IcPoint, IcSeries, TrendPoint
from calldistill.errors import NothingToReportError
from calldistill.features import DocumentFeatures, monthly_aggregate
from calldistill.reporting import (
    ReportInputs,
    build_report,
    write_topic_summary_csv,
)
from calldistill.topics import TopicStats


def sample_inputs() -> ReportInputs:
    stats = [
        TopicStats(topic="Earnings", n_k=60, share=0.6),
        TopicStats(topic="Revenue", n_k=30, share=0.3),
        TopicStats(topic="Others", n_k=10, share=0.1),
    ]
    panel = monthly_aggregate([
        DocumentFeatures("a", "C1", "2020-01", "hard",
                         {"Earnings": 0.75, "Revenue": 0.25}, {"Earnings": 0.4}),
        DocumentFeatures("b", "C2", "2020-02", "hard",
                         {"Earnings": 0.5, "Revenue": 0.5}, {"Revenue": -0.1}),
    ])
    series = IcSeries(feature="p_Earnings", method="spearman", horizon=1, min_obs=5)
    series.points = [
        IcPoint("2020-01", 0.2, 0.2, 12, None),
        IcPoint("2020-02", -0.1, 0.1, 12, None),
        IcPoint("2020-03", None, 0.1, 3, "too_few_obs"),
    ]
    trends = {
        "earnings_outlook": [
            TrendPoint("2020-01", "Tech", 0.25, 4),
            TrendPoint("2020-02", "Tech", 0.5, 2),
            TrendPoint("2020-01", "Energy", 0.0, 3),
        ],
    }
    return ReportInputs(
        topic_stats=stats,
        panel=panel,
        ic_series=series,
        trends=trends,
        search_summary={"trials": 50, "best_f1": 0.91},
    )


class TestBuildReport:
    def test_empty_inputs_raise(self, tmp_path):
        with pytest.raises(NothingToReportError):
            build_report(tmp_path / "report", ReportInputs())

    def test_full_bundle_layout(self, tmp_path):
        """All sections produce their CSVs, figures, and summary entries."""
        report_dir = tmp_path / "report"
        written = build_report(report_dir, sample_inputs())
        names = sorted(str(p.relative_to(report_dir)) for p in written)
        assert names == [
            "figures/cumulative_ic.png",
            "figures/panel_sentiment.png",
            "figures/topic_distribution.png",
            "figures/trend_earnings_outlook.png",
            "report.json",
            "topic_summary.csv",
        ]
        for p in written:
            assert p.exists() and p.stat().st_size > 0

    def test_summary_values(self, tmp_path):
        report_dir = tmp_path / "report"
        build_report(report_dir, sample_inputs(), render_figures=False)
        summary = json.loads((report_dir / "report.json").read_text())
        assert summary["sections"] == ["topics", "panel", "ic", "trends", "search"]
        assert summary["topics"] == {
            "count": 3, "total_sentences": 100, "largest": "Earnings",
        }
        assert summary["panel"]["companies"] == 2
        assert summary["panel"]["months"] == 2
        assert summary["panel"]["first_month"] == "2020-01"
        assert summary["ic"]["months_scored"] == 2
        assert summary["ic"]["months_skipped"] == 1
        assert summary["ic"]["mean_ic"] == pytest.approx(0.05)
        assert summary["ic"]["final_cumulative"] == pytest.approx(0.1)
        assert summary["trends"]["earnings_outlook"]["points"] == 3
        assert summary["trends"]["earnings_outlook"]["groups"] == ["Energy", "Tech"]
        assert summary["search"] == {"trials": 50, "best_f1": 0.91}

    def test_no_figures_mode_writes_no_figures(self, tmp_path):
        report_dir = tmp_path / "report"
        written = build_report(report_dir, sample_inputs(), render_figures=False)
        assert not (report_dir / "figures").exists()
        names = sorted(p.name for p in written)
        assert names == ["report.json", "topic_summary.csv"]

    def test_partial_inputs_report_partial_sections(self, tmp_path):
        inputs = ReportInputs(topic_stats=sample_inputs().topic_stats)
        build_report(tmp_path / "report", inputs, render_figures=False)
        summary = json.loads((tmp_path / "report" / "report.json").read_text())
        assert summary["sections"] == ["topics"]
        assert "panel" not in summary

    def test_figures_are_byte_reproducible(self, tmp_path):
        """Rendering the same inputs twice yields identical PNG bytes."""
        first = tmp_path / "one"
        second = tmp_path / "two"
        build_report(first, sample_inputs())
        build_report(second, sample_inputs())
        figures = sorted((first / "figures").iterdir())
        assert figures
        for fig in figures:
            twin = second / "figures" / fig.name
            assert fig.read_bytes() == twin.read_bytes(), fig.name

    def test_topic_summary_csv_layout(self, tmp_path):
        path = tmp_path / "topics.csv"
        write_topic_summary_csv(path, sample_inputs().topic_stats)
        lines = path.read_text().splitlines()
        assert lines[0] == "topic,n_k,share"
        assert lines[1] == "Earnings,60,0.6"
