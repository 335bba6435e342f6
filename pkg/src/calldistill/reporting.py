"""Report bundle: one directory with machine-readable summaries and figures.

The bundle collects whatever upstream stages produced (topic statistics,
the monthly feature panel, information-coefficient series, negativity
trends) into ``report.json`` plus CSV copies, and renders PNG figures for
the pieces that benefit from a picture. Rendering uses the Agg canvas
directly with pinned metadata so the bytes are reproducible run to run.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .analytics import IcSeries, TrendPoint
from .errors import NothingToReportError
from .features import MonthlyFeaturePanel
from .manifest import write_json_atomic
from .topics import TopicStats

logger = logging.getLogger(__name__)

FIGURE_DPI = 100
FIGURE_SIZE = (8.0, 4.5)
# constant Software chunk; the default embeds the library version
PNG_METADATA = {"Software": "calldistill-report"}


def _new_figure() -> tuple[Figure, FigureCanvasAgg]:
    fig = Figure(figsize=FIGURE_SIZE, dpi=FIGURE_DPI)
    canvas = FigureCanvasAgg(fig)
    return fig, canvas


def _save(fig: Figure, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    logger.info("wrote figure %s", path)


def figure_topic_distribution(stats: Sequence[TopicStats], path: str | Path) -> None:
    """Horizontal bar chart of corpus share per topic, largest on top."""
    fig, _ = _new_figure()
    ax = fig.add_subplot(111)
    ordered = sorted(stats, key=lambda s: (s.share, s.topic))
    names = [s.topic for s in ordered]
    shares = [s.share for s in ordered]
    ax.barh(np.arange(len(names)), shares, color="#30608c")
    ax.set_yticks(np.arange(len(names)))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel("share of labeled sentences")
    ax.set_title("Topic distribution")
    fig.tight_layout()
    _save(fig, Path(path))


def figure_panel_sentiment(panel: MonthlyFeaturePanel, path: str | Path) -> None:
    """Mean net sentiment per topic across the whole panel."""
    means: dict[str, float] = {}
    for topic in panel.topics:
        values = [
            row.sentiment[topic] for row in panel.rows if topic in row.sentiment
        ]
        if values:
            means[topic] = float(np.mean(values))
    fig, _ = _new_figure()
    ax = fig.add_subplot(111)
    names = sorted(means)
    values = [means[n] for n in names]
    colors = ["#a03030" if v < 0 else "#2f7d4f" for v in values]
    ax.bar(np.arange(len(names)), values, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean net sentiment")
    ax.set_title("Per-topic sentiment")
    fig.tight_layout()
    _save(fig, Path(path))


def figure_cumulative_ic(series: IcSeries, path: str | Path) -> None:
    """Cumulative information coefficient through time, one line."""
    months = [p.period for p in series.points]
    cumulative = [p.cumulative for p in series.points]
    fig, _ = _new_figure()
    ax = fig.add_subplot(111)
    ax.plot(np.arange(len(months)), cumulative, marker="o", markersize=3,
            color="#30608c")
    ax.axhline(0.0, color="black", linewidth=0.8)
    step = max(1, len(months) // 12)
    ax.set_xticks(np.arange(0, len(months), step))
    ax.set_xticklabels(months[::step], rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("cumulative IC")
    ax.set_title(f"Cumulative {series.method} IC: {series.feature}")
    fig.tight_layout()
    _save(fig, Path(path))


def figure_negativity_trends(
    points: Sequence[TrendPoint], path: str | Path, title: str = "Negativity trend"
) -> None:
    """One line per group showing the share of negative sentences."""
    groups = sorted({p.group for p in points})
    periods = sorted({p.period for p in points})
    index = {m: i for i, m in enumerate(periods)}
    fig, _ = _new_figure()
    ax = fig.add_subplot(111)
    for group in groups:
        xs = [index[p.period] for p in points if p.group == group]
        ys = [p.negativity for p in points if p.group == group]
        ax.plot(xs, ys, marker="o", markersize=3, label=group)
    step = max(1, len(periods) // 12)
    ax.set_xticks(np.arange(0, len(periods), step))
    ax.set_xticklabels(periods[::step], rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("negative share")
    ax.set_title(title)
    if groups:
        ax.legend(fontsize=7)
    fig.tight_layout()
    _save(fig, Path(path))


def write_topic_summary_csv(
    path: str | Path, stats: Sequence[TopicStats]
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["topic", "n_k", "share"])
        for s in stats:
            writer.writerow([s.topic, s.n_k, f"{s.share:.10g}"])


@dataclass
class ReportInputs:
    """Optional upstream artifacts; the report uses whichever exist."""

    topic_stats: Sequence[TopicStats] | None = None
    panel: MonthlyFeaturePanel | None = None
    ic_series: IcSeries | None = None
    trends: dict[str, list[TrendPoint]] | None = None
    search_summary: dict | None = None


def build_report(
    report_dir: str | Path, inputs: ReportInputs, render_figures: bool = True
) -> list[Path]:
    """Assemble the bundle under ``report_dir`` and return written paths."""
    if not any(
        (inputs.topic_stats, inputs.panel, inputs.ic_series,
         inputs.trends, inputs.search_summary)
    ):
        raise NothingToReportError("no upstream artifacts available to report on")
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    figures_dir = report_dir / "figures"
    written: list[Path] = []

    summary: dict = {"sections": []}
    if inputs.topic_stats:
        stats = list(inputs.topic_stats)
        csv_path = report_dir / "topic_summary.csv"
        write_topic_summary_csv(csv_path, stats)
        written.append(csv_path)
        summary["sections"].append("topics")
        summary["topics"] = {
            "count": len(stats),
            "total_sentences": int(sum(s.n_k for s in stats)),
            "largest": stats[0].topic if stats else None,
        }
        if render_figures:
            fig_path = figures_dir / "topic_distribution.png"
            figure_topic_distribution(stats, fig_path)
            written.append(fig_path)
    if inputs.panel:
        panel = inputs.panel
        months = sorted({row.month for row in panel.rows})
        summary["sections"].append("panel")
        summary["panel"] = {
            "companies": len({row.company_id for row in panel.rows}),
            "months": len(months),
            "first_month": months[0] if months else None,
            "last_month": months[-1] if months else None,
            "topics": list(panel.topics),
        }
        if render_figures:
            fig_path = figures_dir / "panel_sentiment.png"
            figure_panel_sentiment(panel, fig_path)
            written.append(fig_path)
    if inputs.ic_series:
        series = inputs.ic_series
        scored = [p for p in series.points if p.ic is not None]
        summary["sections"].append("ic")
        summary["ic"] = {
            "feature": series.feature,
            "method": series.method,
            "horizon": series.horizon,
            "months_scored": len(scored),
            "months_skipped": len(series.points) - len(scored),
            "mean_ic": float(np.mean([p.ic for p in scored])) if scored else None,
            "final_cumulative": series.points[-1].cumulative if series.points else 0.0,
        }
        if render_figures:
            fig_path = figures_dir / "cumulative_ic.png"
            figure_cumulative_ic(series, fig_path)
            written.append(fig_path)
    if inputs.trends:
        summary["sections"].append("trends")
        summary["trends"] = {
            target: {
                "points": len(points),
                "groups": sorted({p.group for p in points}),
            }
            for target, points in sorted(inputs.trends.items())
        }
        if render_figures:
            for target, points in sorted(inputs.trends.items()):
                fig_path = figures_dir / f"trend_{target}.png"
                figure_negativity_trends(
                    points, fig_path, title=f"Negativity trend: {target}"
                )
                written.append(fig_path)
    if inputs.search_summary:
        summary["sections"].append("search")
        summary["search"] = inputs.search_summary

    report_path = report_dir / "report.json"
    write_json_atomic(report_path, summary)
    written.append(report_path)
    return written
