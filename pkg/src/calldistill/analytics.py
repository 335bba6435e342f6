"""Signal evaluation: neutralized returns, information coefficients,
likelihood-band filtering and negativity trends.

Feature usefulness is judged by the monthly cross-sectional rank correlation
between a panel column and next-period sector-neutral returns, accumulated
over time. Separately, sentence scores can be filtered into target areas by
likelihood bands and tracked as negativity ratios per month and group.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import MalformedReturnsError, MissingTopicError, NoOverlapError
from .features import MonthlyFeaturePanel, SentenceScore

logger = logging.getLogger(__name__)

METHOD_SPEARMAN = "spearman"
METHOD_PEARSON = "pearson"
DEFAULT_MIN_OBS = 10

SKIP_TOO_FEW = "too_few_obs"
SKIP_CONSTANT_FEATURE = "constant_feature"
SKIP_CONSTANT_RETURNS = "constant_returns"
SKIP_NO_RETURNS = "no_returns"


@dataclass(frozen=True)
class ReturnsRecord:
    """One company's total return over a period, with sector context."""

    company_id: str
    period_start: date
    period_end: date
    total_return: float
    sector: str
    sector_return: float
    market_cap_weight: float | None = None

    def __post_init__(self) -> None:
        if self.period_end <= self.period_start:
            raise ValueError(
                f"period_end {self.period_end} must follow period_start {self.period_start}"
            )
        if self.total_return <= -1.0:
            raise ValueError(f"total_return must exceed -1, got {self.total_return}")


def sector_neutral_return(record: ReturnsRecord) -> float:
    """Excess return over the company's sector return."""
    return record.total_return - record.sector_return


def derive_sector_returns(records: Sequence[ReturnsRecord]) -> list[ReturnsRecord]:
    """Fill sector_return with the cap-weighted mean of member returns.

    Records are grouped by (sector, period); every member of a group must
    carry a market-cap weight. Weights are renormalized within the group.
    """
    groups: dict[tuple[str, date, date], list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault((r.sector, r.period_start, r.period_end), []).append(i)
    out = list(records)
    for key, members in groups.items():
        weights = [records[i].market_cap_weight for i in members]
        if any(w is None for w in weights):
            raise ValueError(f"missing market_cap_weight in sector group {key[0]}")
        total = float(sum(weights))
        if total <= 0.0:
            raise ValueError(f"non-positive total weight in sector group {key[0]}")
        rs = sum(records[i].total_return * (w / total) for i, w in zip(members, weights))
        for i in members:
            r = records[i]
            out[i] = ReturnsRecord(
                company_id=r.company_id,
                period_start=r.period_start,
                period_end=r.period_end,
                total_return=r.total_return,
                sector=r.sector,
                sector_return=float(rs),
                market_cap_weight=r.market_cap_weight,
            )
    return out


def load_returns_csv(path: str | Path) -> list[ReturnsRecord]:
    """Read return records; bad rows are collected and reported together.

    The sector_return column may be left blank, but then it must be blank
    everywhere: the values are derived as cap-weighted sector means, which
    needs a market_cap_weight on every row.
    """
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        raw = list(csv.DictReader(fh))
    blanks = [not (rec.get("sector_return") or "").strip() for rec in raw]
    derive = bool(raw) and all(blanks)
    if any(blanks) and not derive:
        raise MalformedReturnsError(
            [i + 1 for i, blank in enumerate(blanks) if blank],
            ["sector_return must be filled everywhere or left blank everywhere"],
        )
    records: list[ReturnsRecord] = []
    bad_rows: list[int] = []
    details: list[str] = []
    for i, rec in enumerate(raw):
        weight = rec.get("market_cap_weight", "")
        try:
            records.append(ReturnsRecord(
                company_id=rec["company_id"],
                period_start=date.fromisoformat(rec["period_start"]),
                period_end=date.fromisoformat(rec["period_end"]),
                total_return=float(rec["total_return"]),
                sector=rec["sector"],
                sector_return=0.0 if derive else float(rec["sector_return"]),
                market_cap_weight=float(weight) if weight not in ("", None) else None,
            ))
        except (KeyError, TypeError, ValueError) as exc:
            bad_rows.append(i + 1)
            details.append(f"row {i + 1}: {exc}")
    if bad_rows:
        raise MalformedReturnsError(bad_rows, details)
    if derive:
        try:
            records = derive_sector_returns(records)
        except ValueError as exc:
            raise MalformedReturnsError([], [str(exc)]) from exc
    return records


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1 with ties averaged."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    boundaries = np.flatnonzero(np.diff(sorted_vals) != 0.0) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [len(values)]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e - 1) + 1.0
    return ranks


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    # explicit sums so identical inputs give exactly 1.0 and mirrored
    # inputs exactly -1.0
    dx = x - x.mean()
    dy = y - y.mean()
    sxy = float(dx @ dy)
    ssx = float(dx @ dx)
    ssy = float(dy @ dy)
    r = sxy / np.sqrt(ssx * ssy)
    return float(np.clip(r, -1.0, 1.0))


def information_coefficient(
    feature_values: Sequence[float],
    forward_returns: Sequence[float],
    method: str = METHOD_SPEARMAN,
    min_obs: int = DEFAULT_MIN_OBS,
) -> float | None:
    """Cross-sectional correlation of a feature with forward returns.

    Spearman is the Pearson correlation of midranks (ties averaged);
    Pearson works on raw values. Returns None (skipped) with fewer than
    ``min_obs`` pairs or when either side is constant.
    """
    x = np.asarray(feature_values, dtype=np.float64)
    y = np.asarray(forward_returns, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.shape} vs {y.shape}")
    if len(x) < min_obs:
        return None
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return None
    if method == METHOD_SPEARMAN:
        return _pearson(_midranks(x), _midranks(y))
    if method == METHOD_PEARSON:
        return _pearson(x, y)
    raise ValueError(f"unknown method {method!r}")


def _skip_reason(x: np.ndarray, y: np.ndarray, min_obs: int) -> str | None:
    if len(x) < min_obs:
        return SKIP_TOO_FEW
    if np.ptp(x) == 0.0:
        return SKIP_CONSTANT_FEATURE
    if np.ptp(y) == 0.0:
        return SKIP_CONSTANT_RETURNS
    return None


@dataclass(frozen=True)
class IcPoint:
    period: str
    ic: float | None
    cumulative: float
    n_obs: int
    skipped_reason: str | None = None


@dataclass
class IcSeries:
    feature: str
    method: str
    horizon: int
    min_obs: int
    points: list[IcPoint] = field(default_factory=list)


def _add_months(month: str, k: int) -> str:
    year, mon = (int(p) for p in month.split("-"))
    total = year * 12 + (mon - 1) + k
    return f"{total // 12:04d}-{total % 12 + 1:02d}"


def _month_of(d: date) -> str:
    return f"{d.year:04d}-{d.month:02d}"


def cumulative_ic(
    panel: MonthlyFeaturePanel,
    feature: str,
    returns: Sequence[ReturnsRecord],
    horizon: int = 1,
    method: str = METHOD_SPEARMAN,
    min_obs: int = DEFAULT_MIN_OBS,
) -> IcSeries:
    """Per-month IC of a panel column against forward neutralized returns.

    For panel month m the matching return record of a company starts in
    month m+1 and ends in month m+horizon. The cumulative value is the
    running sum of the non-skipped monthly ICs; skipped months are recorded
    with their reason and leave the running sum unchanged.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    by_window: dict[tuple[str, str, str], float] = {}
    for r in returns:
        key = (r.company_id, _month_of(r.period_start), _month_of(r.period_end))
        by_window[key] = sector_neutral_return(r)

    months = sorted({row.month for row in panel.rows})
    series = IcSeries(feature=feature, method=method, horizon=horizon, min_obs=min_obs)
    kind, topic = feature.split("_", 1)
    if kind not in ("p", "s"):
        raise ValueError(f"feature column must start with p_ or s_, got {feature!r}")
    aligned_any = False
    running = 0.0
    for month in months:
        window = (_add_months(month, 1), _add_months(month, horizon))
        xs: list[float] = []
        ys: list[float] = []
        for row in panel.rows:
            if row.month != month:
                continue
            table = row.propensity if kind == "p" else row.sentiment
            value = table.get(topic)
            if value is None:
                continue
            rn = by_window.get((row.company_id, window[0], window[1]))
            if rn is None:
                continue
            xs.append(float(value))
            ys.append(rn)
        x = np.asarray(xs)
        y = np.asarray(ys)
        if len(x) > 0:
            aligned_any = True
        reason = SKIP_NO_RETURNS if len(x) == 0 else _skip_reason(x, y, min_obs)
        if reason is None:
            ic = information_coefficient(x, y, method=method, min_obs=min_obs)
            running += ic
            series.points.append(IcPoint(month, ic, running, len(x), None))
        else:
            series.points.append(IcPoint(month, None, running, len(x), reason))
    if not aligned_any:
        raise NoOverlapError(
            f"no panel month aligns with the returns at horizon {horizon}"
        )
    return series


def write_ic_csv(series: IcSeries, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["month", "ic", "cumulative", "n_obs", "skipped_reason"])
        for p in series.points:
            writer.writerow([
                p.period,
                "" if p.ic is None else f"{p.ic:.10g}",
                f"{p.cumulative:.10g}",
                p.n_obs,
                p.skipped_reason or "",
            ])


# ---------------------------------------------------------------------------
# Likelihood-band filtering
# ---------------------------------------------------------------------------

FILTER_TOPICS = ("Earnings", "Revenue", "Guidance", "Others")

INTENSITY_HIGH = "high"
INTENSITY_MEDIUM = "medium"
INTENSITY_LOW = "low"

# Band intensities per target area: outlook targets demand high guidance
# likelihood, trailing targets demand low guidance likelihood.
TARGET_INTENSITIES: dict[str, dict[str, str]] = {
    "earnings_outlook": {
        "Earnings": INTENSITY_HIGH, "Revenue": INTENSITY_MEDIUM,
        "Guidance": INTENSITY_HIGH, "Others": INTENSITY_LOW,
    },
    "earnings_trailing": {
        "Earnings": INTENSITY_HIGH, "Revenue": INTENSITY_MEDIUM,
        "Guidance": INTENSITY_LOW, "Others": INTENSITY_LOW,
    },
    "revenue_outlook": {
        "Earnings": INTENSITY_MEDIUM, "Revenue": INTENSITY_HIGH,
        "Guidance": INTENSITY_HIGH, "Others": INTENSITY_LOW,
    },
    "revenue_trailing": {
        "Earnings": INTENSITY_MEDIUM, "Revenue": INTENSITY_HIGH,
        "Guidance": INTENSITY_LOW, "Others": INTENSITY_LOW,
    },
}


@dataclass(frozen=True)
class FilterThresholds:
    theta_hi: float = 0.5
    theta_med: float = 0.2
    theta_lo: float = 0.2


@dataclass(frozen=True)
class FilterSpec:
    """A target area expressed as per-topic likelihood intensities."""

    target: str
    intensity: Mapping[str, str]

    @classmethod
    def for_target(cls, target: str) -> "FilterSpec":
        if target not in TARGET_INTENSITIES:
            raise ValueError(
                f"unknown target {target!r}; expected one of {sorted(TARGET_INTENSITIES)}"
            )
        return cls(target=target, intensity=dict(TARGET_INTENSITIES[target]))


def _passes(value: float, intensity: str, thresholds: FilterThresholds) -> bool:
    if intensity == INTENSITY_HIGH:
        return value >= thresholds.theta_hi
    if intensity == INTENSITY_MEDIUM:
        return value >= thresholds.theta_med
    if intensity == INTENSITY_LOW:
        return value <= thresholds.theta_lo
    raise ValueError(f"unknown intensity {intensity!r}")


def filter_corpus(
    scores: Iterable[SentenceScore],
    spec: FilterSpec,
    thresholds: FilterThresholds | None = None,
) -> list[str]:
    """Sentence ids whose topic likelihoods satisfy every band of the spec."""
    thresholds = thresholds or FilterThresholds()
    scores = list(scores)
    if scores:
        available = set(scores[0].topic_distribution)
        for topic in spec.intensity:
            if topic not in available:
                raise MissingTopicError(topic)
    kept: list[str] = []
    for s in scores:
        if all(
            _passes(s.topic_distribution[t], intensity, thresholds)
            for t, intensity in spec.intensity.items()
        ):
            kept.append(s.sentence_id)
    return sorted(kept)


# ---------------------------------------------------------------------------
# Negativity trends
# ---------------------------------------------------------------------------

GROUP_MARKET = "market"
GROUP_SECTOR = "sector"


@dataclass(frozen=True)
class TrendPoint:
    period: str
    group: str
    negativity: float
    n_sentences: int


def negativity_trend(
    filtered_ids: Iterable[str],
    scores_by_id: Mapping[str, SentenceScore],
    meta_by_id: Mapping[str, tuple[str, str]],  # sentence id -> (month, sector)
    grouping: str = GROUP_SECTOR,
) -> list[TrendPoint]:
    """Share of negative-predicted sentences per month and group.

    Periods with no filtered sentences simply emit no row.
    """
    if grouping not in (GROUP_MARKET, GROUP_SECTOR):
        raise ValueError(f"unknown grouping {grouping!r}")
    tally: dict[tuple[str, str], list[int]] = {}
    for sid in filtered_ids:
        month, sector = meta_by_id[sid]
        group = "Market" if grouping == GROUP_MARKET else sector
        neg = 1 if scores_by_id[sid].predicted_sentiment == "Negative" else 0
        bucket = tally.setdefault((month, group), [0, 0])
        bucket[0] += neg
        bucket[1] += 1
    return [
        TrendPoint(period=month, group=group, negativity=neg / total, n_sentences=total)
        for (month, group), (neg, total) in sorted(tally.items())
    ]


def write_trend_csv(points: Sequence[TrendPoint], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["period", "group", "negativity", "n_sentences"])
        for p in points:
            writer.writerow([p.period, p.group, f"{p.negativity:.10g}", p.n_sentences])


# ---------------------------------------------------------------------------
# Expert validation of filtered sets
# ---------------------------------------------------------------------------

def export_validation_sample(
    path: str | Path,
    filtered_by_target: Mapping[str, Sequence[str]],
    texts_by_id: Mapping[str, str],
    sample_size: int = 200,
    seed: int = 0,
) -> int:
    """Write a review CSV of sampled filtered sentences per target area.

    The ``relevant`` column is left blank for the reviewer; rows are sampled
    deterministically from each target's filtered set.
    """
    rows: list[tuple[str, str, str]] = []
    for target in sorted(filtered_by_target):
        ids = sorted(filtered_by_target[target])
        rng = np.random.default_rng(seed)
        if len(ids) > sample_size:
            perm = rng.permutation(len(ids))[:sample_size]
            ids = [ids[i] for i in sorted(perm)]
        rows.extend((target, sid, texts_by_id.get(sid, "")) for sid in ids)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["target", "sentence_id", "text", "relevant"])
        for target, sid, text in rows:
            writer.writerow([target, sid, text, ""])
    return len(rows)


_TRUTHY = {"1", "y", "yes", "true"}
_FALSY = {"0", "n", "no", "false"}


def score_validation_review(path: str | Path) -> dict[str, float]:
    """Accuracy per target area from a filled-in review CSV."""
    counts: dict[str, list[int]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        for rec in csv.DictReader(fh):
            mark = (rec.get("relevant") or "").strip().lower()
            if mark in _TRUTHY:
                relevant = 1
            elif mark in _FALSY:
                relevant = 0
            else:
                continue  # unmarked rows are ignored
            bucket = counts.setdefault(rec["target"], [0, 0])
            bucket[0] += relevant
            bucket[1] += 1
    return {
        target: hits / total for target, (hits, total) in sorted(counts.items()) if total
    }
