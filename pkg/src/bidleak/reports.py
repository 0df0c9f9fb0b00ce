"""Validation suites and aggregated leakage reports.

Parity: a classifier trained on real auctions should score the same on
placebo datasets no matter how many top bidders were dropped; a real-vs-
placebo score gap is the evidence of leakage. Independence: whether bid
amounts and submission times are unrelated in fair auctions (they are not
when timing and bidding are confounded by the valuation). Aggregation bins
per-auction posteriors by auction characteristics and can render each table
as a bar chart next to its CSV.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .auctions import RankedAuction
from .errors import ConfigError, DataError
from .features import PairDataset
from .gbt import (
    CVModels,
    EvalMetrics,
    OOFPredictions,
    TrainConfig,
    cross_val_fit,
    evaluate,
    oof_predict,
)

DEFAULT_PARITY_THRESHOLD = 0.01
DEFAULT_EVIDENCE_THRESHOLD = 0.03
_MIN_STAT_AUCTIONS = 30

GROUPING_KEYS = (
    "reserve_decile",
    "n_participants",
    "month",
    "price_fall",
    "commission_size",
    "region",
    "winner_timing",
)


@dataclass
class ParityReport:
    """Classifier metrics on the real dataset and two placebo levels."""

    levels: dict[int, EvalMetrics | None]
    parity_threshold: float
    evidence_threshold: float

    @property
    def auc_gap_real_placebo(self) -> float | None:
        m0, m1 = self.levels.get(0), self.levels.get(1)
        if m0 is None or m1 is None:
            return None
        return m0.roc_auc - m1.roc_auc

    @property
    def auc_gap_placebo(self) -> float | None:
        m1, m2 = self.levels.get(1), self.levels.get(2)
        if m1 is None or m2 is None:
            return None
        return abs(m1.roc_auc - m2.roc_auc)

    @property
    def parity_verdict(self) -> str:
        gap = self.auc_gap_placebo
        if gap is None:
            return "insufficient_data"
        return "parity" if gap <= self.parity_threshold else "no_parity"

    @property
    def evidence_verdict(self) -> str:
        gap = self.auc_gap_real_placebo
        if gap is None:
            return "insufficient_data"
        return "leakage_evidence" if gap >= self.evidence_threshold else "no_evidence"

    def to_json_dict(self) -> dict:
        return {
            "levels": {
                str(level): (m.to_json_dict() if m is not None else None)
                for level, m in sorted(self.levels.items())
            },
            "auc_gap_real_placebo": self.auc_gap_real_placebo,
            "auc_gap_placebo": self.auc_gap_placebo,
            "parity_threshold": self.parity_threshold,
            "evidence_threshold": self.evidence_threshold,
            "parity_verdict": self.parity_verdict,
            "evidence_verdict": self.evidence_verdict,
        }


def build_parity_report(
    metrics_by_level: dict[int, EvalMetrics | None],
    parity_threshold: float = DEFAULT_PARITY_THRESHOLD,
    evidence_threshold: float = DEFAULT_EVIDENCE_THRESHOLD,
) -> ParityReport:
    return ParityReport(
        levels=dict(metrics_by_level),
        parity_threshold=parity_threshold,
        evidence_threshold=evidence_threshold,
    )


def parity_predictions(
    cv: CVModels, datasets: dict[int, PairDataset]
) -> dict[int, OOFPredictions | None]:
    """Out-of-fold predictions for level 0 plus the level-0 fold models
    applied to each placebo level (empty levels yield None)."""
    out: dict[int, OOFPredictions | None] = {}
    for level, data in sorted(datasets.items()):
        out[level] = oof_predict(cv, data) if data.rows else None
    return out


def parity_check(
    level0: PairDataset,
    level1: PairDataset,
    level2: PairDataset,
    config: TrainConfig,
    parity_threshold: float = DEFAULT_PARITY_THRESHOLD,
    evidence_threshold: float = DEFAULT_EVIDENCE_THRESHOLD,
) -> ParityReport:
    """Grouped CV on the real pairs, then the same fold models applied to
    the placebo pairs built from the same corpus."""
    cv = cross_val_fit(level0, config)
    preds = parity_predictions(cv, {0: level0, 1: level1, 2: level2})
    metrics = {
        level: (evaluate(p) if p is not None else None)
        for level, p in preds.items()
    }
    return build_parity_report(metrics, parity_threshold, evidence_threshold)


@dataclass
class IndependenceStat:
    value: float | None
    null_value: float | None
    n: int
    z: float | None
    available: bool

    @property
    def excess(self) -> float | None:
        if self.value is None or self.null_value is None:
            return None
        return self.value - self.null_value

    def to_json_dict(self) -> dict:
        return {"value": self.value, "null_value": self.null_value,
                "excess": self.excess, "n": self.n, "z": self.z,
                "available": self.available}


@dataclass
class IndependenceReport:
    """Timing/bid association statistics under two winner-exclusion schemes.

    ``last_lowness``: after removing winning bids that were submitted last,
    how low (1 = lowest) the last remaining submitter's bid ranks; 0.5 under
    independence. ``spearman``: mean per-auction rank correlation between
    submission time and amount on the same sample; 0 under independence.
    ``later_lower_23``/``later_lower_34``: share of auctions where the lower
    of ranks 2/3 (winners excluded) resp. 3/4 (winners and runner-ups
    excluded) was submitted later; 0.5 under independence.
    """

    last_lowness: IndependenceStat
    spearman: IndependenceStat
    later_lower_23: IndependenceStat
    later_lower_34: IndependenceStat

    def to_json_dict(self) -> dict:
        return {
            "last_lowness": self.last_lowness.to_json_dict(),
            "spearman": self.spearman.to_json_dict(),
            "later_lower_23": self.later_lower_23.to_json_dict(),
            "later_lower_34": self.later_lower_34.to_json_dict(),
        }


def _rankdata(values: list[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    _, inverse, counts = np.unique(arr, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = (ends - counts + 1 + ends) / 2.0
    return avg[inverse]


def _spearman(x: list[float], y: list[float]) -> float | None:
    rx, ry = _rankdata(x), _rankdata(y)
    if np.std(rx) == 0 or np.std(ry) == 0:
        return None
    return float(np.corrcoef(rx, ry)[0, 1])


def _mean_stat(values: list[float], null_values) -> IndependenceStat:
    """Mean of per-auction scores against their independence expectation.

    ``null_values`` is either one number (the same expectation for every
    auction) or a per-auction list; the z statistic tests the centered mean.
    """
    n = len(values)
    if np.isscalar(null_values):
        null_values = [float(null_values)] * n
    if n < _MIN_STAT_AUCTIONS:
        return IndependenceStat(value=None, null_value=None, n=n, z=None,
                                available=False)
    mean = float(np.mean(values))
    null_mean = float(np.mean(null_values))
    centered = np.asarray(values) - np.asarray(null_values)
    std = float(np.std(centered))
    z = float(centered.mean() / (std / math.sqrt(n))) if std > 0 else None
    return IndependenceStat(value=mean, null_value=null_mean, n=n, z=z,
                            available=True)


def _later_lower_fraction(
    auctions: list[RankedAuction], first_rank: int
) -> IndependenceStat:
    """Among ranks (first_rank, first_rank+1): 1 if the lower bid was
    submitted later, 0 if earlier, 0.5 on a submission-time tie."""
    scores = []
    for auction in auctions:
        if len(auction.base.bids) < first_rank + 1:
            continue
        lower = auction.bid_at_rank(first_rank)
        higher = auction.bid_at_rank(first_rank + 1)
        if lower.submitted_at > higher.submitted_at:
            scores.append(1.0)
        elif lower.submitted_at < higher.submitted_at:
            scores.append(0.0)
        else:
            scores.append(0.5)
    return _mean_stat(scores, 0.5)


def independence_check(auctions: list[RankedAuction]) -> IndependenceReport:
    """Test whether later bids tend to be lower once winners are excluded.

    The last-lowness sample is conditioned on dropping winning bids that
    were submitted last, which skews how low the remaining last bid ranks
    even under independence; each auction is therefore compared against its
    exact conditional expectation (0.5 when the winner was dropped, else
    (m-2)/(2(m-1)) because the last remaining bid cannot be the winner).
    """
    lowness_scores: list[float] = []
    lowness_nulls: list[float] = []
    spearman_values: list[float] = []
    for auction in auctions:
        bids = list(auction.base.bids)
        winner = auction.winner
        winner_is_last = all(
            b.submitted_at < winner.submitted_at for b in bids if b is not winner
        )
        remaining = [b for b in bids if not (winner_is_last and b is winner)]
        if len(remaining) < 2:
            continue
        latest = max(remaining, key=lambda b: b.submitted_at)
        strictly_last = sum(
            1 for b in remaining if b.submitted_at == latest.submitted_at
        ) == 1
        if strictly_last:
            by_amount = sorted(
                remaining,
                key=lambda b: (b.amount_kopecks, b.submitted_at, b.participant_id),
            )
            rank = by_amount.index(latest) + 1
            m = len(remaining)
            lowness_scores.append((m - rank) / (m - 1))
            lowness_nulls.append(
                0.5 if winner_is_last else (m - 2) / (2.0 * (m - 1))
            )
        if len(remaining) >= 3:
            rho = _spearman(
                [b.submitted_at.timestamp() for b in remaining],
                [float(b.amount_kopecks) for b in remaining],
            )
            if rho is not None:
                spearman_values.append(rho)
    return IndependenceReport(
        last_lowness=_mean_stat(lowness_scores, lowness_nulls),
        spearman=_mean_stat(spearman_values, 0.0),
        later_lower_23=_later_lower_fraction(auctions, first_rank=2),
        later_lower_34=_later_lower_fraction(auctions, first_rank=3),
    )


def sniper_share(auctions: list[RankedAuction]) -> float:
    """Fraction of bids submitted within 24h of announcement at >= 95% of
    the reserve price."""
    total = 0
    snipers = 0
    for auction in auctions:
        announce = auction.base.announce_at
        reserve = auction.base.reserve_price_kopecks
        for bid in auction.base.bids:
            total += 1
            first_day = (bid.submitted_at - announce).total_seconds() <= 24 * 3600
            near_reserve = bid.amount_kopecks >= 0.95 * reserve
            if first_day and near_reserve:
                snipers += 1
    if total == 0:
        raise DataError("sniper share of an empty corpus is undefined")
    return snipers / total


@dataclass(frozen=True)
class ReportRow:
    group: str
    mean_posterior: float
    count: int


@dataclass
class ReportTable:
    grouping: str
    rows: list[ReportRow]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["grouping", "group", "mean_posterior", "count"])
        for row in self.rows:
            writer.writerow([
                self.grouping, row.group, repr(row.mean_posterior), row.count
            ])
        return buf.getvalue()

    def total_count(self) -> int:
        return sum(r.count for r in self.rows)


def _reserve_decile_edges(auctions: list[RankedAuction]) -> np.ndarray:
    reserves = np.asarray(
        [a.base.reserve_price_kopecks for a in auctions], dtype=np.float64
    )
    return np.quantile(reserves, np.linspace(0.1, 0.9, 9))


def _group_key(auction: RankedAuction, grouping: str, decile_edges) -> str:
    base = auction.base
    if grouping == "reserve_decile":
        idx = int(np.searchsorted(decile_edges, base.reserve_price_kopecks,
                                  side="right"))
        return f"d{idx + 1:02d}"
    if grouping == "n_participants":
        return f"{len(base.bids):02d}"
    if grouping == "month":
        return f"{base.announce_at.month:02d}"
    if grouping == "price_fall":
        bin_idx = min(int(auction.price_fall / 0.05), 19)
        return f"[{bin_idx * 0.05:.2f},{(bin_idx + 1) * 0.05:.2f})"
    if grouping == "commission_size":
        return str(base.commission_size) if base.commission_size else "unknown"
    if grouping == "region":
        return base.region or "unknown"
    if grouping == "winner_timing":
        minutes = (
            base.deadline_at - auction.winner.submitted_at
        ).total_seconds() / 60.0
        if minutes >= 1440.0:
            return ">24h"
        hour = int(minutes // 60.0)
        return f"{hour:02d}-{hour + 1:02d}h"
    raise ConfigError(
        f"unknown grouping {grouping!r}; valid keys: {', '.join(GROUPING_KEYS)}"
    )


def aggregate_alpha(
    posteriors: dict[str, float],
    auctions: list[RankedAuction],
    grouping: str,
) -> ReportTable:
    """Mean posterior and auction count per group of the requested key.

    Bins: reserve deciles are corpus quantiles; price fall uses fixed
    0.05-wide bins; winner timing uses hourly bins over the final 24h plus
    a ">24h" bucket. Every auction must have a posterior.
    """
    if grouping not in GROUPING_KEYS:
        raise ConfigError(
            f"unknown grouping {grouping!r}; valid keys: {', '.join(GROUPING_KEYS)}"
        )
    decile_edges = (
        _reserve_decile_edges(auctions) if grouping == "reserve_decile" else None
    )
    sums: dict[str, float] = {}
    counts: dict[str, int] = {}
    for auction in auctions:
        auction_id = auction.base.auction_id
        if auction_id not in posteriors:
            raise DataError(f"no posterior for auction {auction_id!r}")
        key = _group_key(auction, grouping, decile_edges)
        sums[key] = sums.get(key, 0.0) + posteriors[auction_id]
        counts[key] = counts.get(key, 0) + 1
    rows = [
        ReportRow(group=key, mean_posterior=sums[key] / counts[key],
                  count=counts[key])
        for key in sorted(sums)
    ]
    return ReportTable(grouping=grouping, rows=rows)


def render_report_figure(table: ReportTable, path: str | Path) -> None:
    """Bar chart of a report table, written as a deterministic PNG."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    labels = [r.group for r in table.rows]
    means = [r.mean_posterior for r in table.rows]
    counts = [r.count for r in table.rows]
    fig, ax = plt.subplots(figsize=(max(6.0, 0.45 * len(labels) + 2.0), 4.0))
    ax.bar(range(len(labels)), means, color="#30547c")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean leakage posterior")
    ax.set_xlabel(table.grouping)
    ax.set_title(f"Leakage probability by {table.grouping}")
    for i, count in enumerate(counts):
        ax.annotate(str(count), (i, means[i]), ha="center", va="bottom",
                    fontsize=7)
    ax.set_ylim(0.0, max(0.05, max(means) * 1.25 if means else 1.0))
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


def render_density_figure(
    winner_density, fair_density, posterior_grid, posterior_values,
    alpha: float, path: str | Path,
) -> None:
    """Winner vs corrected-fair densities with the posterior curve."""
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt

    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    ax0.plot(winner_density.grid, winner_density.values, label="winners",
             color="#b03a2e")
    ax0.plot(fair_density.grid, fair_density.values, label="corrected fair",
             color="#1e8449")
    ax0.set_xlabel("predicted win probability")
    ax0.set_ylabel("density")
    ax0.legend()
    ax0.set_title("Prediction densities")
    ax1.plot(posterior_grid, posterior_values, color="#30547c")
    ax1.set_xlabel("predicted win probability")
    ax1.set_ylabel("posterior leakage probability")
    ax1.set_ylim(-0.02, 1.02)
    ax1.set_title(f"Posterior curve (prior = {alpha:.4f})")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)

