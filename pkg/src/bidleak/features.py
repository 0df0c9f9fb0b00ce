"""Per-participant feature vectors, winner/runner-up pair datasets, and
placebo datasets built by dropping top-ranked bidders.

All features are computed on the bid set *as seen at a placebo level*: when
the ``drop_count`` lowest bids are removed, last-bid flags, gaps, timings and
participant counts are all recomputed on the reduced auction. Rows carry the
auction id as metadata only; no feature links two rows of the same auction.
"""

from __future__ import annotations

import csv
import io
from bisect import bisect_left
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Union

import numpy as np

from .auctions import AuctionRecord, RankedAuction, rank_auction
from .errors import ConfigError, DataError

FEATURE_NAMES = (
    "bid_last",
    "met_before",
    "bid_timing",
    "relative_bid",
    "relative_bid_timing",
    "n_participants",
)

TIMING_CAP_MINUTES = 1440.0
RELATIVE_BID_CAP = 0.1

PAIR_CSV_HEADER = ["auction_id", "label", *FEATURE_NAMES]


@dataclass(frozen=True)
class FeatureVector:
    """Classifier inputs for one participant of one (possibly reduced) auction.

    ``bid_timing`` and ``relative_bid_timing`` are minutes truncated at one
    day (1440); ``relative_bid`` is the gap to the next-ranked bid normalized
    by the reserve price, truncated at 0.1.
    """

    bid_last: int
    met_before: int
    bid_timing: float
    relative_bid: float
    relative_bid_timing: float
    n_participants: int

    def as_tuple(self) -> tuple[float, ...]:
        return (
            float(self.bid_last),
            float(self.met_before),
            self.bid_timing,
            self.relative_bid,
            self.relative_bid_timing,
            float(self.n_participants),
        )


@dataclass(frozen=True)
class PlaceboLevel:
    """Number of lowest-ranked bidders removed before pairing ranks
    ``drop_count+1`` (treated as winner) and ``drop_count+2`` (runner-up)."""

    drop_count: int

    def __post_init__(self):
        if self.drop_count < 0:
            raise ConfigError(f"drop_count must be >= 0, got {self.drop_count}")

    @property
    def min_bids(self) -> int:
        return self.drop_count + 2


@dataclass(frozen=True)
class PairRow:
    auction_id: str
    label: int  # 1 = dataset-level winner, 0 = runner-up
    features: FeatureVector


@dataclass
class PairDataset:
    rows: list[PairRow]
    level: PlaceboLevel
    skipped_auctions: int = 0

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_auctions(self) -> int:
        return len(self.rows) // 2

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray, list[str]]:
        """Feature matrix (FEATURE_NAMES order), labels, auction ids."""
        X = np.array([r.features.as_tuple() for r in self.rows], dtype=np.float64)
        y = np.array([r.label for r in self.rows], dtype=np.int64)
        ids = [r.auction_id for r in self.rows]
        return X, y, ids

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(PAIR_CSV_HEADER)
        for row in self.rows:
            f = row.features
            writer.writerow([
                row.auction_id,
                row.label,
                f.bid_last,
                f.met_before,
                repr(f.bid_timing),
                repr(f.relative_bid),
                repr(f.relative_bid_timing),
                f.n_participants,
            ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source: Union[str, Path, IO[str]], level: int = 0) -> "PairDataset":
        if isinstance(source, (str, Path)):
            stream: IO[str] = open(source, "r", encoding="utf-8", newline="")
        else:
            stream = source
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != PAIR_CSV_HEADER:
            raise DataError(f"pair dataset header mismatch: {header!r}")
        rows = []
        for rec in reader:
            if not rec:
                continue
            rows.append(PairRow(
                auction_id=rec[0],
                label=int(rec[1]),
                features=FeatureVector(
                    bid_last=int(rec[2]),
                    met_before=int(rec[3]),
                    bid_timing=float(rec[4]),
                    relative_bid=float(rec[5]),
                    relative_bid_timing=float(rec[6]),
                    n_participants=int(rec[7]),
                ),
            ))
        return cls(rows=rows, level=PlaceboLevel(level))


class HistoryIndex:
    """Lookup of prior procurer/participant co-occurrence.

    ``met_before(procurer, participant, t)`` is 1 iff the pair co-occurred in
    an auction announced strictly before ``t``.
    """

    def __init__(self, announces: dict[tuple[str, str], list]):
        self._announces = announces

    def met_before(self, procurer_id: str, participant_id: str, t) -> int:
        times = self._announces.get((procurer_id, participant_id))
        if not times:
            return 0
        return 1 if bisect_left(times, t) > 0 else 0


def build_history_index(records: Iterable[AuctionRecord]) -> HistoryIndex:
    announces: dict[tuple[str, str], list] = {}
    for rec in records:
        for bid in rec.bids:
            announces.setdefault(
                (rec.procurer_id, bid.participant_id), []
            ).append(rec.announce_at)
    for times in announces.values():
        times.sort()
    return HistoryIndex(announces)


def extract_features(
    auction: RankedAuction, rank: int, history: HistoryIndex
) -> FeatureVector:
    """Feature vector for the participant at 1-based ``rank``.

    The auction passed in defines the bid set: placebo reductions must be
    applied (and the auction re-ranked) before calling.
    """
    bids = auction.base.bids
    n = len(bids)
    if not 1 <= rank <= n:
        raise DataError(f"rank {rank} out of range for {n} bids")
    this = auction.bid_at_rank(rank)
    reserve = auction.base.reserve_price_kopecks

    bid_last = int(all(
        b.submitted_at < this.submitted_at
        for b in bids
        if b is not this
    ))

    minutes_to_deadline = (
        auction.base.deadline_at - this.submitted_at
    ).total_seconds() / 60.0
    bid_timing = min(TIMING_CAP_MINUTES, max(0.0, minutes_to_deadline))

    if rank < n:
        next_amount = auction.bid_at_rank(rank + 1).amount_kopecks
    else:
        # Last place has no succeeding bid; the reserve price is the
        # implicit ceiling.
        next_amount = reserve
    relative_bid = min(
        RELATIVE_BID_CAP, max(0.0, (next_amount - this.amount_kopecks) / reserve)
    )

    earlier = [b for b in bids if b.submitted_at < this.submitted_at]
    if not earlier:
        # No running minimum exists before the first bid; the cap encodes
        # maximally stale information.
        relative_bid_timing = TIMING_CAP_MINUTES
    else:
        holder = min(
            earlier,
            key=lambda b: (b.amount_kopecks, b.submitted_at, b.participant_id),
        )
        gap_minutes = (this.submitted_at - holder.submitted_at).total_seconds() / 60.0
        relative_bid_timing = min(TIMING_CAP_MINUTES, gap_minutes)

    met = history.met_before(
        auction.base.procurer_id, this.participant_id, auction.base.announce_at
    )

    return FeatureVector(
        bid_last=bid_last,
        met_before=met,
        bid_timing=bid_timing,
        relative_bid=relative_bid,
        relative_bid_timing=relative_bid_timing,
        n_participants=n,
    )


def reduce_auction(auction: RankedAuction, drop_count: int) -> RankedAuction:
    """Remove the ``drop_count`` lowest-ranked bids and re-rank."""
    if drop_count == 0:
        return auction
    keep = set(auction.ranking[drop_count:])
    base = auction.base
    reduced = AuctionRecord(
        auction_id=base.auction_id,
        procurer_id=base.procurer_id,
        reserve_price_kopecks=base.reserve_price_kopecks,
        announce_at=base.announce_at,
        deadline_at=base.deadline_at,
        bids=[b for i, b in enumerate(base.bids) if i in keep],
        region=base.region,
        commission_size=base.commission_size,
    )
    return rank_auction(reduced)


def build_pair_dataset(
    auctions: Iterable[RankedAuction],
    level: Union[PlaceboLevel, int],
    history: HistoryIndex,
) -> PairDataset:
    """One label-1 row (rank drop_count+1) and one label-0 row (rank
    drop_count+2) per auction with enough bids; shorter auctions are skipped
    and counted. Rows are ordered by auction id."""
    if isinstance(level, int):
        level = PlaceboLevel(level)
    rows: list[PairRow] = []
    skipped = 0
    for auction in sorted(auctions, key=lambda a: a.base.auction_id):
        if len(auction.base.bids) < level.min_bids:
            skipped += 1
            continue
        reduced = reduce_auction(auction, level.drop_count)
        winner = extract_features(reduced, 1, history)
        runner_up = extract_features(reduced, 2, history)
        rows.append(PairRow(auction.base.auction_id, 1, winner))
        rows.append(PairRow(auction.base.auction_id, 0, runner_up))
    return PairDataset(rows=rows, level=level, skipped_auctions=skipped)
