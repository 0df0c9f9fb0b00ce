"""Domain model, CSV ingestion, preprocessing filters and summary statistics
for first-price sealed-bid procurement auctions.

Money is stored as integer kopecks (1 ruble = 100 kopecks) so that price-fall
arithmetic never drifts. Timestamps are timezone-aware UTC datetimes.

CSV schema (one row per bid, header required, RFC-4180 quoting)::

    auction_id,procurer_id,reserve_price_kopecks,announce_at,deadline_at,
    participant_id,bid_kopecks,submitted_at,region,commission_size

Timestamps are ISO-8601 UTC ("2016-03-01T14:30:00Z"); ``region`` and
``commission_size`` may be empty.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Union

from .errors import DataError, SchemaError

# Money is integer kopecks.
Kopecks = int

KOPECKS_PER_RUBLE = 100
RESERVE_CAP_KOPECKS: Kopecks = 500_000 * KOPECKS_PER_RUBLE

CSV_HEADER = [
    "auction_id",
    "procurer_id",
    "reserve_price_kopecks",
    "announce_at",
    "deadline_at",
    "participant_id",
    "bid_kopecks",
    "submitted_at",
    "region",
    "commission_size",
]

#: Reject reason codes emitted by :func:`parse_auctions`.
REJECT_REASONS = (
    "missing_field",        # wrong column count or a required field is empty
    "bad_amount",           # reserve_price_kopecks or bid_kopecks not an integer
    "bad_timestamp",        # announce_at/deadline_at/submitted_at unparseable
    "bad_commission",       # commission_size present but not a positive integer
    "inconsistent_auction", # auction-level fields conflict with an earlier row
    "duplicate_participant",# second bid by the same participant in one auction
)

#: Drop rules applied by :func:`validate_and_filter`, in precedence order.
FILTER_RULES = (
    "reserve_nonpositive",
    "reserve_above_cap",
    "window_inverted",
    "future_timestamp",
    "bid_out_of_range",
    "bid_outside_window",
    "single_participant",
)


@dataclass(frozen=True)
class Bid:
    participant_id: str
    amount_kopecks: Kopecks
    submitted_at: datetime


@dataclass
class AuctionRecord:
    """One auction announcement together with its sealed bids."""

    auction_id: str
    procurer_id: str
    reserve_price_kopecks: Kopecks
    announce_at: datetime
    deadline_at: datetime
    bids: list[Bid] = field(default_factory=list)
    region: str | None = None
    commission_size: int | None = None

    @property
    def duration_hours(self) -> float:
        return (self.deadline_at - self.announce_at).total_seconds() / 3600.0


@dataclass(frozen=True)
class RankedAuction:
    """An auction with its bids ordered ascending by amount.

    ``ranking[0]`` is the winner's bid index, ``ranking[1]`` the runner-up's.
    Ties in amount are broken by earlier submission, then by participant id.
    """

    base: AuctionRecord
    ranking: tuple[int, ...]

    def bid_at_rank(self, rank: int) -> Bid:
        """Return the bid at 1-based ``rank`` (1 = winner)."""
        return self.base.bids[self.ranking[rank - 1]]

    @property
    def winner(self) -> Bid:
        return self.bid_at_rank(1)

    @property
    def runner_up(self) -> Bid:
        return self.bid_at_rank(2)

    @property
    def price_fall(self) -> float:
        r = self.base.reserve_price_kopecks
        return (r - self.winner.amount_kopecks) / r


@dataclass(frozen=True)
class RejectedRow:
    line_number: int
    reason: str
    raw: str


@dataclass
class FilterReport:
    """Per-rule drop counts plus overall retention."""

    drops: dict[str, int]
    kept: int
    total: int

    @property
    def retention(self) -> float:
        return self.kept / self.total if self.total else 0.0

    def to_json_dict(self) -> dict:
        out: dict = {rule: self.drops.get(rule, 0) for rule in FILTER_RULES}
        out["kept"] = self.kept
        out["total"] = self.total
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


@dataclass(frozen=True)
class SummaryStat:
    mean: float
    median: float
    std: float


@dataclass
class DatasetStats:
    """Mean/median/population-std per dataset characteristic.

    Prices are reported in rubles, times in hours; ``price_fall`` is the
    per-auction relative discount (reserve - winner_bid) / reserve.
    """

    rows: dict[str, SummaryStat]

    ROW_KEYS = (
        "n_participants",
        "reserve_price_rub",
        "winner_bid_rub",
        "runnerup_bid_rub",
        "price_fall",
        "bid_to_deadline_hours",
        "winner_bid_to_deadline_hours",
        "runnerup_bid_to_deadline_hours",
        "duration_hours",
    )

    def to_json_dict(self) -> dict:
        return {
            key: {"mean": st.mean, "median": st.median, "std": st.std}
            for key, st in self.rows.items()
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)


def parse_timestamp(text: str) -> datetime:
    """Parse an ISO-8601 UTC timestamp; a trailing ``Z`` is accepted."""
    cleaned = text.strip()
    if cleaned.endswith("Z"):
        cleaned = cleaned[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(cleaned)
    except ValueError as exc:
        raise ValueError(f"bad timestamp {text!r}") from exc
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    ts = ts.astimezone(timezone.utc)
    if ts.microsecond:
        return ts.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def _open_text(source: Union[str, Path, IO]) -> IO[str]:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline="")
    if isinstance(source, io.TextIOBase):
        return source
    # binary stream
    return io.TextIOWrapper(source, encoding="utf-8", newline="")


def parse_auctions(
    source: Union[str, Path, IO],
) -> tuple[list[AuctionRecord], list[RejectedRow]]:
    """Read the bid-per-row CSV into auction records grouped by auction_id.

    Malformed rows are never silently dropped: each one is returned as a
    :class:`RejectedRow` with a reason code from :data:`REJECT_REASONS`.
    A missing or wrong header raises :class:`SchemaError`; I/O failures
    propagate as OSError.
    """
    stream = _open_text(source)
    reader = csv.reader(stream)
    try:
        header = next(reader, None)
    except (OSError, UnicodeDecodeError) as exc:
        raise SchemaError(f"unreadable CSV stream: {exc}") from exc
    if header != CSV_HEADER:
        raise SchemaError(
            f"CSV header mismatch: expected {CSV_HEADER!r}, got {header!r}"
        )

    records: dict[str, AuctionRecord] = {}
    order: list[str] = []
    rejects: list[RejectedRow] = []

    def reject(line: int, reason: str, row: list[str]) -> None:
        rejects.append(RejectedRow(line, reason, ",".join(row)))

    for line_number, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(CSV_HEADER):
            reject(line_number, "missing_field", row)
            continue
        (auction_id, procurer_id, reserve_s, announce_s, deadline_s,
         participant_id, bid_s, submitted_s, region_s, commission_s) = row
        required = (auction_id, procurer_id, reserve_s, announce_s,
                    deadline_s, participant_id, bid_s, submitted_s)
        if any(not f.strip() for f in required):
            reject(line_number, "missing_field", row)
            continue
        try:
            reserve = int(reserve_s)
            bid_amount = int(bid_s)
        except ValueError:
            reject(line_number, "bad_amount", row)
            continue
        try:
            announce = parse_timestamp(announce_s)
            deadline = parse_timestamp(deadline_s)
            submitted = parse_timestamp(submitted_s)
        except ValueError:
            reject(line_number, "bad_timestamp", row)
            continue
        commission: int | None = None
        if commission_s.strip():
            try:
                commission = int(commission_s)
            except ValueError:
                reject(line_number, "bad_commission", row)
                continue
            if commission <= 0:
                reject(line_number, "bad_commission", row)
                continue
        region = region_s.strip() or None

        rec = records.get(auction_id)
        if rec is None:
            rec = AuctionRecord(
                auction_id=auction_id,
                procurer_id=procurer_id,
                reserve_price_kopecks=reserve,
                announce_at=announce,
                deadline_at=deadline,
                region=region,
                commission_size=commission,
            )
            records[auction_id] = rec
            order.append(auction_id)
        else:
            same = (
                rec.procurer_id == procurer_id
                and rec.reserve_price_kopecks == reserve
                and rec.announce_at == announce
                and rec.deadline_at == deadline
                and rec.region == region
                and rec.commission_size == commission
            )
            if not same:
                reject(line_number, "inconsistent_auction", row)
                continue
        if any(b.participant_id == participant_id for b in rec.bids):
            reject(line_number, "duplicate_participant", row)
            continue
        rec.bids.append(Bid(participant_id, bid_amount, submitted))

    return [records[a] for a in order], rejects


def serialize_auctions(records: Iterable[AuctionRecord]) -> str:
    """Inverse of :func:`parse_auctions`; round-trips field values exactly."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for rec in records:
        for bid in rec.bids:
            writer.writerow([
                rec.auction_id,
                rec.procurer_id,
                str(rec.reserve_price_kopecks),
                format_timestamp(rec.announce_at),
                format_timestamp(rec.deadline_at),
                bid.participant_id,
                str(bid.amount_kopecks),
                format_timestamp(bid.submitted_at),
                rec.region or "",
                "" if rec.commission_size is None else str(rec.commission_size),
            ])
    return buf.getvalue()


def _drop_rule(rec: AuctionRecord, now: datetime) -> str | None:
    """First violated drop rule for ``rec``, or None if it is kept."""
    if rec.reserve_price_kopecks <= 0:
        return "reserve_nonpositive"
    if rec.reserve_price_kopecks > RESERVE_CAP_KOPECKS:
        return "reserve_above_cap"
    if rec.announce_at >= rec.deadline_at:
        return "window_inverted"
    stamps = [rec.announce_at, rec.deadline_at] + [b.submitted_at for b in rec.bids]
    if any(ts > now for ts in stamps):
        return "future_timestamp"
    if any(
        b.amount_kopecks <= 0 or b.amount_kopecks > rec.reserve_price_kopecks
        for b in rec.bids
    ):
        return "bid_out_of_range"
    if any(
        b.submitted_at < rec.announce_at or b.submitted_at > rec.deadline_at
        for b in rec.bids
    ):
        return "bid_outside_window"
    if len(rec.bids) < 2:
        return "single_participant"
    return None


def validate_and_filter(
    records: list[AuctionRecord], now: datetime
) -> tuple[list[AuctionRecord], FilterReport]:
    """Apply the preprocessing drop rules; total (never raises).

    An auction is dropped entirely if its reserve is non-positive or above
    the 500,000-ruble cap, its window is inverted, any timestamp lies in the
    future of ``now``, any bid is non-positive or above the reserve, any bid
    falls outside [announce, deadline], or fewer than two bids remain.
    """
    kept: list[AuctionRecord] = []
    drops = {rule: 0 for rule in FILTER_RULES}
    for rec in records:
        rule = _drop_rule(rec, now)
        if rule is None:
            kept.append(rec)
        else:
            drops[rule] += 1
    return kept, FilterReport(drops=drops, kept=len(kept), total=len(records))


def rank_auction(record: AuctionRecord) -> RankedAuction:
    """Order bids ascending by amount; rank 1 wins.

    Ties in amount go to the earlier submission, remaining ties to the
    lexicographically smaller participant id, so the order is total.
    """
    if len(record.bids) < 2:
        raise DataError(
            f"auction {record.auction_id!r} has {len(record.bids)} bid(s); "
            "ranking requires at least 2"
        )
    ranking = sorted(
        range(len(record.bids)),
        key=lambda i: (
            record.bids[i].amount_kopecks,
            record.bids[i].submitted_at,
            record.bids[i].participant_id,
        ),
    )
    return RankedAuction(base=record, ranking=tuple(ranking))


def _summary(values: list[float]) -> SummaryStat:
    mean = statistics.fmean(values)
    median = statistics.median(values)
    std = math.sqrt(statistics.fmean([(v - mean) ** 2 for v in values]))
    return SummaryStat(mean=mean, median=median, std=std)


def compute_stats(records: list[AuctionRecord]) -> DatasetStats:
    """Summary statistics over a filtered corpus (see DatasetStats.ROW_KEYS)."""
    if not records:
        raise DataError("cannot compute statistics of an empty corpus")
    ranked = [rank_auction(r) for r in records]

    def hours_to_deadline(rec: AuctionRecord, bid: Bid) -> float:
        return (rec.deadline_at - bid.submitted_at).total_seconds() / 3600.0

    all_bid_hours = [
        hours_to_deadline(r, b) for r in records for b in r.bids
    ]
    rows = {
        "n_participants": _summary([float(len(r.bids)) for r in records]),
        "reserve_price_rub": _summary(
            [r.reserve_price_kopecks / KOPECKS_PER_RUBLE for r in records]
        ),
        "winner_bid_rub": _summary(
            [ra.winner.amount_kopecks / KOPECKS_PER_RUBLE for ra in ranked]
        ),
        "runnerup_bid_rub": _summary(
            [ra.runner_up.amount_kopecks / KOPECKS_PER_RUBLE for ra in ranked]
        ),
        "price_fall": _summary([ra.price_fall for ra in ranked]),
        "bid_to_deadline_hours": _summary(all_bid_hours),
        "winner_bid_to_deadline_hours": _summary(
            [hours_to_deadline(ra.base, ra.winner) for ra in ranked]
        ),
        "runnerup_bid_to_deadline_hours": _summary(
            [hours_to_deadline(ra.base, ra.runner_up) for ra in ranked]
        ),
        "duration_hours": _summary([r.duration_hours for r in records]),
    }
    return DatasetStats(rows=rows)
