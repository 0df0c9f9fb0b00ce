"""Game-theoretic auction generator with optional bid-leakage injection.

Honest bidders draw iid valuations v ~ U[0,1] (reserve normalized to 1) and
play the symmetric equilibrium of the first-price lowest-bid auction:
b(v) = 1 - v(n-1)/n, with win probability v^(n-1) and expected profit v^n/n.

Submission timing: delaying to normalized time t costs c(t) = gamma*t/(1-t)
(convex, infinite at the deadline) while the perceived chance of one's bid
being leaked and undercut is beta(t) = beta0*(1-t) (linearly falling to zero
at the deadline). Maximizing (v^n/n)*(1-beta(t)) - c(t) gives the closed form
t*(v) = max(0, 1 - sqrt(gamma*n / (beta0*v^n))). Bids and submission times
are then both monotone in the valuation, which is exactly the fair-world
confound the placebo correction must absorb.

A corrupted auction gains one extra favored bidder who sees every honest bid,
undercuts the honest minimum by a uniform fraction of the reserve, and
submits inside the final leak window.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from datetime import timedelta

import numpy as np

from .auctions import AuctionRecord, Bid, Kopecks, KOPECKS_PER_RUBLE, parse_timestamp
from .errors import ConfigError

_RESERVE_CAP_RUBLES = 500_000.0
_RESERVE_FLOOR_RUBLES = 1_000.0
_COMMISSION_SIZES = (3, 5, 7)
_SIM_STREAM = 7919  # rng namespace tag, keeps sim draws apart from CV draws


def _default_participant_probs() -> tuple[float, ...]:
    # Geometric tail from 2 to 12 participants: mean 3, median 2 (the
    # memoryless shape also makes placebo-reduced auction sizes match the
    # original size distribution).
    raw = [0.5 ** k for k in range(11)]
    total = sum(raw)
    return tuple(p / total for p in raw)


@dataclass(frozen=True)
class SimConfig:
    n_auctions: int = 1000
    participants_probs: tuple[float, ...] = field(
        default_factory=_default_participant_probs
    )
    reserve_price_mean_rubles: float = 182_000.0
    reserve_price_median_rubles: float = 134_000.0
    duration_hours: float = 169.0
    timing_cost_gamma: float = 1e-7
    leak_belief_beta0: float = 1.0
    true_alpha: float = 0.16
    undercut_max: float = 0.01
    leak_window_minutes: float = 60.0
    timing_noise_minutes: float = 2880.0
    repeat_pair_rate: float = 0.1
    timing_confound: bool = True
    n_regions: int = 8
    procurer_pool_size: int | None = None
    announce_start: str = "2014-01-01T00:00:00Z"
    announce_end: str = "2018-03-01T00:00:00Z"
    seed: int = 0

    def __post_init__(self):
        if self.n_auctions < 0:
            raise ConfigError("n_auctions must be >= 0")
        probs = self.participants_probs
        if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ConfigError("participants_probs must be a distribution")
        if self.reserve_price_median_rubles <= 0 or (
            self.reserve_price_mean_rubles < self.reserve_price_median_rubles
        ):
            raise ConfigError("reserve price distribution needs mean >= median > 0")
        if self.duration_hours <= 0:
            raise ConfigError("duration_hours must be positive")
        if self.timing_cost_gamma <= 0 or self.leak_belief_beta0 <= 0:
            raise ConfigError("timing_cost_gamma and leak_belief_beta0 must be > 0")
        if not 0.0 <= self.true_alpha <= 1.0:
            raise ConfigError("true_alpha must be in [0, 1]")
        if not 0.0 < self.undercut_max <= 0.05:
            raise ConfigError("undercut_max must be in (0, 0.05]")
        if self.leak_window_minutes <= 0:
            raise ConfigError("leak_window_minutes must be positive")
        if self.timing_noise_minutes < 0:
            raise ConfigError("timing_noise_minutes must be >= 0")
        if not 0.0 <= self.repeat_pair_rate <= 1.0:
            raise ConfigError("repeat_pair_rate must be in [0, 1]")
        if self.n_regions < 1:
            raise ConfigError("n_regions must be >= 1")
        if parse_timestamp(self.announce_start) >= parse_timestamp(self.announce_end):
            raise ConfigError("announce window is empty")

    def to_json_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown SimConfig keys: {sorted(unknown)}")
        kwargs = dict(doc)
        if "participants_probs" in kwargs:
            kwargs["participants_probs"] = tuple(kwargs["participants_probs"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class SyntheticAuction:
    record: AuctionRecord
    corrupted: bool
    favored_participant: str | None
    valuations: list[float]


def equilibrium_bid(v: float, n: int) -> float:
    """Symmetric equilibrium bid 1 - v(n-1)/n, normalized to the reserve."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"valuation must be in [0, 1], got {v}")
    if n < 2:
        raise ValueError(f"need at least 2 bidders, got {n}")
    return 1.0 - v * (n - 1) / n


def expected_profit(v: float, n: int) -> float:
    """Expected profit v^n / n at the equilibrium bid."""
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"valuation must be in [0, 1], got {v}")
    if n < 2:
        raise ValueError(f"need at least 2 bidders, got {n}")
    return v ** n / n


def submission_cost(t: float, gamma: float) -> float:
    """Delay cost gamma * t / (1 - t); infinite at the deadline."""
    if t >= 1.0:
        return math.inf
    return gamma * t / (1.0 - t)


def leak_belief(t: float, beta0: float) -> float:
    """Perceived leak-and-undercut probability beta0 * (1 - t)."""
    return beta0 * (1.0 - t)


def optimal_timing(v: float, n: int, gamma: float, beta0: float) -> float:
    """Profit-maximizing normalized submission time.

    Solves c'(t) = (v^n/n) * beta0 for the parametric forms above:
    t* = max(0, 1 - sqrt(gamma*n / (beta0*v^n))).
    """
    if gamma <= 0 or beta0 <= 0:
        raise ValueError("gamma and beta0 must be positive")
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"valuation must be in [0, 1], got {v}")
    if n < 2:
        raise ValueError(f"need at least 2 bidders, got {n}")
    if v == 0.0:
        return 0.0
    return max(0.0, 1.0 - math.sqrt(gamma * n / (beta0 * v ** n)))


class _IdPool:
    """Sequentially assigns procurer/participant ids, reusing participants
    of a procurer's earlier auctions at the configured repeat rate."""

    def __init__(self, config: SimConfig):
        pool = config.procurer_pool_size
        if pool is None:
            pool = max(1, config.n_auctions // 20)
        self.pool_size = pool
        self.repeat_rate = config.repeat_pair_rate
        self.history: dict[str, list[str]] = {}

    def draw(self, rng: np.random.Generator, auction_index: int, n_slots: int):
        procurer = f"P{int(rng.integers(0, self.pool_size)):05d}"
        seen = self.history.get(procurer, [])
        available = list(seen)
        participants: list[str] = []
        for slot in range(n_slots):
            if available and rng.uniform() < self.repeat_rate:
                pick = int(rng.integers(0, len(available)))
                participants.append(available.pop(pick))
            else:
                participants.append(f"B{auction_index:06d}x{slot}")
        fresh = [p for p in participants if p not in seen]
        self.history.setdefault(procurer, []).extend(fresh)
        return procurer, participants


def _truncated_noise(
    rng: np.random.Generator,
    base_seconds: np.ndarray,
    noise_seconds: float,
    duration_seconds: float,
) -> np.ndarray:
    """Add Gaussian noise truncated to the auction window.

    Truncation is by resampling (per bidder, bounded retries) so no
    probability mass piles up at the announce or deadline instants; the rare
    unconverged draw falls back to clipping.
    """
    if noise_seconds <= 0:
        return base_seconds.copy()
    out = np.empty_like(base_seconds)
    for i, base in enumerate(base_seconds):
        value = None
        for _ in range(100):
            candidate = base + rng.normal(0.0, noise_seconds)
            if 0.0 <= candidate <= duration_seconds:
                value = candidate
                break
        if value is None:
            value = min(max(base, 0.0), duration_seconds)
        out[i] = value
    return out


def _draw_reserve_kopecks(rng: np.random.Generator, config: SimConfig) -> Kopecks:
    mu = math.log(config.reserve_price_median_rubles)
    sigma = math.sqrt(
        2.0 * math.log(
            config.reserve_price_mean_rubles / config.reserve_price_median_rubles
        )
    ) if config.reserve_price_mean_rubles > config.reserve_price_median_rubles else 0.0
    for _ in range(1000):
        rubles = float(rng.lognormal(mu, sigma)) if sigma > 0 else (
            config.reserve_price_median_rubles
        )
        if _RESERVE_FLOOR_RUBLES <= rubles <= _RESERVE_CAP_RUBLES:
            return int(round(rubles * KOPECKS_PER_RUBLE))
    return int(_RESERVE_CAP_RUBLES * KOPECKS_PER_RUBLE)


def simulate_auction(
    config: SimConfig, auction_index: int, ids: _IdPool | None = None
) -> SyntheticAuction:
    """Generate one auction from a counter-based rng stream, so auction
    ``auction_index`` is identical regardless of how many others are drawn."""
    rng = np.random.default_rng([config.seed, _SIM_STREAM, auction_index])
    if ids is None:
        ids = _IdPool(config)

    support_start = 2
    n = support_start + int(
        rng.choice(len(config.participants_probs), p=config.participants_probs)
    )
    reserve_kop = _draw_reserve_kopecks(rng, config)

    window_start = parse_timestamp(config.announce_start)
    window_seconds = int(
        (parse_timestamp(config.announce_end) - window_start).total_seconds()
    )
    announce = window_start + timedelta(
        seconds=int(rng.integers(0, max(1, window_seconds)))
    )
    duration_seconds = config.duration_hours * 3600.0
    deadline = announce + timedelta(seconds=round(duration_seconds))

    valuations = rng.uniform(0.0, 1.0, size=n)
    amounts = [
        max(1, min(reserve_kop, round(reserve_kop * equilibrium_bid(float(v), n))))
        for v in valuations
    ]
    if config.timing_confound:
        base_seconds = np.array([
            optimal_timing(float(v), n, config.timing_cost_gamma,
                           config.leak_belief_beta0) * duration_seconds
            for v in valuations
        ])
        submit_seconds = _truncated_noise(
            rng, base_seconds, config.timing_noise_minutes * 60.0,
            duration_seconds,
        )
    else:
        submit_seconds = rng.uniform(0.0, duration_seconds, size=n)

    corrupted = bool(rng.uniform() < config.true_alpha)
    favored_amount = favored_seconds = None
    if corrupted:
        undercut = float(rng.uniform(0.0, config.undercut_max))
        undercut_kop = max(1, round(undercut * reserve_kop))
        favored_amount = max(1, min(amounts) - undercut_kop)
        window = min(config.leak_window_minutes * 60.0, duration_seconds)
        favored_seconds = float(
            rng.uniform(duration_seconds - window, duration_seconds)
        )

    n_slots = n + (1 if corrupted else 0)
    procurer, participants = ids.draw(rng, auction_index, n_slots)
    region = f"R{int(rng.integers(0, config.n_regions)):02d}"
    commission = int(_COMMISSION_SIZES[rng.integers(0, len(_COMMISSION_SIZES))])

    bids = [
        Bid(
            participant_id=participants[i],
            amount_kopecks=int(amounts[i]),
            submitted_at=announce + timedelta(seconds=round(float(submit_seconds[i]))),
        )
        for i in range(n)
    ]
    favored_id = None
    if corrupted:
        favored_id = participants[n]
        bids.append(Bid(
            participant_id=favored_id,
            amount_kopecks=int(favored_amount),
            submitted_at=announce + timedelta(seconds=round(favored_seconds)),
        ))

    record = AuctionRecord(
        auction_id=f"A{auction_index:06d}",
        procurer_id=procurer,
        reserve_price_kopecks=reserve_kop,
        announce_at=announce,
        deadline_at=deadline,
        bids=bids,
        region=region,
        commission_size=commission,
    )
    return SyntheticAuction(
        record=record,
        corrupted=corrupted,
        favored_participant=favored_id,
        valuations=[float(v) for v in valuations],
    )


def simulate_many(config: SimConfig) -> list[SyntheticAuction]:
    ids = _IdPool(config)
    return [simulate_auction(config, i, ids) for i in range(config.n_auctions)]


def generate_dataset(
    config: SimConfig,
) -> tuple[list[AuctionRecord], dict[str, bool]]:
    """Records plus a separate ground-truth map, so the detection pipeline
    never sees labels."""
    synths = simulate_many(config)
    records = [s.record for s in synths]
    truth = {s.record.auction_id: s.corrupted for s in synths}
    return records, truth


GROUND_TRUTH_HEADER = ["auction_id", "corrupted", "favored_participant"]


def ground_truth_csv(synths: list[SyntheticAuction]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(GROUND_TRUTH_HEADER)
    for s in synths:
        writer.writerow([
            s.record.auction_id,
            int(s.corrupted),
            s.favored_participant or "",
        ])
    return buf.getvalue()


def load_ground_truth(source) -> dict[str, bool]:
    if isinstance(source, str) and "\n" not in source:
        stream = open(source, "r", encoding="utf-8", newline="")
    elif isinstance(source, str):
        stream = io.StringIO(source)
    else:
        stream = source
    reader = csv.reader(stream)
    header = next(reader, None)
    if header != GROUND_TRUTH_HEADER:
        raise ConfigError(f"ground truth header mismatch: {header!r}")
    return {row[0]: bool(int(row[1])) for row in reader if row}
