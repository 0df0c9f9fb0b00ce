from datetime import datetime, timedelta, timezone

import pytest

from bidleak.auctions import AuctionRecord, Bid


def ts(text: str) -> datetime:
    return datetime.fromisoformat(text).replace(tzinfo=timezone.utc)


T0 = ts("2016-03-01T00:00:00")


def make_auction(
    auction_id="A1",
    procurer_id="P1",
    reserve=50_000_000,
    announce=T0,
    duration_hours=168.0,
    bids=(),
    region=None,
    commission_size=None,
):
    """Bid spec: (participant_id, amount_kopecks, hours_after_announce)."""
    deadline = announce + timedelta(hours=duration_hours)
    return AuctionRecord(
        auction_id=auction_id,
        procurer_id=procurer_id,
        reserve_price_kopecks=reserve,
        announce_at=announce,
        deadline_at=deadline,
        bids=[
            Bid(pid, amount, announce + timedelta(hours=hours))
            for pid, amount, hours in bids
        ],
        region=region,
        commission_size=commission_size,
    )


@pytest.fixture(scope="session")
def sim_corpus():
    """A small default-config synthetic corpus shared across test modules."""
    from bidleak.simulate import SimConfig, simulate_many

    config = SimConfig(n_auctions=800, true_alpha=0.2, seed=424242)
    return simulate_many(config)
