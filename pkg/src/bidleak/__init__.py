"""Bid-leakage detection for first-price sealed-bid procurement auctions.

The pipeline reduces leakage detection to positive-unlabeled classification:
a winner-vs-runner-up gradient-boosted classifier, a placebo-dataset bias
correction, and a KDE + fixed-point mixture estimator that yields a
population prior and per-auction posteriors of corruption. A game-theoretic
simulator supplies ground-truth-labeled synthetic corpora for validation.
"""

__version__ = "0.1.0"

from .auctions import (
    AuctionRecord,
    Bid,
    DatasetStats,
    FilterReport,
    RankedAuction,
    compute_stats,
    parse_auctions,
    rank_auction,
    serialize_auctions,
    validate_and_filter,
)
from .errors import (
    BidleakError,
    ConfigError,
    ConvergenceError,
    DataError,
    PipelineStageError,
    SchemaError,
)
from .features import (
    FeatureVector,
    HistoryIndex,
    PairDataset,
    PairRow,
    PlaceboLevel,
    build_history_index,
    build_pair_dataset,
    extract_features,
)
from .gbt import (
    EvalMetrics,
    GBTModel,
    OOFPredictions,
    TrainConfig,
    cross_val_fit,
    cross_val_predict,
    evaluate,
    oof_predict,
    predict,
    train_gbt,
)
from .pipeline import PipelineConfig, PipelineResult, run_pipeline
from .pu import (
    DeltaCorrection,
    DensityGrid,
    MixtureEstimate,
    em_estimate,
    estimate_delta,
    estimate_density,
    posterior_for_auction,
    zero_delta,
)
from .reports import (
    IndependenceReport,
    ParityReport,
    ReportTable,
    aggregate_alpha,
    independence_check,
    parity_check,
    sniper_share,
)
from .simulate import (
    SimConfig,
    SyntheticAuction,
    equilibrium_bid,
    expected_profit,
    generate_dataset,
    optimal_timing,
    simulate_auction,
)
