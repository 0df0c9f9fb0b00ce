"""End-to-end orchestration: ingest -> filter -> rank -> features ->
grouped-CV classifier -> placebo-corrected mixture estimate -> reports.

Every run writes its artifacts atomically into one output directory plus a
manifest (resolved config, seeds, input/output digests) that is sufficient
to reproduce the run bit for bit. A stage failure removes everything the
failed run had written and re-raises with the stage name.
"""

from __future__ import annotations

import hashlib
import json
import os
import platform
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .auctions import (
    AuctionRecord,
    DatasetStats,
    FilterReport,
    RankedAuction,
    compute_stats,
    parse_auctions,
    parse_timestamp,
    rank_auction,
    serialize_auctions,
    validate_and_filter,
)
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    PipelineStageError,
)
from .features import PairDataset, build_history_index, build_pair_dataset
from .gbt import (
    EvalMetrics,
    TrainConfig,
    cross_val_fit,
    evaluate,
)
from .pu import (
    MixtureEstimate,
    em_estimate,
    estimate_delta,
    estimate_density,
    silverman_bandwidth,
)
from .reports import (
    DEFAULT_EVIDENCE_THRESHOLD,
    DEFAULT_PARITY_THRESHOLD,
    GROUPING_KEYS,
    IndependenceReport,
    ParityReport,
    ReportTable,
    aggregate_alpha,
    build_parity_report,
    independence_check,
    parity_predictions,
    render_density_figure,
    render_report_figure,
    sniper_share,
)
from .simulate import SimConfig, ground_truth_csv, simulate_many

#: Pipeline default: one shared kernel bandwidth for all four prediction
#: densities (smallest Silverman choice among them, widened by the scale
#: factor, but never below the floor). Ratio estimation wants much coarser
#: densities than visualization does: the widening trades posterior
#: resolution for ratio stability, which keeps the spurious prior on
#: corruption-free corpora near zero at desk-scale sample sizes, and the
#: equal smoothing of both mixture sides preserves the prior estimate.
DEFAULT_BANDWIDTH_SCALE = 4.0
DEFAULT_BANDWIDTH_FLOOR = 0.1

PLACEBO_LEVELS = (0, 1, 2)


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str
    input_csv: str | None = None
    sim: SimConfig | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    grid_size: int = 1000
    bandwidth: float | None = None
    bandwidth_scale: float = DEFAULT_BANDWIDTH_SCALE
    bandwidth_floor: float = DEFAULT_BANDWIDTH_FLOOR
    refine_passes: int = 1
    delta_correction: bool = True
    groupings: tuple[str, ...] = GROUPING_KEYS
    parity_threshold: float = DEFAULT_PARITY_THRESHOLD
    evidence_threshold: float = DEFAULT_EVIDENCE_THRESHOLD
    now: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if (self.input_csv is None) == (self.sim is None):
            raise ConfigError("exactly one of input_csv or sim must be set")
        if self.grid_size < 2:
            raise ConfigError("grid_size must be >= 2")
        if self.bandwidth is not None and self.bandwidth <= 0:
            raise ConfigError("bandwidth override must be positive")
        if self.bandwidth_scale <= 0:
            raise ConfigError("bandwidth_scale must be positive")
        if self.bandwidth_floor < 0:
            raise ConfigError("bandwidth_floor must be >= 0")
        if self.refine_passes < 0:
            raise ConfigError("refine_passes must be >= 0")
        unknown = set(self.groupings) - set(GROUPING_KEYS)
        if unknown:
            raise ConfigError(f"unknown groupings: {sorted(unknown)}")
        if self.now is not None:
            parse_timestamp(self.now)

    def resolved(self) -> "PipelineConfig":
        """Apply the top-level seed to the nested configs."""
        if self.seed is None:
            return self
        sim = replace(self.sim, seed=self.seed) if self.sim else None
        return replace(self, sim=sim, train=replace(self.train, seed=self.seed))

    def to_json_dict(self) -> dict:
        out: dict = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "sim":
                out[f.name] = value.to_json_dict() if value else None
            elif f.name == "train":
                out[f.name] = {
                    tf.name: getattr(value, tf.name) for tf in fields(TrainConfig)
                }
            elif isinstance(value, tuple):
                out[f.name] = list(value)
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown pipeline config keys: {sorted(unknown)}")
        kwargs = dict(doc)
        if kwargs.get("sim") is not None:
            kwargs["sim"] = SimConfig.from_json_dict(kwargs["sim"])
        if kwargs.get("train") is not None:
            try:
                kwargs["train"] = TrainConfig(**kwargs["train"])
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        if kwargs.get("groupings") is not None:
            kwargs["groupings"] = tuple(kwargs["groupings"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


@dataclass
class PipelineResult:
    out_dir: Path
    alpha: float
    estimate: MixtureEstimate
    posteriors: dict[str, float]
    winner_scores: dict[str, float]
    parity: ParityReport
    report_tables: dict[str, ReportTable]
    metrics_by_level: dict[int, EvalMetrics | None]
    independence: IndependenceReport
    sniper_share: float
    stats: DatasetStats
    filter_report: FilterReport
    manifest: dict


def sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


class _ArtifactWriter:
    """Atomic writes (temp-then-rename) with rollback for failed runs."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.written: list[Path] = []

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_text(self, name: str, text: str) -> Path:
        target = self.path(name)
        tmp = target.with_name(target.name + ".tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, target)
        self.written.append(target)
        return target

    def write_json(self, name: str, doc: dict) -> Path:
        return self.write_text(name, json.dumps(doc, indent=2) + "\n")

    def write_figure(self, name: str, render: Callable[[Path], None]) -> Path:
        target = self.path(name)
        tmp = target.with_name(target.name + ".tmp.png")
        render(tmp)
        os.replace(tmp, target)
        self.written.append(target)
        return target

    def rollback(self) -> None:
        for path in self.written:
            try:
                path.unlink()
            except OSError:
                pass


def shared_bandwidth(
    samples: list[np.ndarray],
    bandwidth: float | None = None,
    scale: float = DEFAULT_BANDWIDTH_SCALE,
    floor: float = DEFAULT_BANDWIDTH_FLOOR,
) -> float:
    """One kernel bandwidth for every density in an estimation run: the
    explicit override, or the smallest Silverman choice times ``scale``,
    raised to ``floor`` when the predictions are very concentrated."""
    if bandwidth is not None:
        return bandwidth
    bandwidths = [silverman_bandwidth(s) for s in samples if s.size >= 2]
    if not bandwidths or min(bandwidths) <= 0:
        raise DataError("cannot derive a kernel bandwidth: degenerate predictions")
    return max(floor, scale * min(bandwidths))


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    config = config.resolved()
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    writer = _ArtifactWriter(out_dir)
    stage = "setup"
    try:
        # --- simulate (optional) ---
        if config.sim is not None:
            stage = "simulate"
            synths = simulate_many(config.sim)
            records_csv = serialize_auctions([s.record for s in synths])
            input_path = writer.write_text("auctions.csv", records_csv)
            writer.write_text("ground_truth.csv", ground_truth_csv(synths))
        else:
            input_path = Path(config.input_csv)
            if not input_path.exists():
                raise ConfigError(f"input CSV not found: {input_path}")

        # --- ingest + filter ---
        stage = "ingest"
        records, rejects = parse_auctions(input_path)
        reject_lines = ["line_number,reason,raw"]
        reject_lines += [f"{r.line_number},{r.reason},{r.raw}" for r in rejects]
        writer.write_text("rejects.csv", "\n".join(reject_lines) + "\n")
        if config.now is not None:
            now = parse_timestamp(config.now)
        else:
            stamps = [
                ts
                for rec in records
                for ts in (
                    rec.announce_at,
                    rec.deadline_at,
                    *(b.submitted_at for b in rec.bids),
                )
            ]
            if not stamps:
                raise DataError("no parseable auctions in input")
            now = max(stamps)
        kept, filter_report = validate_and_filter(records, now)
        writer.write_text("filtered.csv", serialize_auctions(kept))
        writer.write_json("filter_report.json", filter_report.to_json_dict())
        if not kept:
            raise DataError("no auctions remain after filtering")

        # --- stats ---
        stage = "stats"
        stats = compute_stats(kept)
        writer.write_json("stats.json", stats.to_json_dict())

        # --- rank + features ---
        stage = "features"
        ranked = [rank_auction(rec) for rec in kept]
        history = build_history_index(kept)
        datasets: dict[int, PairDataset] = {
            level: build_pair_dataset(ranked, level, history)
            for level in PLACEBO_LEVELS
        }
        for level, data in datasets.items():
            writer.write_text(f"pairs_level{level}.csv", data.to_csv())

        # --- classifier: grouped CV on level 0, applied to placebo levels ---
        stage = "train"
        cv = cross_val_fit(datasets[0], config.train)
        preds = parity_predictions(cv, datasets)
        for level, p in preds.items():
            if p is not None:
                writer.write_text(f"predictions_level{level}.csv", p.to_csv())
        metrics = {
            level: (evaluate(p) if p is not None else None)
            for level, p in preds.items()
        }
        parity = build_parity_report(
            metrics, config.parity_threshold, config.evidence_threshold
        )
        writer.write_json("parity.json", parity.to_json_dict())

        # --- validation statistics ---
        stage = "validate"
        independence = independence_check(ranked)
        sniper = sniper_share(ranked)
        writer.write_json("validation.json", {
            "independence": independence.to_json_dict(),
            "sniper_share": sniper,
        })

        # --- mixture estimation ---
        stage = "estimate"
        level0 = preds[0]
        winner_y = level0.winner_preds()
        runnerup_y = level0.runnerup_preds()
        delta = None
        samples = [winner_y, runnerup_y]
        placebo = preds.get(1)
        if config.delta_correction:
            if placebo is None:
                raise DataError(
                    "placebo correction requested but no level-1 dataset exists"
                )
            samples += [placebo.winner_preds(), placebo.runnerup_preds()]
        bandwidth = shared_bandwidth(
            samples, config.bandwidth, config.bandwidth_scale,
            config.bandwidth_floor,
        )
        f_w = estimate_density(winner_y, config.grid_size, bandwidth)
        f_wbar = estimate_density(runnerup_y, config.grid_size, bandwidth)
        if config.delta_correction:
            delta = estimate_delta(
                placebo.winner_preds(), placebo.runnerup_preds(),
                config.grid_size, bandwidth,
            )
        estimate = em_estimate(f_w, f_wbar, delta, winner_y)
        winner_rows = [
            (auction_id, float(level0.y[i]))
            for i, auction_id in enumerate(level0.auction_ids)
            if level0.labels[i] == 1
        ]
        runnerup_auctions = [
            auction_id
            for i, auction_id in enumerate(level0.auction_ids)
            if level0.labels[i] == 0
        ]
        winner_ys = np.asarray([score for _, score in winner_rows])

        def posterior_map(est) -> dict[str, float]:
            values = np.clip(
                np.interp(winner_ys, est.grid, est.posterior), 0.0, 1.0
            )
            return {a: float(v) for (a, _), v in zip(winner_rows, values)}

        # Refinement: runner-ups of auctions that look corrupted are damped
        # out of the fair baseline, since the favored bidder's presence
        # distorts their recomputed features (they can never bid last).
        for _ in range(config.refine_passes):
            post = posterior_map(estimate)
            weights = np.asarray(
                [1.0 - post[a] for a in runnerup_auctions], dtype=np.float64
            )
            if weights.sum() <= 0:
                break
            f_wbar = estimate_density(
                runnerup_y, config.grid_size, bandwidth, weights=weights
            )
            estimate = em_estimate(f_w, f_wbar, delta, winner_y)
        if not estimate.converged:
            raise ConvergenceError(
                f"mixture estimation did not converge in {estimate.iterations} "
                "iterations"
            )
        winner_scores = dict(winner_rows)
        posteriors = posterior_map(estimate)
        posterior_lines = ["auction_id,y,posterior"]
        posterior_lines += [
            f"{auction_id},{winner_scores[auction_id]!r},{posteriors[auction_id]!r}"
            for auction_id in sorted(posteriors)
        ]
        writer.write_text("posteriors.csv", "\n".join(posterior_lines) + "\n")
        writer.write_json("estimate.json", estimate.to_json_dict())
        writer.write_figure(
            "densities.png",
            lambda path: render_density_figure(
                f_w, estimate.corrected_fair_density, estimate.grid,
                estimate.posterior, estimate.alpha, path,
            ),
        )

        # --- reports ---
        stage = "report"
        report_tables: dict[str, ReportTable] = {}
        for key in config.groupings:
            table = aggregate_alpha(posteriors, ranked, key)
            report_tables[key] = table
            writer.write_text(f"report_{key}.csv", table.to_csv())
            writer.write_figure(
                f"report_{key}.png",
                lambda path, t=table: render_report_figure(t, path),
            )

        # --- summary + manifest ---
        stage = "manifest"
        summary = {
            "alpha": estimate.alpha,
            "converged": estimate.converged,
            "iterations": estimate.iterations,
            "delta_correction": config.delta_correction,
            "bandwidth": bandwidth,
            "auctions_total": filter_report.total,
            "auctions_kept": filter_report.kept,
            "metrics": {
                str(level): (m.to_json_dict() if m else None)
                for level, m in metrics.items()
            },
            "parity_verdict": parity.parity_verdict,
            "evidence_verdict": parity.evidence_verdict,
            "sniper_share": sniper,
        }
        writer.write_json("summary.json", summary)
        manifest = build_manifest(
            command="pipeline",
            config_doc=config.to_json_dict(),
            inputs={str(input_path): sha256_file(Path(input_path))},
            outputs={
                p.name: sha256_file(p) for p in sorted(writer.written)
            },
        )
        writer.write_json("manifest.json", manifest)
        return PipelineResult(
            out_dir=out_dir,
            alpha=estimate.alpha,
            estimate=estimate,
            posteriors=posteriors,
            winner_scores=winner_scores,
            parity=parity,
            report_tables=report_tables,
            metrics_by_level=metrics,
            independence=independence,
            sniper_share=sniper,
            stats=stats,
            filter_report=filter_report,
            manifest=manifest,
        )
    except Exception as exc:
        writer.rollback()
        if isinstance(exc, PipelineStageError):
            raise
        raise PipelineStageError(stage, exc) from exc


def build_manifest(
    command: str,
    config_doc: dict,
    inputs: dict[str, str],
    outputs: dict[str, str],
) -> dict:
    """Reproducibility record: resolved config, seeds and content digests.

    Paths are reduced to basenames so two runs of the same configuration
    into different directories produce byte-identical manifests.
    """
    doc = dict(config_doc)
    doc.pop("out_dir", None)
    if doc.get("input_csv"):
        doc["input_csv"] = Path(doc["input_csv"]).name
    inputs = {Path(name).name: digest for name, digest in inputs.items()}
    canonical = json.dumps(doc, sort_keys=True)
    return {
        "package": "bidleak",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "command": command,
        "config": doc,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "inputs": inputs,
        "outputs": outputs,
    }
