"""Command-line interface.

Subcommands cover the full pipeline and each stage separately so that every
stage can be re-run from the CSV/JSON artifacts of the previous one.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 convergence
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np
from dataclasses import asdict, replace
from pathlib import Path

from .auctions import (
    compute_stats,
    parse_auctions,
    parse_timestamp,
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
)
from .features import PairDataset, build_history_index, build_pair_dataset
from .gbt import OOFPredictions, TrainConfig, cross_val_fit, evaluate, train_gbt
from .pipeline import (
    PipelineConfig,
    _ArtifactWriter,
    build_manifest,
    run_pipeline,
    sha256_file,
    shared_bandwidth,
)
from .pu import em_estimate, estimate_delta, estimate_density
from .reports import (
    GROUPING_KEYS,
    aggregate_alpha,
    build_parity_report,
    independence_check,
    parity_predictions,
    render_report_figure,
    sniper_share,
)
from .simulate import SimConfig, ground_truth_csv, simulate_many

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CONVERGENCE = 4


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc


def _writer(out: str) -> _ArtifactWriter:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _ArtifactWriter(out_dir)


def _finish(
    writer: _ArtifactWriter, command: str, config_doc: dict, inputs: dict[str, str]
) -> None:
    manifest = build_manifest(
        command=command,
        config_doc=config_doc,
        inputs=inputs,
        outputs={p.name: sha256_file(p) for p in sorted(writer.written)},
    )
    writer.write_json("manifest.json", manifest)


def _load_filtered_auctions(path: str):
    records, _rejects = parse_auctions(path)
    if not records:
        raise DataError(f"no auctions in {path}")
    return records


def cmd_simulate(args) -> int:
    doc = _load_json(args.config) if args.config else {}
    sim = SimConfig.from_json_dict(doc)
    if args.seed is not None:
        sim = replace(sim, seed=args.seed)
    if args.true_alpha is not None:
        sim = replace(sim, true_alpha=args.true_alpha)
    if args.n_auctions is not None:
        sim = replace(sim, n_auctions=args.n_auctions)
    synths = simulate_many(sim)
    writer = _writer(args.out)
    writer.write_text("auctions.csv", serialize_auctions([s.record for s in synths]))
    writer.write_text("ground_truth.csv", ground_truth_csv(synths))
    _finish(writer, "simulate", sim.to_json_dict(), inputs={})
    print(f"simulated {sim.n_auctions} auctions -> {writer.path('auctions.csv')}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    records, rejects = parse_auctions(args.input)
    if args.now:
        now = parse_timestamp(args.now)
    else:
        stamps = [
            ts for rec in records
            for ts in (rec.announce_at, rec.deadline_at,
                       *(b.submitted_at for b in rec.bids))
        ]
        if not stamps:
            raise DataError("no parseable auctions in input")
        now = max(stamps)
    kept, report = validate_and_filter(records, now)
    writer = _writer(args.out)
    writer.write_text("filtered.csv", serialize_auctions(kept))
    reject_lines = ["line_number,reason,raw"]
    reject_lines += [f"{r.line_number},{r.reason},{r.raw}" for r in rejects]
    writer.write_text("rejects.csv", "\n".join(reject_lines) + "\n")
    writer.write_json("filter_report.json", report.to_json_dict())
    _finish(writer, "ingest", {"input": args.input, "now": args.now},
            inputs={args.input: sha256_file(Path(args.input))})
    print(f"kept {report.kept}/{report.total} auctions "
          f"({report.retention:.1%}); {len(rejects)} rejected rows")
    return EXIT_OK


def cmd_stats(args) -> int:
    records = _load_filtered_auctions(args.input)
    stats = compute_stats(records)
    writer = _writer(args.out)
    writer.write_json("stats.json", stats.to_json_dict())
    _finish(writer, "stats", {"input": args.input},
            inputs={args.input: sha256_file(Path(args.input))})
    for key, st in stats.rows.items():
        print(f"{key:32s} mean={st.mean:12.4f} median={st.median:12.4f} "
              f"std={st.std:12.4f}")
    return EXIT_OK


def cmd_features(args) -> int:
    records = _load_filtered_auctions(args.input)
    ranked = [rank_auction(r) for r in records]
    history = build_history_index(records)
    writer = _writer(args.out)
    for level in (0, 1, 2):
        data = build_pair_dataset(ranked, level, history)
        writer.write_text(f"pairs_level{level}.csv", data.to_csv())
        print(f"level {level}: {data.n_auctions} auctions, "
              f"{data.skipped_auctions} skipped")
    _finish(writer, "features", {"input": args.input},
            inputs={args.input: sha256_file(Path(args.input))})
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    doc = _load_json(args.config) if getattr(args, "config", None) else {}
    try:
        cfg = TrainConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_train_eval(args) -> int:
    cfg = _train_config(args)
    features_dir = Path(args.features)
    datasets = {}
    for level in (0, 1, 2):
        path = features_dir / f"pairs_level{level}.csv"
        if not path.exists():
            raise ConfigError(f"missing features file: {path}")
        datasets[level] = PairDataset.from_csv(path, level=level)
    cv = cross_val_fit(datasets[0], cfg)
    preds = parity_predictions(cv, datasets)
    metrics = {
        level: (evaluate(p) if p is not None else None)
        for level, p in preds.items()
    }
    parity = build_parity_report(metrics)
    writer = _writer(args.out)
    for level, p in preds.items():
        if p is not None:
            writer.write_text(f"predictions_level{level}.csv", p.to_csv())
    writer.write_json("parity.json", parity.to_json_dict())
    model = train_gbt(datasets[0], cfg)
    writer.write_text("model.json", model.to_json())
    _finish(
        writer, "train-eval",
        {"features": str(features_dir), "train": asdict(cfg)},
        inputs={
            f"pairs_level{level}.csv": sha256_file(features_dir / f"pairs_level{level}.csv")
            for level in (0, 1, 2)
        },
    )
    for level, m in metrics.items():
        if m is not None:
            print(f"level {level}: accuracy {m.accuracy:.4f} +- {m.accuracy_std:.4f}"
                  f"  roc_auc {m.roc_auc:.4f} +- {m.roc_auc_std:.4f}")
    print(f"parity: {parity.parity_verdict}; evidence: {parity.evidence_verdict}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    pred_dir = Path(args.predictions)
    level0_path = pred_dir / "predictions_level0.csv"
    if not level0_path.exists():
        raise ConfigError(f"missing predictions file: {level0_path}")
    level0 = OOFPredictions.from_csv(level0_path)
    winner_y = level0.winner_preds()
    runnerup_y = level0.runnerup_preds()
    samples = [winner_y, runnerup_y]
    placebo = None
    if not args.no_delta_correction:
        level1_path = pred_dir / "predictions_level1.csv"
        if not level1_path.exists():
            raise ConfigError(f"missing predictions file: {level1_path}")
        placebo = OOFPredictions.from_csv(level1_path)
        samples += [placebo.winner_preds(), placebo.runnerup_preds()]

    bandwidth = shared_bandwidth(samples, args.bandwidth)
    f_w = estimate_density(winner_y, args.grid_size, bandwidth)
    f_wbar = estimate_density(runnerup_y, args.grid_size, bandwidth)
    delta = None
    if placebo is not None:
        delta = estimate_delta(placebo.winner_preds(), placebo.runnerup_preds(),
                               args.grid_size, bandwidth)
    est = em_estimate(f_w, f_wbar, delta, winner_y)
    if not est.converged:
        raise ConvergenceError("mixture estimation did not converge")
    writer = _writer(args.out)
    writer.write_json("estimate.json", est.to_json_dict())
    winner_rows = sorted(
        (level0.auction_ids[i], float(level0.y[i]))
        for i in range(len(level0.auction_ids))
        if level0.labels[i] == 1
    )
    post = np.clip(
        np.interp([y for _, y in winner_rows], est.grid, est.posterior), 0.0, 1.0
    )
    lines = ["auction_id,y,posterior"]
    lines += [f"{a},{y!r},{float(p)!r}" for (a, y), p in zip(winner_rows, post)]
    writer.write_text("posteriors.csv", "\n".join(lines) + "\n")
    _finish(
        writer, "estimate",
        {"predictions": str(pred_dir), "grid_size": args.grid_size,
         "bandwidth": args.bandwidth,
         "delta_correction": not args.no_delta_correction},
        inputs={level0_path.name: sha256_file(level0_path)},
    )
    print(f"alpha = {est.alpha:.4f} ({est.iterations} iterations, "
          f"delta_correction={not args.no_delta_correction})")
    return EXIT_OK


def cmd_report(args) -> int:
    posteriors = {}
    with open(args.posteriors, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header != ["auction_id", "y", "posterior"]:
            raise DataError(f"posteriors header mismatch: {header!r}")
        for row in reader:
            if row:
                posteriors[row[0]] = float(row[2])
    records = _load_filtered_auctions(args.auctions)
    ranked = [rank_auction(r) for r in records]
    keys = GROUPING_KEYS if args.grouping == "all" else (args.grouping,)
    writer = _writer(args.out)
    for key in keys:
        table = aggregate_alpha(posteriors, ranked, key)
        writer.write_text(f"report_{key}.csv", table.to_csv())
        writer.write_figure(
            f"report_{key}.png", lambda path, t=table: render_report_figure(t, path)
        )
        print(f"report_{key}: {len(table.rows)} groups, "
              f"{table.total_count()} auctions")
    _finish(writer, "report",
            {"posteriors": args.posteriors, "auctions": args.auctions,
             "grouping": args.grouping},
            inputs={args.posteriors: sha256_file(Path(args.posteriors)),
                    args.auctions: sha256_file(Path(args.auctions))})
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _train_config(args)
    records = _load_filtered_auctions(args.input)
    ranked = [rank_auction(r) for r in records]
    history = build_history_index(records)
    datasets = {
        level: build_pair_dataset(ranked, level, history) for level in (0, 1, 2)
    }
    cv = cross_val_fit(datasets[0], cfg)
    preds = parity_predictions(cv, datasets)
    metrics = {
        level: (evaluate(p) if p is not None else None)
        for level, p in preds.items()
    }
    parity = build_parity_report(metrics)
    independence = independence_check(ranked)
    sniper = sniper_share(ranked)
    writer = _writer(args.out)
    writer.write_json("validation.json", {
        "parity": parity.to_json_dict(),
        "independence": independence.to_json_dict(),
        "sniper_share": sniper,
    })
    _finish(writer, "validate", {"input": args.input, "train": asdict(cfg)},
            inputs={args.input: sha256_file(Path(args.input))})
    print(f"parity: {parity.parity_verdict}; evidence: {parity.evidence_verdict}; "
          f"sniper share {sniper:.4f}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    if args.config:
        doc = _load_json(args.config)
        doc.setdefault("out_dir", args.out)
        if args.out:
            doc["out_dir"] = args.out
        config = PipelineConfig.from_json_dict(doc)
    else:
        sim = None
        if args.sim_config:
            sim = SimConfig.from_json_dict(_load_json(args.sim_config))
        elif args.input is None:
            raise ConfigError("pipeline needs --input, --sim-config or --config")
        config = PipelineConfig(out_dir=args.out, input_csv=args.input, sim=sim)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.no_delta_correction:
        overrides["delta_correction"] = False
    if args.grouping and args.grouping != "all":
        overrides["groupings"] = (args.grouping,)
    if args.true_alpha is not None:
        if config.sim is None:
            raise ConfigError("--true-alpha only applies when simulating")
        overrides["sim"] = replace(config.sim, true_alpha=args.true_alpha)
    if overrides:
        config = replace(config, **overrides)
    result = run_pipeline(config)
    print(f"alpha = {result.alpha:.4f}")
    print(f"parity: {result.parity.parity_verdict}; "
          f"evidence: {result.parity.evidence_verdict}")
    print(f"artifacts in {result.out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidleak",
        description="Bid-leakage detection for sealed-bid procurement auctions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic labeled corpus")
    p.add_argument("--config", help="SimConfig JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--true-alpha", type=float, dest="true_alpha")
    p.add_argument("--n-auctions", type=int, dest="n_auctions")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", help="parse and filter an auction CSV")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--now", help="ISO timestamp for the future-date check")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="dataset summary statistics")
    p.add_argument("--input", required=True, help="filtered auction CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("features", help="build pair datasets (levels 0-2)")
    p.add_argument("--input", required=True, help="filtered auction CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train-eval", help="grouped-CV classifier + parity")
    p.add_argument("--features", required=True, help="directory with pairs_level*.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_eval)

    p = sub.add_parser("estimate", help="mixture prior/posterior estimation")
    p.add_argument("--predictions", required=True,
                   help="directory with predictions_level*.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", type=int, default=1000, dest="grid_size")
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--no-delta-correction", action="store_true",
                   dest="no_delta_correction")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="aggregate posteriors by characteristic")
    p.add_argument("--posteriors", required=True)
    p.add_argument("--auctions", required=True, help="filtered auction CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--grouping", default="all",
                   choices=("all",) + GROUPING_KEYS)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="parity + independence + sniper checks")
    p.add_argument("--input", required=True, help="filtered auction CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--config", help="PipelineConfig JSON file")
    p.add_argument("--input", help="auction CSV (alternative to --sim-config)")
    p.add_argument("--sim-config", dest="sim_config", help="SimConfig JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--true-alpha", type=float, dest="true_alpha")
    p.add_argument("--grouping", default="all", choices=("all",) + GROUPING_KEYS)
    p.add_argument("--no-delta-correction", action="store_true",
                   dest="no_delta_correction")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PipelineStageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.cause
        if isinstance(cause, ConfigError):
            return EXIT_CONFIG
        if isinstance(cause, ConvergenceError):
            return EXIT_CONVERGENCE
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except BidleakError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
