import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidleak.errors import ConfigError, DataError
from bidleak.features import FeatureVector, PairDataset, PairRow, PlaceboLevel
from bidleak.gbt import (
    GBTModel,
    OOFPredictions,
    TrainConfig,
    Tree,
    accuracy_at_half,
    cross_val_fit,
    cross_val_predict,
    evaluate,
    oof_predict,
    predict,
    roc_auc,
    train_gbt,
)


def feature_row(values) -> FeatureVector:
    bid_last, met, timing, rel_bid, rel_timing, n = values
    return FeatureVector(int(bid_last), int(met), float(timing),
                         float(rel_bid), float(rel_timing), int(n))


def dataset_from_matrix(X, y, auction_ids=None) -> PairDataset:
    rows = []
    for i in range(len(y)):
        aid = auction_ids[i] if auction_ids else f"A{i // 2:06d}"
        rows.append(PairRow(aid, int(y[i]), feature_row(X[i])))
    return PairDataset(rows=rows, level=PlaceboLevel(0))


def paired_noise_dataset(n_auctions, seed):
    """Balanced pairs with features independent of labels."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_auctions):
        for label in (1, 0):
            fv = FeatureVector(
                bid_last=int(rng.integers(0, 2)),
                met_before=int(rng.integers(0, 2)),
                bid_timing=float(rng.uniform(0, 1440)),
                relative_bid=float(rng.uniform(0, 0.1)),
                relative_bid_timing=float(rng.uniform(0, 1440)),
                n_participants=int(rng.integers(2, 8)),
            )
            rows.append(PairRow(f"A{i:06d}", label, fv))
    return PairDataset(rows=rows, level=PlaceboLevel(0))


def separable_dataset(n_auctions, seed=0):
    """bid_last equals the label exactly."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_auctions):
        for label in (1, 0):
            fv = FeatureVector(label, 0, float(rng.uniform(0, 1440)),
                               0.05, 720.0, 3)
            rows.append(PairRow(f"A{i:06d}", label, fv))
    return PairDataset(rows=rows, level=PlaceboLevel(0))


class TestTrainConfig:
    def test_defaults_match_contract(self):
        cfg = TrainConfig()
        assert cfg.n_trees == 60 and cfg.max_depth == 5
        assert cfg.learning_rate == 0.1 and cfg.min_samples_leaf == 50
        assert cfg.n_folds == 3 and cfg.n_repeats == 3

    @pytest.mark.parametrize("kwargs", [
        {"n_trees": 0},
        {"max_depth": 0},
        {"max_depth": 13},
        {"learning_rate": 0.0},
        {"learning_rate": 1.5},
        {"n_folds": 1},
        {"min_samples_leaf": 0},
        {"n_repeats": 0},
    ])
    def test_invalid_configs_rejected(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)


class TestTraining:
    def test_separable_data_reaches_high_accuracy(self):
        data = separable_dataset(200)
        model = train_gbt(data, TrainConfig(n_trees=40, min_samples_leaf=5, seed=0))
        X, y, _ = data.to_arrays()
        preds = model.predict_matrix(X)
        assert accuracy_at_half(y, preds) == 1.0
        assert model.train_loss[-1] < 0.05

    def test_constant_features_predict_base_rate(self):
        X = [[0, 0, 700.0, 0.05, 700.0, 3]] * 100
        y = [1, 0] * 50
        model = train_gbt(dataset_from_matrix(X, y), TrainConfig(seed=0))
        preds = model.predict_matrix(np.asarray(X, dtype=float))
        assert np.allclose(preds, 0.5)

    def test_single_class_is_error(self):
        X = [[0, 0, 700.0, 0.05, 700.0, 3]] * 10
        with pytest.raises(DataError):
            train_gbt(dataset_from_matrix(X, [1] * 10), TrainConfig(seed=0))

    def test_empty_is_error(self):
        with pytest.raises(DataError):
            train_gbt(dataset_from_matrix([], []), TrainConfig(seed=0))

    def test_training_loss_non_increasing(self):
        data = paired_noise_dataset(500, seed=3)
        model = train_gbt(data, TrainConfig(seed=1))
        losses = model.train_loss
        assert all(a >= b - 1e-12 for a, b in zip(losses, losses[1:]))

    def test_noise_features_out_of_fold_accuracy_near_half(self):
        # 10,000 rows of pure noise; out-of-fold accuracy should sit inside
        # a 4-sigma binomial band around 0.5.
        data = paired_noise_dataset(5000, seed=11)
        preds = cross_val_predict(data, TrainConfig(n_repeats=1, seed=11))
        acc = accuracy_at_half(preds.labels, preds.y)
        band = 4.0 * np.sqrt(0.25 / len(preds.labels))
        assert abs(acc - 0.5) <= max(band, 0.02)

    def test_null_auc_window(self):
        # spec invariant: with >= 20,000 independent noise rows the
        # out-of-fold ROC-AUC stays within [0.48, 0.52]
        data = paired_noise_dataset(10_000, seed=7)
        preds = cross_val_predict(data, TrainConfig(n_repeats=1, seed=7))
        auc = roc_auc(preds.labels, preds.y)
        assert 0.48 <= auc <= 0.52


class TestPredict:
    def test_zero_tree_model_predicts_base_rate(self):
        model = GBTModel(initial_score=0.0, learning_rate=0.1, trees=[])
        fv = feature_row([1, 0, 100.0, 0.01, 100.0, 3])
        assert predict(model, fv) == 0.5

    def test_monotone_single_feature_model(self):
        # hand-built trees that split on bid_timing in the same direction
        trees = [
            Tree(feature=np.array([2, -1, -1], dtype=np.int32),
                 threshold=np.array([float(thr), 0.0, 0.0]),
                 left=np.array([1, -1, -1], dtype=np.int32),
                 right=np.array([2, -1, -1], dtype=np.int32),
                 value=np.array([0.0, 1.0, -1.0]))
            for thr in (200.0, 500.0, 900.0)
        ]
        model = GBTModel(initial_score=0.0, learning_rate=0.5, trees=trees)
        grid = np.linspace(0.0, 1440.0, 97)
        X = np.zeros((grid.size, 6))
        X[:, 2] = grid
        preds = model.predict_matrix(X)
        assert all(a >= b - 1e-15 for a, b in zip(preds, preds[1:]))

    def test_determinism(self):
        data = separable_dataset(100)
        model = train_gbt(data, TrainConfig(n_trees=10, min_samples_leaf=5, seed=0))
        fv = feature_row([1, 0, 100.0, 0.01, 100.0, 3])
        assert predict(model, fv) == predict(model, fv)

    def test_predictions_strictly_inside_unit_interval(self):
        data = separable_dataset(500)
        model = train_gbt(data, TrainConfig(n_trees=200, min_samples_leaf=1,
                                            learning_rate=1.0, seed=0))
        X, _, _ = data.to_arrays()
        preds = model.predict_matrix(X)
        assert preds.min() > 0.0 and preds.max() < 1.0


class TestCrossValidation:
    def test_three_auctions_three_folds(self):
        X = [[1, 0, 100.0, 0.01, 100.0, 3], [0, 0, 900.0, 0.08, 900.0, 3]] * 3
        y = [1, 0] * 3
        ids = ["A1", "A1", "A2", "A2", "A3", "A3"]
        data = dataset_from_matrix(X, y, ids)
        cfg = TrainConfig(n_trees=5, min_samples_leaf=1, n_folds=3,
                          n_repeats=1, seed=0)
        cv = cross_val_fit(data, cfg)
        fold_of = cv.fold_of_auction[0]
        assert sorted(fold_of) == ["A1", "A2", "A3"]
        assert sorted(fold_of.values()) == [0, 1, 2]

    def test_pair_rows_share_fold(self, sim_corpus):
        from bidleak.auctions import rank_auction
        from bidleak.features import build_history_index, build_pair_dataset
        records = [s.record for s in sim_corpus[:300]]
        ds = build_pair_dataset(
            [rank_auction(r) for r in records], 0, build_history_index(records)
        )
        cfg = TrainConfig(n_trees=5, n_repeats=2, seed=5)
        cv = cross_val_fit(ds, cfg)
        preds = oof_predict(cv, ds)
        for rep in range(2):
            folds_by_auction = {}
            for i, aid in enumerate(preds.auction_ids):
                folds_by_auction.setdefault(aid, set()).add(
                    int(preds.fold_ids[rep, i])
                )
            assert all(len(folds) == 1 for folds in folds_by_auction.values())

    def test_identical_runs_are_bit_identical(self):
        data = paired_noise_dataset(120, seed=2)
        cfg = TrainConfig(n_trees=8, min_samples_leaf=5, seed=9)
        a = cross_val_predict(data, cfg)
        b = cross_val_predict(data, cfg)
        assert np.array_equal(a.repeat_preds, b.repeat_preds)
        assert np.array_equal(a.fold_ids, b.fold_ids)

    def test_too_few_auctions_is_error(self):
        X = [[1, 0, 100.0, 0.01, 100.0, 3], [0, 0, 900.0, 0.08, 900.0, 3]]
        data = dataset_from_matrix(X, [1, 0], ["A1", "A1"])
        with pytest.raises(DataError):
            cross_val_fit(data, TrainConfig(n_folds=3, seed=0))

    def test_unknown_auction_rejected_at_predict(self):
        data = paired_noise_dataset(30, seed=4)
        cfg = TrainConfig(n_trees=3, min_samples_leaf=2, seed=0)
        cv = cross_val_fit(data, cfg)
        other = paired_noise_dataset(31, seed=5)
        with pytest.raises(DataError):
            oof_predict(cv, other)

    def test_oof_csv_round_trip(self):
        data = paired_noise_dataset(40, seed=6)
        preds = cross_val_predict(data, TrainConfig(n_trees=3, min_samples_leaf=2,
                                                    n_repeats=2, seed=1))
        text = preds.to_csv()
        back = OOFPredictions.from_csv(io.StringIO(text))
        assert back.auction_ids == preds.auction_ids
        assert np.array_equal(back.labels, preds.labels)
        assert np.array_equal(back.repeat_preds, preds.repeat_preds)
        assert np.array_equal(back.fold_ids, preds.fold_ids)


class TestMetrics:
    def test_perfect_separation(self):
        labels = np.array([1, 1, 0, 0])
        scores = np.array([0.9, 0.8, 0.2, 0.1])
        assert roc_auc(labels, scores) == 1.0
        assert accuracy_at_half(labels, scores) == 1.0

    def test_all_ties_give_half(self):
        labels = np.array([1, 0, 1, 0])
        scores = np.array([0.5, 0.5, 0.5, 0.5])
        assert roc_auc(labels, scores) == 0.5

    def test_two_point_case(self):
        labels = np.array([1, 0])
        scores = np.array([0.9, 0.1])
        assert roc_auc(labels, scores) == 1.0
        assert accuracy_at_half(labels, scores) == 1.0

    def test_score_half_counts_as_runner_up(self):
        labels = np.array([1, 0])
        scores = np.array([0.5, 0.4])
        assert accuracy_at_half(labels, scores) == 0.5

    def test_one_class_is_error(self):
        with pytest.raises(DataError):
            roc_auc(np.array([1, 1]), np.array([0.2, 0.4]))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 1),
                              st.integers(1, 99)),
                    min_size=4, max_size=60))
    def test_auc_invariant_under_monotone_transform(self, rows):
        labels = np.array([r[0] for r in rows])
        if labels.min() == labels.max():
            return
        # well-separated score lattice keeps the transform strictly
        # monotone in float arithmetic
        scores = np.array([r[1] for r in rows]) / 100.0
        a = roc_auc(labels, scores)
        b = roc_auc(labels, np.log(scores / (1 - scores)))
        assert a == pytest.approx(b, abs=1e-12)

    def test_evaluate_reports_per_repeat_spread(self):
        data = paired_noise_dataset(200, seed=8)
        preds = cross_val_predict(
            data, TrainConfig(n_trees=5, min_samples_leaf=5, n_repeats=3, seed=3)
        )
        metrics = evaluate(preds)
        assert 0.0 <= metrics.accuracy <= 1.0
        assert 0.0 <= metrics.roc_auc <= 1.0
        assert metrics.accuracy_std >= 0.0
        assert metrics.n_rows == 400

    def test_evaluate_one_class_is_error(self):
        preds = OOFPredictions(
            auction_ids=["A1", "A2"],
            labels=np.array([1, 1]),
            fold_ids=np.zeros((1, 2), dtype=np.int32),
            repeat_preds=np.array([[0.5, 0.6]]),
        )
        with pytest.raises(DataError):
            evaluate(preds)


class TestSerialization:
    def test_json_round_trip_preserves_predictions(self):
        data = separable_dataset(150, seed=1)
        model = train_gbt(data, TrainConfig(n_trees=12, min_samples_leaf=5, seed=2))
        restored = GBTModel.from_json(model.to_json())
        X, _, _ = data.to_arrays()
        assert np.array_equal(model.predict_matrix(X), restored.predict_matrix(X))
        assert restored.train_loss == model.train_loss

    def test_versioned_document(self):
        model = GBTModel(initial_score=0.0, learning_rate=0.1, trees=[])
        doc = model.to_json_dict()
        assert doc["format"] == "bidleak-gbt" and doc["version"] == 1

    def test_unknown_document_rejected(self):
        with pytest.raises(DataError):
            GBTModel.from_json('{"format": "other", "version": 9}')
