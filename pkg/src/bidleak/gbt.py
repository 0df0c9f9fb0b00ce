"""Gradient-boosted decision trees for the winner-vs-runner-up classifier.

Stagewise logistic-loss boosting: each regression tree fits the negative
gradients (label minus predicted probability), leaves take one Newton step
(sum of gradients over sum of hessians), and splits are exact greedy scans
over sorted feature values. Training is deterministic given the seed and
input order; the seed only drives cross-validation fold shuffles.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
import numpy as np

from .errors import ConfigError, DataError
from .features import FEATURE_NAMES, FeatureVector, PairDataset

_MARGIN_CLIP = 30.0  # keeps sigmoid strictly inside (0, 1) in float64
_EPS_HESSIAN = 1e-12
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 60
    max_depth: int = 5
    learning_rate: float = 0.1
    min_samples_leaf: int = 50
    n_folds: int = 3
    n_repeats: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if not 1 <= self.max_depth <= 12:
            raise ConfigError(f"max_depth must be in [1, 12], got {self.max_depth}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError(
                f"learning_rate must be in (0, 1], got {self.learning_rate}"
            )
        if self.min_samples_leaf < 1:
            raise ConfigError(
                f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}"
            )
        if self.n_folds < 2:
            raise ConfigError(f"n_folds must be >= 2, got {self.n_folds}")
        if self.n_repeats < 1:
            raise ConfigError(f"n_repeats must be >= 1, got {self.n_repeats}")


def _sigmoid(margin: np.ndarray) -> np.ndarray:
    out = np.empty_like(margin, dtype=np.float64)
    pos = margin >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-margin[pos]))
    e = np.exp(margin[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def log_loss(labels: np.ndarray, probs: np.ndarray) -> float:
    p = np.clip(probs, 1e-15, 1.0 - 1e-15)
    return float(-np.mean(labels * np.log(p) + (1 - labels) * np.log(1.0 - p)))


@dataclass
class Tree:
    """Flat-array binary regression tree; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int32)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]


class _TreeBuilder:
    def __init__(self, X, grad, hess, max_depth, min_samples_leaf):
        self.X = X
        self.grad = grad
        self.hess = hess
        self.max_depth = max_depth
        self.min_leaf = min_samples_leaf
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def _best_split(self, idx: np.ndarray):
        g = self.grad[idx]
        h = self.hess[idx]
        G, H = g.sum(), h.sum()
        parent = G * G / max(H, _EPS_HESSIAN)
        n = len(idx)
        best = None  # (gain, feat, thr)
        lo, hi = self.min_leaf - 1, n - self.min_leaf
        if lo >= hi:
            return None
        pos = np.arange(lo, hi)
        for feat in range(self.X.shape[1]):
            xs = self.X[idx, feat]
            order = np.argsort(xs, kind="stable")
            xs_sorted = xs[order]
            distinct = xs_sorted[pos] < xs_sorted[pos + 1]
            if not distinct.any():
                continue
            gl = np.cumsum(g[order])[pos]
            hl = np.cumsum(h[order])[pos]
            gr, hr = G - gl, H - hl
            gain = (
                gl * gl / np.maximum(hl, _EPS_HESSIAN)
                + gr * gr / np.maximum(hr, _EPS_HESSIAN)
                - parent
            )
            gain[~distinct] = -np.inf
            k = int(np.argmax(gain))
            if gain[k] > _MIN_GAIN and (best is None or gain[k] > best[0]):
                best = (float(gain[k]), feat, float(xs_sorted[pos[k]]))
        return best

    def build(self, idx: np.ndarray, depth: int = 0) -> int:
        nid = self._new_node()
        split = None
        if depth < self.max_depth and len(idx) >= 2 * self.min_leaf:
            split = self._best_split(idx)
        if split is None:
            G = self.grad[idx].sum()
            H = self.hess[idx].sum()
            self.value[nid] = float(G / max(H, _EPS_HESSIAN))
            return nid
        _, feat, thr = split
        go_left = self.X[idx, feat] <= thr
        left_id = self.build(idx[go_left], depth + 1)
        right_id = self.build(idx[~go_left], depth + 1)
        self.feature[nid] = feat
        self.threshold[nid] = thr
        self.left[nid] = left_id
        self.right[nid] = right_id
        return nid

    def to_tree(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
        )


@dataclass
class GBTModel:
    """Boosted ensemble mapping a feature vector to a win probability."""

    initial_score: float
    learning_rate: float
    trees: list[Tree]
    feature_names: tuple[str, ...] = FEATURE_NAMES
    train_loss: list[float] = field(default_factory=list)

    def decision_margin(self, X: np.ndarray) -> np.ndarray:
        margin = np.full(X.shape[0], self.initial_score, dtype=np.float64)
        for tree in self.trees:
            margin += self.learning_rate * tree.predict(X)
        return margin

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        margin = np.clip(self.decision_margin(X), -_MARGIN_CLIP, _MARGIN_CLIP)
        return _sigmoid(margin)

    def to_json_dict(self) -> dict:
        return {
            "format": "bidleak-gbt",
            "version": 1,
            "initial_score": repr(self.initial_score),
            "learning_rate": repr(self.learning_rate),
            "feature_names": list(self.feature_names),
            "train_loss": [repr(v) for v in self.train_loss],
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": [repr(v) for v in t.threshold.tolist()],
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "value": [repr(v) for v in t.value.tolist()],
                }
                for t in self.trees
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "GBTModel":
        doc = json.loads(text)
        if doc.get("format") != "bidleak-gbt" or doc.get("version") != 1:
            raise DataError("unrecognized model document")
        trees = [
            Tree(
                feature=np.asarray(t["feature"], dtype=np.int32),
                threshold=np.asarray([float(v) for v in t["threshold"]]),
                left=np.asarray(t["left"], dtype=np.int32),
                right=np.asarray(t["right"], dtype=np.int32),
                value=np.asarray([float(v) for v in t["value"]]),
            )
            for t in doc["trees"]
        ]
        return cls(
            initial_score=float(doc["initial_score"]),
            learning_rate=float(doc["learning_rate"]),
            trees=trees,
            feature_names=tuple(doc["feature_names"]),
            train_loss=[float(v) for v in doc["train_loss"]],
        )


def _check_training_labels(y: np.ndarray) -> None:
    if y.size == 0:
        raise DataError("cannot train on an empty dataset")
    if y.min() == y.max():
        raise DataError("training data contains a single class")


def _fit_arrays(X: np.ndarray, y: np.ndarray, config: TrainConfig) -> GBTModel:
    _check_training_labels(y)
    base_rate = float(y.mean())
    initial = float(np.log(base_rate / (1.0 - base_rate)))
    margin = np.full(X.shape[0], initial, dtype=np.float64)
    y_f = y.astype(np.float64)
    trees: list[Tree] = []
    losses: list[float] = []
    all_idx = np.arange(X.shape[0])
    for _ in range(config.n_trees):
        p = _sigmoid(np.clip(margin, -_MARGIN_CLIP, _MARGIN_CLIP))
        builder = _TreeBuilder(
            X, y_f - p, p * (1.0 - p), config.max_depth, config.min_samples_leaf
        )
        builder.build(all_idx)
        tree = builder.to_tree()
        trees.append(tree)
        margin += config.learning_rate * tree.predict(X)
        losses.append(log_loss(y_f, _sigmoid(np.clip(margin, -_MARGIN_CLIP, _MARGIN_CLIP))))
    return GBTModel(
        initial_score=initial,
        learning_rate=config.learning_rate,
        trees=trees,
        train_loss=losses,
    )


def train_gbt(data: PairDataset, config: TrainConfig) -> GBTModel:
    X, y, _ = data.to_arrays()
    return _fit_arrays(X, y, config)


def predict(model: GBTModel, x: FeatureVector) -> float:
    """Win probability for a single feature vector; pure and deterministic."""
    X = np.asarray([x.as_tuple()], dtype=np.float64)
    return float(model.predict_matrix(X)[0])


@dataclass
class CVModels:
    """Fold models from grouped cross-validation, one set per repeat.

    ``fold_of_auction[r]`` maps auction id to its fold in repeat ``r``; the
    model for fold f of repeat r was trained with that fold's auctions
    entirely held out.
    """

    config: TrainConfig
    fold_of_auction: list[dict[str, int]]
    models: list[list[GBTModel]]


@dataclass
class OOFPredictions:
    """Out-of-fold probabilities: each row predicted only by models that
    never saw its auction in training; repeats are averaged into ``y``."""

    auction_ids: list[str]
    labels: np.ndarray
    fold_ids: np.ndarray      # (n_repeats, n_rows)
    repeat_preds: np.ndarray  # (n_repeats, n_rows)

    @property
    def n_repeats(self) -> int:
        return self.repeat_preds.shape[0]

    @property
    def y(self) -> np.ndarray:
        return self.repeat_preds.mean(axis=0)

    def winner_preds(self) -> np.ndarray:
        return self.y[self.labels == 1]

    def runnerup_preds(self) -> np.ndarray:
        return self.y[self.labels == 0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["auction_id", "label", "repeat", "fold", "y"])
        for rep in range(self.n_repeats):
            for i, auction_id in enumerate(self.auction_ids):
                writer.writerow([
                    auction_id,
                    int(self.labels[i]),
                    rep,
                    int(self.fold_ids[rep, i]),
                    repr(float(self.repeat_preds[rep, i])),
                ])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source) -> "OOFPredictions":
        if isinstance(source, str) and "\n" in source:
            stream = io.StringIO(source)
        elif isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
            stream = open(source, "r", encoding="utf-8", newline="")
        else:
            stream = source
        reader = csv.reader(stream)
        header = next(reader, None)
        if header != ["auction_id", "label", "repeat", "fold", "y"]:
            raise DataError(f"predictions header mismatch: {header!r}")
        by_repeat: dict[int, list[tuple[str, int, int, float]]] = {}
        for row in reader:
            if not row:
                continue
            by_repeat.setdefault(int(row[2]), []).append(
                (row[0], int(row[1]), int(row[3]), float(row[4]))
            )
        if not by_repeat:
            raise DataError("predictions file contains no rows")
        repeats = sorted(by_repeat)
        first = by_repeat[repeats[0]]
        ids = [r[0] for r in first]
        labels = np.asarray([r[1] for r in first], dtype=np.int64)
        fold_ids = np.zeros((len(repeats), len(first)), dtype=np.int32)
        preds = np.zeros((len(repeats), len(first)), dtype=np.float64)
        for k, rep in enumerate(repeats):
            rows = by_repeat[rep]
            if [r[0] for r in rows] != ids:
                raise DataError("predictions file has inconsistent row order")
            fold_ids[k] = [r[2] for r in rows]
            preds[k] = [r[3] for r in rows]
        return cls(
            auction_ids=ids, labels=labels, fold_ids=fold_ids, repeat_preds=preds
        )


def cross_val_fit(data: PairDataset, config: TrainConfig) -> CVModels:
    """Train one model per (repeat, fold) with auction-grouped folds."""
    X, y, ids = data.to_arrays()
    _check_training_labels(y)
    unique_auctions = sorted(set(ids))
    if len(unique_auctions) < config.n_folds:
        raise DataError(
            f"{len(unique_auctions)} auctions cannot fill {config.n_folds} folds"
        )
    fold_maps: list[dict[str, int]] = []
    all_models: list[list[GBTModel]] = []
    for rep in range(config.n_repeats):
        rng = np.random.default_rng([config.seed, 104729, rep])
        perm = rng.permutation(len(unique_auctions))
        fold_of: dict[str, int] = {}
        for fold, chunk in enumerate(np.array_split(perm, config.n_folds)):
            for j in chunk:
                fold_of[unique_auctions[j]] = fold
        row_fold = np.asarray([fold_of[a] for a in ids])
        models = []
        for fold in range(config.n_folds):
            train_mask = row_fold != fold
            models.append(_fit_arrays(X[train_mask], y[train_mask], config))
        fold_maps.append(fold_of)
        all_models.append(models)
    return CVModels(config=config, fold_of_auction=fold_maps, models=all_models)


def oof_predict(cv: CVModels, data: PairDataset) -> OOFPredictions:
    """Predict every row of ``data`` with the fold model that held out the
    row's auction. Auction ids must have been present during cross_val_fit."""
    X, y, ids = data.to_arrays()
    n_repeats = len(cv.models)
    fold_ids = np.zeros((n_repeats, len(ids)), dtype=np.int32)
    preds = np.zeros((n_repeats, len(ids)), dtype=np.float64)
    for rep in range(n_repeats):
        fold_of = cv.fold_of_auction[rep]
        try:
            row_fold = np.asarray([fold_of[a] for a in ids])
        except KeyError as exc:
            raise DataError(
                f"auction {exc.args[0]!r} was not part of cross-validation"
            ) from exc
        fold_ids[rep] = row_fold
        for fold, model in enumerate(cv.models[rep]):
            mask = row_fold == fold
            if mask.any():
                preds[rep, mask] = model.predict_matrix(X[mask])
    return OOFPredictions(
        auction_ids=list(ids), labels=y, fold_ids=fold_ids, repeat_preds=preds
    )


def cross_val_predict(data: PairDataset, config: TrainConfig) -> OOFPredictions:
    return oof_predict(cross_val_fit(data, config), data)


def roc_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    """Probability that a random positive outranks a random negative, ties
    counting one half (average-rank Mann-Whitney)."""
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC-AUC requires both classes")
    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg_rank = (ends - counts + 1 + ends) / 2.0
    ranks = avg_rank[inverse]
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def accuracy_at_half(labels: np.ndarray, scores: np.ndarray) -> float:
    """Fraction classified correctly at threshold 0.5; a score of exactly
    0.5 counts as a runner-up (label 0) prediction."""
    predicted = np.asarray(scores) > 0.5
    return float(np.mean(predicted == (np.asarray(labels) == 1)))


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    roc_auc: float
    accuracy_std: float
    roc_auc_std: float
    n_rows: int

    def to_json_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "roc_auc": self.roc_auc,
            "accuracy_std": self.accuracy_std,
            "roc_auc_std": self.roc_auc_std,
            "n_rows": self.n_rows,
        }


def evaluate(preds: OOFPredictions) -> EvalMetrics:
    """Mean and std of accuracy / ROC-AUC across cross-validation repeats."""
    labels = preds.labels
    if labels.size == 0 or labels.min() == labels.max():
        raise DataError("evaluation requires both classes")
    accs = [
        accuracy_at_half(labels, preds.repeat_preds[r])
        for r in range(preds.n_repeats)
    ]
    aucs = [roc_auc(labels, preds.repeat_preds[r]) for r in range(preds.n_repeats)]
    return EvalMetrics(
        accuracy=float(np.mean(accs)),
        roc_auc=float(np.mean(aucs)),
        accuracy_std=float(np.std(accs)),
        roc_auc_std=float(np.std(aucs)),
        n_rows=int(labels.size),
    )
