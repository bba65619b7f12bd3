#!/usr/bin/env python3
"""
Classifier families: linear SVM, k-nearest-neighbour and random forest

Every family exposes one signed decision score, positive on the malicious
side; predict(x) is Malicious iff score > 0 (score 0 is Benign).

Scores:
- LinearSvm: w.x + b
- Knn:       (malicious neighbour fraction - 0.5) * 2
- Forest:    (mean malicious leaf fraction - 0.5) * 2
"""

import json
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Type, Union

import numpy as np
from sklearn.metrics import confusion_matrix
from sklearn.tree import DecisionTreeClassifier

import config
from errors import DegenerateTrainingSetError, DimensionMismatchError, ValidationError
from feature_catalog import Corpus, pack_bits, unpack_bits

logger = logging.getLogger(__name__)

ENVELOPE_FORMAT = "camolab-model"
ENVELOPE_VERSION = 1
KNN_CHUNK = 512


# ============================================================================
# BASE
# ============================================================================

MODEL_FAMILIES: Dict[str, Type["TrainedModel"]] = {}


def register_family(name: str) -> Callable:
    def wrap(cls):
        cls.family = name
        MODEL_FAMILIES[name] = cls
        return cls
    return wrap


class TrainedModel(ABC):
    """Immutable trained model with a signed decision score"""

    family: str = ""

    @property
    @abstractmethod
    def dimension(self) -> int:
        ...

    @abstractmethod
    def _scores(self, X: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def params(self) -> Dict:
        ...

    @classmethod
    @abstractmethod
    def from_params(cls, params: Dict) -> "TrainedModel":
        ...

    def scores(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X))
        if X.shape[1] != self.dimension:
            raise DimensionMismatchError(f"input has {X.shape[1]} features, model expects {self.dimension}")
        return self._scores(X)

    def predict(self, X) -> np.ndarray:
        return (self.scores(X) > 0).astype(np.int8)


def decision_score(model: TrainedModel, x) -> Union[float, np.ndarray]:
    """Signed score for one vector (float) or a matrix of vectors (array)"""
    x = np.asarray(x)
    scores = model.scores(x)
    return float(scores[0]) if x.ndim == 1 else scores


def predict(model: TrainedModel, x) -> Union[int, np.ndarray]:
    x = np.asarray(x)
    labels = model.predict(x)
    return int(labels[0]) if x.ndim == 1 else labels


def _require_both_labels(corpus: Corpus):
    if not corpus.has_both_labels():
        raise DegenerateTrainingSetError()


# ============================================================================
# LINEAR SVM
# ============================================================================

@dataclass
class SvmHyper:
    C: float = config.SVM_C
    epochs: int = config.SVM_EPOCHS
    batch_size: int = config.SVM_BATCH_SIZE
    seed: int = 0


@register_family("linear_svm")
@dataclass
class LinearSvmModel(TrainedModel):
    weights: np.ndarray
    bias: float
    objective_history: List[float] = field(default_factory=list)

    @property
    def dimension(self) -> int:
        return len(self.weights)

    def _scores(self, X):
        return X.astype(np.float64) @ self.weights + self.bias

    def params(self):
        return {"weights": [float(w) for w in self.weights], "bias": float(self.bias),
                "objective_history": [float(v) for v in self.objective_history]}

    @classmethod
    def from_params(cls, params):
        return cls(np.asarray(params["weights"], dtype=np.float64), float(params["bias"]),
                   list(params.get("objective_history", [])))


def svm_objective(X: np.ndarray, y_signed: np.ndarray, w: np.ndarray, b: float, lam: float) -> float:
    """(lam/2)*(||w||^2 + b^2) + mean hinge loss"""
    hinge = np.maximum(0.0, 1.0 - y_signed * (X @ w + b))
    return float(0.5 * lam * (w @ w + b * b) + hinge.mean())


def svm_radius(C: float, n: int) -> float:
    """Radius of the ball holding (w, b) for regularization lam = C/n"""
    return math.sqrt(n / C)


def train_linear_svm(corpus: Corpus, hyper: Optional[SvmHyper] = None) -> LinearSvmModel:
    """
    Soft-margin linear SVM by mini-batch subgradient descent (Pegasos schedule)

    The regularization weight is lam = C/n (n training rows). The bias is an
    extra coordinate of the iterate: step size 1/(lam*t), projection of
    (w, b) onto the ball of radius 1/sqrt(lam), uniform averaging. After
    each epoch the averaged iterate replaces the kept solution only when it
    does not raise the objective, so the recorded history never increases.

    Args:
        corpus: Training corpus with both labels
        hyper: SvmHyper (C, epochs, batch_size, seed)

    Returns:
        LinearSvmModel
    """
    hyper = hyper or SvmHyper()
    if hyper.C <= 0 or hyper.epochs < 1 or hyper.batch_size < 1:
        raise ValidationError(f"invalid SVM hyperparameters: {hyper}")
    _require_both_labels(corpus)

    data = corpus.sorted_by_id()
    X = np.hstack([data.X.astype(np.float64), np.ones((len(data), 1))])
    y = np.where(data.labels == 1, 1.0, -1.0)
    n, m = X.shape
    lam = hyper.C / n
    radius = svm_radius(hyper.C, n)
    rng = np.random.default_rng(hyper.seed)

    v = np.zeros(m)
    avg = np.zeros(m)
    best = np.zeros(m)
    best_obj = svm_objective(X[:, :-1], y, best[:-1], best[-1], lam)
    history: List[float] = []
    t = 0

    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start:start + hyper.batch_size]
            t += 1
            eta = 1.0 / (lam * t)
            xb, yb = X[idx], y[idx]
            violated = yb * (xb @ v) < 1.0
            grad = lam * v - (yb[violated] @ xb[violated]) / len(idx)
            v = v - eta * grad
            norm = np.linalg.norm(v)
            if norm > radius:
                v *= radius / norm
            avg += (v - avg) / t

        obj = svm_objective(X[:, :-1], y, avg[:-1], avg[-1], lam)
        if obj <= best_obj:
            best_obj, best = obj, avg.copy()
        history.append(best_obj)
        if epoch % 50 == 0:
            logger.debug("svm epoch %d objective %.6f", epoch, best_obj)

    return LinearSvmModel(best[:-1].copy(), float(best[-1]), history)


# ============================================================================
# K-NEAREST NEIGHBOUR
# ============================================================================

@register_family("knn")
@dataclass
class KnnModel(TrainedModel):
    """Stores the training set sorted by sample_id; Hamming distance, ties by id"""
    k: int
    X: np.ndarray
    labels: np.ndarray
    sample_ids: List[str]

    @property
    def dimension(self) -> int:
        return self.X.shape[1]

    def neighbours(self, X: np.ndarray) -> np.ndarray:
        """Indices (into the stored set) of the k nearest rows, closest first"""
        train = self.X.astype(np.int32)
        n_train = len(train)
        out = np.empty((len(X), self.k), dtype=np.int64)
        for start in range(0, len(X), KNN_CHUNK):
            q = X[start:start + KNN_CHUNK].astype(np.int32)
            dist = q @ (1 - train).T + (1 - q) @ train.T
            # stored rows are in id order, so the row index breaks distance ties
            key = dist.astype(np.int64) * n_train + np.arange(n_train)
            part = np.argpartition(key, self.k - 1, axis=1)[:, :self.k]
            order = np.take_along_axis(key, part, axis=1).argsort(axis=1)
            out[start:start + KNN_CHUNK] = np.take_along_axis(part, order, axis=1)
        return out

    def _scores(self, X):
        nearest = self.neighbours(X)
        fraction = self.labels[nearest].mean(axis=1)
        return (fraction - 0.5) * 2.0

    def params(self):
        return {"k": self.k, "dimension": self.dimension, "sample_ids": list(self.sample_ids),
                "labels": [int(v) for v in self.labels], "bits": [pack_bits(row) for row in self.X]}

    @classmethod
    def from_params(cls, params):
        dim = int(params["dimension"])
        X = np.vstack([unpack_bits(b, dim) for b in params["bits"]]) if params["bits"] else np.zeros((0, dim))
        return cls(int(params["k"]), X.astype(np.uint8), np.asarray(params["labels"], dtype=np.int8),
                   list(params["sample_ids"]))


def train_knn(corpus: Corpus, k: int = config.KNN_K) -> KnnModel:
    if k < 1 or k % 2 == 0:
        raise ValidationError(f"k must be a positive odd number, got {k}")
    if k > len(corpus):
        raise ValidationError(f"k={k} exceeds corpus size {len(corpus)}")
    _require_both_labels(corpus)
    data = corpus.sorted_by_id()
    return KnnModel(k, data.X.copy(), data.labels.copy(), list(data.sample_ids))


# ============================================================================
# RANDOM FOREST
# ============================================================================

@dataclass
class ForestHyper:
    n_trees: int = config.FOREST_TREES
    max_depth: int = config.FOREST_MAX_DEPTH
    features_per_split: Optional[int] = None
    seed: int = 0


@dataclass
class TreeArrays:
    """Node arrays; feature -1 marks a leaf, x[feature] == 0 goes left"""
    feature: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            feat = self.feature[node]
            active = feat >= 0
            if not active.any():
                return self.value[node]
            bit = X[rows[active], feat[active]]
            node[active] = np.where(bit == 0, self.left[node[active]], self.right[node[active]])

    def to_dict(self) -> Dict:
        return {"feature": self.feature.tolist(), "left": self.left.tolist(),
                "right": self.right.tolist(), "value": [float(v) for v in self.value]}

    @classmethod
    def from_dict(cls, d: Dict) -> "TreeArrays":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["left"], dtype=np.int64),
                   np.asarray(d["right"], dtype=np.int64), np.asarray(d["value"], dtype=np.float64))

    @classmethod
    def leaf(cls, fraction: float) -> "TreeArrays":
        return cls(np.array([-1]), np.array([-1]), np.array([-1]), np.array([float(fraction)]))


@register_family("forest")
@dataclass
class ForestModel(TrainedModel):
    trees: List[TreeArrays]
    n_features: int

    def __post_init__(self):
        if not self.trees:
            raise ValidationError("forest needs at least one tree")
        for tree in self.trees:
            if (tree.feature >= self.n_features).any():
                raise ValidationError("tree references a feature outside the model dimension")

    @property
    def dimension(self) -> int:
        return self.n_features

    def _scores(self, X):
        fractions = np.mean([tree.apply(X) for tree in self.trees], axis=0)
        return (fractions - 0.5) * 2.0

    def params(self):
        return {"n_features": self.n_features, "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_params(cls, params):
        return cls([TreeArrays.from_dict(t) for t in params["trees"]], int(params["n_features"]))


def _export_tree(clf: DecisionTreeClassifier) -> TreeArrays:
    tree = clf.tree_
    counts = tree.value[:, 0, :]
    malicious_col = list(clf.classes_).index(1)
    value = counts[:, malicious_col] / counts.sum(axis=1)
    feature = np.where(tree.children_left < 0, -1, tree.feature).astype(np.int64)
    return TreeArrays(feature, tree.children_left.astype(np.int64), tree.children_right.astype(np.int64), value)


def train_forest(corpus: Corpus, hyper: Optional[ForestHyper] = None) -> ForestModel:
    """
    Bagged Gini trees, one per bootstrap resample, per-tree seeds spawned
    from the master seed

    Args:
        corpus: Training corpus with both labels
        hyper: ForestHyper (n_trees, max_depth, features_per_split, seed)
    """
    hyper = hyper or ForestHyper()
    if hyper.n_trees < 1:
        raise ValidationError("n_trees must be at least 1")
    if hyper.max_depth < 1:
        raise ValidationError("max_depth must be at least 1")
    _require_both_labels(corpus)

    data = corpus.sorted_by_id()
    X, y = data.X, data.labels.astype(np.int64)
    n, m = X.shape
    per_split = hyper.features_per_split or max(1, math.ceil(math.sqrt(m)))
    per_split = min(per_split, m)

    trees = []
    for child in np.random.SeedSequence(hyper.seed).spawn(hyper.n_trees):
        rng = np.random.default_rng(child)
        idx = rng.integers(0, n, size=n)
        tree_seed = int(rng.integers(0, 2**31 - 1))
        yb = y[idx]
        if yb.min() == yb.max():
            trees.append(TreeArrays.leaf(float(yb[0])))
            continue
        clf = DecisionTreeClassifier(criterion="gini", max_depth=hyper.max_depth,
                                     max_features=per_split, random_state=tree_seed)
        clf.fit(X[idx], yb)
        trees.append(_export_tree(clf))
    logger.debug("grew %d trees (depth<=%d, %d features per split)", len(trees), hyper.max_depth, per_split)
    return ForestModel(trees, m)


# ============================================================================
# EVALUATION
# ============================================================================

@dataclass
class EvalReport:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def fn_rate(self) -> float:
        positives = self.tp + self.fn
        return self.fn / positives if positives else 0.0

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["fn_rate"] = round(self.fn_rate, 4)
        out["accuracy"] = round(self.accuracy, 4)
        return out

    def csv_row(self) -> str:
        return f"{self.tp},{self.tn},{self.fp},{self.fn},{self.fn_rate:.4f},{self.accuracy:.4f}"

    CSV_HEADER = "tp,tn,fp,fn,fn_rate,accuracy"


def evaluate_predictions(y_true, y_pred) -> EvalReport:
    tn, fp, fn, tp = confusion_matrix(np.asarray(y_true), np.asarray(y_pred), labels=[0, 1]).ravel()
    return EvalReport(int(tp), int(tn), int(fp), int(fn))


def evaluate(model: TrainedModel, test: Corpus) -> EvalReport:
    """Confusion counts, accuracy and FN rate of a model on a test corpus"""
    if len(test) == 0:
        raise ValidationError("test corpus is empty")
    return evaluate_predictions(test.labels, model.predict(test.X))


# ============================================================================
# FACTORY + JSON ENVELOPE
# ============================================================================

CLASSIFIER_NAMES = {"svm": "linear_svm", "linear_svm": "linear_svm", "knn": "knn",
                    "forest": "forest", "rf": "forest"}


def train_classifier(name: str, corpus: Corpus, seed: int = 0, **hyper) -> TrainedModel:
    """
    Train a family by name with optional hyperparameter overrides

    Args:
        name: svm | knn | forest (aliases linear_svm, rf)
        corpus: Training corpus
        seed: Master seed
        hyper: Family hyperparameters (C, epochs, batch_size / k /
            n_trees, max_depth, features_per_split)
    """
    family = CLASSIFIER_NAMES.get(name.lower())
    if family is None:
        raise ValidationError(f"unknown classifier '{name}' (choose svm, knn or forest)")
    try:
        if family == "linear_svm":
            return train_linear_svm(corpus, SvmHyper(seed=seed, **hyper))
        if family == "knn":
            return train_knn(corpus, **hyper)
        return train_forest(corpus, ForestHyper(seed=seed, **hyper))
    except TypeError as e:
        raise ValidationError(f"bad hyperparameters for {name}: {e}") from None


def model_to_dict(model: TrainedModel) -> Dict:
    return {"format": ENVELOPE_FORMAT, "version": ENVELOPE_VERSION, "family": model.family,
            "dimension": model.dimension, "params": model.params()}


def model_from_dict(doc: Dict) -> TrainedModel:
    import surrogate  # noqa: F401  registers the surrogate family

    if doc.get("format") != ENVELOPE_FORMAT:
        raise ValidationError("not a CamoLab model document")
    if doc.get("version") != ENVELOPE_VERSION:
        raise ValidationError(f"unsupported model version {doc.get('version')}")
    family = MODEL_FAMILIES.get(doc.get("family"))
    if family is None:
        raise ValidationError(f"unknown model family {doc.get('family')}")
    model = family.from_params(doc["params"])
    if model.dimension != doc.get("dimension"):
        raise DimensionMismatchError("model dimension does not match its envelope")
    return model


def save_model(model: TrainedModel, path: Union[str, Path]) -> Path:
    from utils.atomic_io import atomic_write_text

    return atomic_write_text(path, json.dumps(model_to_dict(model), sort_keys=True, indent=1) + "\n")


def load_model(path: Union[str, Path]) -> TrainedModel:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"model file is not valid JSON: {e}") from None
    return model_from_dict(doc)
