"""
Differentiable logistic surrogate used for crafting gradients.

f1(x) = sigmoid(w.x + b), f0(x) = 1 - f1(x).
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from scipy.special import expit

import config
from classifiers import TrainedModel, register_family
from errors import DegenerateTrainingSetError, DimensionMismatchError, ValidationError
from feature_catalog import Corpus

logger = logging.getLogger(__name__)


@dataclass
class SurrogateHyper:
    epochs: int = config.SURROGATE_EPOCHS
    learning_rate: float = config.SURROGATE_LEARNING_RATE


@register_family("logistic_surrogate")
@dataclass
class LogisticSurrogate(TrainedModel):
    weights: np.ndarray
    bias: float
    loss_history: Optional[List[float]] = None

    @property
    def dimension(self) -> int:
        return len(self.weights)

    def logit(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.dimension:
            raise DimensionMismatchError(f"input has {X.shape[1]} features, surrogate expects {self.dimension}")
        return X @ self.weights + self.bias

    def f1(self, X) -> np.ndarray:
        return expit(self.logit(X))

    def f0(self, X) -> np.ndarray:
        return 1.0 - self.f1(X)

    def _scores(self, X):
        return self.logit(X)

    def params(self) -> Dict:
        return {"weights": [float(w) for w in self.weights], "bias": float(self.bias)}

    @classmethod
    def from_params(cls, params: Dict) -> "LogisticSurrogate":
        return cls(np.asarray(params["weights"], dtype=np.float64), float(params["bias"]))


def train_surrogate(corpus: Corpus, hyper: Optional[SurrogateHyper] = None) -> LogisticSurrogate:
    """
    Full-batch gradient descent on mean cross-entropy from a zero start

    Args:
        corpus: Training corpus with both labels
        hyper: SurrogateHyper (epochs, learning_rate)

    Returns:
        LogisticSurrogate
    """
    hyper = hyper or SurrogateHyper()
    if hyper.epochs < 0 or hyper.learning_rate <= 0:
        raise ValidationError(f"invalid surrogate hyperparameters: {hyper}")
    if not corpus.has_both_labels():
        raise DegenerateTrainingSetError()

    data = corpus.sorted_by_id()
    X = data.X.astype(np.float64)
    y = data.labels.astype(np.float64)
    n, m = X.shape
    w, b = np.zeros(m), 0.0
    history = []

    for epoch in range(hyper.epochs):
        p = expit(X @ w + b)
        residual = p - y
        w = w - hyper.learning_rate * (X.T @ residual) / n
        b = b - hyper.learning_rate * residual.mean()
        if epoch % 50 == 0 or epoch == hyper.epochs - 1:
            eps = 1e-12
            loss = -np.mean(y * np.log(p + eps) + (1 - y) * np.log(1 - p + eps))
            history.append(float(loss))
            logger.debug("surrogate epoch %d loss %.6f", epoch, loss)

    return LogisticSurrogate(w, float(b), history)


def gradient_wrt_input(model: LogisticSurrogate, x, target_class: int) -> np.ndarray:
    """
    d f_target / d x_j for every feature j

    f1*(1-f1) is computed as sigmoid(z)*sigmoid(-z) so it stays accurate for
    large |z|. Accepts one vector or a matrix of row vectors.
    """
    if target_class not in (0, 1):
        raise ValidationError(f"target_class must be 0 or 1, got {target_class}")
    x = np.asarray(x, dtype=np.float64)
    z = model.logit(x)
    slope = expit(z) * expit(-z)
    grad = slope[:, None] * model.weights[None, :]
    if target_class == 0:
        grad = -grad
    return grad[0] if x.ndim == 1 else grad
