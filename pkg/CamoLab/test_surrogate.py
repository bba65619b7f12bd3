from dataclasses import fields

import numpy as np
import pytest

from errors import DegenerateTrainingSetError, ValidationError
from feature_catalog import Corpus, Provenance
from surrogate import LogisticSurrogate, SurrogateHyper, gradient_wrt_input, train_surrogate


@pytest.fixture(scope="module")
def surrogate(small_split):
    return train_surrogate(small_split[0], SurrogateHyper(epochs=100))


def test_probabilities_sum_to_one(surrogate, small_split):
    X = small_split[1].X
    assert np.allclose(surrogate.f0(X) + surrogate.f1(X), 1.0)


def test_learns_the_direction(surrogate, small_split):
    _, test = small_split
    p = surrogate.f1(test.X)
    assert p[test.labels == 1].mean() > 0.8
    assert p[test.labels == 0].mean() < 0.2


def test_loss_goes_down(surrogate):
    assert surrogate.loss_history[-1] < surrogate.loss_history[0]


@pytest.mark.parametrize("target", [0, 1])
def test_gradient_matches_finite_differences(target):
    rng = np.random.default_rng(11)
    model = LogisticSurrogate(rng.normal(size=8), 0.3)
    x = (rng.random(8) < 0.5).astype(float)
    grad = gradient_wrt_input(model, x, target)
    f = model.f1 if target == 1 else model.f0
    h = 1e-6
    for j in range(8):
        up, down = x.copy(), x.copy()
        up[j] += h
        down[j] -= h
        numeric = (f(up)[0] - f(down)[0]) / (2 * h)
        assert grad[j] == pytest.approx(numeric, abs=1e-6)


def test_gradient_stays_finite_for_large_logits():
    model = LogisticSurrogate(np.full(4, 400.0), 0.0)
    grad = gradient_wrt_input(model, np.ones(4), 1)
    assert np.isfinite(grad).all()
    assert (grad >= 0).all()


def test_batch_gradient_matches_rows():
    rng = np.random.default_rng(2)
    model = LogisticSurrogate(rng.normal(size=5), -0.1)
    X = (rng.random((3, 5)) < 0.5).astype(np.uint8)
    batch = gradient_wrt_input(model, X, 0)
    for i in range(3):
        assert np.allclose(batch[i], gradient_wrt_input(model, X[i], 0))


def test_bad_target_class():
    with pytest.raises(ValidationError):
        gradient_wrt_input(LogisticSurrogate(np.zeros(2), 0.0), np.zeros(2), 2)


def test_single_label_corpus():
    corpus = Corpus(np.eye(2, dtype=np.uint8), [0, 0], [Provenance.ORIGINAL] * 2, ["a", "b"])
    with pytest.raises(DegenerateTrainingSetError):
        train_surrogate(corpus)


def test_training_is_a_pure_function_of_the_corpus(small_split):
    assert "seed" not in {f.name for f in fields(SurrogateHyper)}
    a = train_surrogate(small_split[0], SurrogateHyper(epochs=20))
    b = train_surrogate(small_split[0].subset(np.arange(len(small_split[0]))[::-1]), SurrogateHyper(epochs=20))
    assert np.array_equal(a.weights, b.weights) and a.bias == b.bias
