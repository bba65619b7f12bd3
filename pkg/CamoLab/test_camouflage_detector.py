"""Similarity metrics, anchors, threshold bands, candidate filtering and relabeling"""

import math

import numpy as np
import pytest

from camouflage_detector import (AnchorSets, Candidate, DetectorConfig, SimilarityThresholds,
                                 calibrate_thresholds, cosine_similarity, detect_camouflage,
                                 document_frequency_weights, filter_candidates, jaccard_index,
                                 jaccard_weight_similarity, relabel, select_anchor_sets, similarity_matrix,
                                 trusted_pool)
from classifiers import LinearSvmModel, SvmHyper, train_linear_svm
from errors import DimensionMismatchError, ValidationError
from feature_catalog import Corpus, Provenance


def _corpus(rows, labels=None, ids=None, provenance=None):
    n = len(rows)
    return Corpus(np.array(rows, dtype=np.uint8), labels if labels is not None else [0] * n,
                  provenance or [Provenance.ORIGINAL] * n, ids or [f"s{i:02d}" for i in range(n)])


def _bits(v):
    return {i for i, b in enumerate(v) if b}


# ============================================================================
# METRICS
# ============================================================================

class TestMetrics:
    def test_against_set_arithmetic(self):
        rng = np.random.default_rng(5)
        w = rng.random(12) + 0.1
        for _ in range(30):
            a = (rng.random(12) < 0.4).astype(np.uint8)
            b = (rng.random(12) < 0.4).astype(np.uint8)
            A, B = _bits(a), _bits(b)
            if A | B:
                assert jaccard_index(a, b) == pytest.approx(len(A & B) / len(A | B))
            if A and B:
                assert cosine_similarity(a, b) == pytest.approx(len(A & B) / math.sqrt(len(A) * len(B)))
            assert jaccard_weight_similarity(a, b, w) == pytest.approx(sum(w[k] for k in A & B) / w.sum())

    def test_degenerate_conventions(self):
        zero = np.zeros(4, dtype=np.uint8)
        one = np.array([1, 0, 0, 0], dtype=np.uint8)
        assert jaccard_index(zero, zero) == 1.0
        assert jaccard_index(zero, one) == 0.0
        assert cosine_similarity(zero, one) == 0.0
        assert cosine_similarity(zero, zero) == 0.0

    def test_metrics_are_symmetric_and_bounded(self):
        a = np.array([1, 1, 0, 1], dtype=np.uint8)
        b = np.array([0, 1, 1, 1], dtype=np.uint8)
        w = np.array([0.5, 0.2, 0.1, 0.9])
        for value, mirrored in ((jaccard_index(a, b), jaccard_index(b, a)),
                                (cosine_similarity(a, b), cosine_similarity(b, a)),
                                (jaccard_weight_similarity(a, b, w), jaccard_weight_similarity(b, a, w))):
            assert value == pytest.approx(mirrored)
            assert 0.0 <= value <= 1.0

    def test_syntax_mask_excludes_sequence_features(self, tiny_catalog):
        a = np.array([1, 1, 0, 0, 1, 0, 1, 1], dtype=np.uint8)
        b = np.array([1, 0, 0, 1, 1, 0, 1, 0], dtype=np.uint8)
        w = np.arange(1.0, 9.0)
        syntax = tiny_catalog.syntax_mask
        expected = (w[0] + w[4]) / w[syntax].sum()
        assert jaccard_weight_similarity(a, b, w, syntax) == pytest.approx(expected)
        assert jaccard_weight_similarity(a, b, w) == pytest.approx((w[0] + w[4] + w[6]) / w.sum())
        M = similarity_matrix("weighted", np.vstack([a, b]), b, w, syntax)
        assert M[0, 0] == pytest.approx(expected)
        with pytest.raises(ValidationError, match="weights not computed"):
            jaccard_weight_similarity(a, b, np.where(syntax, 0.0, 1.0), syntax)

    def test_weights_must_be_computed(self):
        a = np.array([1, 0], dtype=np.uint8)
        with pytest.raises(ValidationError, match="weights not computed"):
            jaccard_weight_similarity(a, a, np.zeros(2))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            jaccard_index(np.zeros(3), np.zeros(4))

    @pytest.mark.parametrize("metric", ["jaccard", "weighted", "cosine"])
    def test_matrix_matches_pairwise(self, metric):
        rng = np.random.default_rng(9)
        A = (rng.random((5, 10)) < 0.3).astype(np.uint8)
        B = (rng.random((4, 10)) < 0.3).astype(np.uint8)
        A[0] = 0
        w = rng.random(10) + 0.05
        pairwise = {"jaccard": jaccard_index, "cosine": cosine_similarity,
                    "weighted": lambda a, b: jaccard_weight_similarity(a, b, w)}[metric]
        M = similarity_matrix(metric, A, B, w)
        for i in range(5):
            for j in range(4):
                assert M[i, j] == pytest.approx(pairwise(A[i], B[j]))

    def test_unknown_metric(self):
        with pytest.raises(ValidationError):
            similarity_matrix("hamming", np.zeros((1, 2)), np.zeros((1, 2)))

    def test_document_frequency_weights(self, tiny_catalog):
        X = np.zeros((4, 8), dtype=np.uint8)
        X[:2, 0] = 1
        X[:, 6] = 1
        weights = document_frequency_weights(_corpus(X), tiny_catalog)
        assert weights[0] == 0.5
        assert weights[6] == 0.0
        assert weights[1] == 0.0


# ============================================================================
# ANCHORS + THRESHOLDS
# ============================================================================

class TestAnchors:
    def test_extremes_by_score(self):
        model = LinearSvmModel(np.array([1.0, 2.0, 4.0]), 0.0)
        pool = _corpus([[0, 0, 1], [1, 0, 0], [0, 1, 0], [1, 1, 1], [0, 0, 0]], ids=["a", "b", "c", "d", "e"])
        anchors = select_anchor_sets(model, pool, 2)
        assert anchors.most_benign.sample_ids == ["e", "b"]
        assert anchors.most_malicious.sample_ids == ["a", "d"]

    def test_ties_ordered_by_id(self):
        model = LinearSvmModel(np.zeros(2), 0.0)
        pool = _corpus([[0, 1], [1, 0], [1, 1], [0, 0]], ids=["d", "b", "a", "c"])
        anchors = select_anchor_sets(model, pool, 2)
        assert anchors.most_benign.sample_ids == ["a", "b"]
        assert anchors.most_malicious.sample_ids == ["c", "d"]

    def test_pool_too_small(self):
        model = LinearSvmModel(np.zeros(2), 0.0)
        with pytest.raises(ValidationError):
            select_anchor_sets(model, _corpus([[0, 1], [1, 0], [1, 1]]), 2)

    def test_trusted_pool_skips_crafted(self):
        pool = trusted_pool(_corpus([[0], [1], [1]], [0, 1, 0],
                                    provenance=[Provenance.ORIGINAL, Provenance.CRAFTED, Provenance.RELABELED]))
        assert pool.sample_ids == ["s00"]


class TestThresholds:
    @pytest.mark.parametrize("mode", ["reference", "anchor-percentile"])
    def test_bands_are_ordered(self, small_split, catalog, mode):
        train, _ = small_split
        model = train_linear_svm(train, SvmHyper(epochs=20))
        anchors = select_anchor_sets(model, train, 10)
        weights = document_frequency_weights(train, catalog)
        detector = DetectorConfig(anchor_count=10, mode=mode)
        thresholds = calibrate_thresholds(anchors, train.where(train.labels == 0), weights, detector)
        assert set(thresholds.bands) == {"jaccard", "weighted", "cosine"}
        for t1, t2 in thresholds.bands.values():
            assert 0.0 <= t1 < t2 <= 1.0

    def test_fixed_bands(self):
        detector = DetectorConfig(mode="fixed", metrics=("jaccard",), bands={"jaccard": (0.2, 0.8)})
        anchors = AnchorSets(_corpus([[0, 1]]), _corpus([[1, 1]]), 1)
        thresholds = calibrate_thresholds(anchors, _corpus([[0, 1]]), None, detector)
        assert thresholds.bands == {"jaccard": (0.2, 0.8)}

    @pytest.mark.parametrize("band", [(0.5, 0.5), (0.7, 0.2), (-0.1, 0.4), (0.1, 1.2)])
    def test_invalid_band(self, band):
        with pytest.raises(ValidationError):
            SimilarityThresholds({"jaccard": band})

    @pytest.mark.parametrize("kwargs", [{"mode": "median"}, {"anchor_count": 0}, {"metrics": ("hamming",)},
                                        {"mode": "fixed"}, {"aggregator": "mean"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValidationError):
            DetectorConfig(**kwargs)


# ============================================================================
# FILTER + RELABEL
# ============================================================================

class TestFilter:
    def test_band_is_exclusive(self):
        anchors = AnchorSets(_corpus([[0, 0, 0, 1]]), _corpus([[1, 1, 0, 0]]), 1)
        suspects = _corpus([[1, 1, 0, 0], [1, 0, 0, 0], [1, 1, 1, 0], [0, 0, 1, 1]],
                           ids=["equal", "half", "near", "far"])
        found = filter_candidates(suspects, anchors, SimilarityThresholds({"jaccard": (0.5, 1.0)}))
        assert [c.sample_id for c in found] == ["near"]
        assert found[0].max_similarity == pytest.approx(2 / 3)
        assert found[0].matched == ("jaccard",)

    def test_nearest_anchor_and_ordering(self):
        anchors = AnchorSets(_corpus([[0, 0, 0, 1]]), _corpus([[1, 1, 0, 0], [0, 0, 1, 1]]), 2)
        suspects = _corpus([[0, 1, 1, 1], [1, 1, 1, 0], [0, 0, 1, 0]], ids=["x", "y", "z"])
        found = filter_candidates(suspects, anchors, SimilarityThresholds({"jaccard": (0.0, 1.0)}))
        assert [c.sample_id for c in found] == ["x", "y", "z"]
        assert [round(c.max_similarity, 4) for c in found] == [0.6667, 0.6667, 0.5]

    def test_any_metric_in_band_qualifies(self):
        anchors = AnchorSets(_corpus([[0, 0, 0, 1]]), _corpus([[1, 1, 0, 0]]), 1)
        suspects = _corpus([[1, 1, 1, 0]])
        thresholds = SimilarityThresholds({"jaccard": (0.9, 1.0), "cosine": (0.5, 0.9)})
        (found,) = filter_candidates(suspects, anchors, thresholds)
        assert found.matched == ("cosine",)
        assert set(found.to_dict()) == {"sample_id", "max_similarity", "matched", "sim_cosine", "sim_jaccard"}

    def test_empty_input(self):
        anchors = AnchorSets(_corpus([[0, 1]]), _corpus([[1, 1]]), 1)
        assert filter_candidates(Corpus.empty(2), anchors, SimilarityThresholds({"jaccard": (0.1, 0.9)})) == []


class TestRelabel:
    def test_sets_label_and_provenance(self):
        corpus = _corpus([[0], [1], [1]], [0, 0, 1], ids=["a", "b", "c"],
                         provenance=[Provenance.ORIGINAL, Provenance.CRAFTED, Provenance.ORIGINAL])
        out = relabel([Candidate("a", 0.5), "b"], corpus)
        assert out.labels.tolist() == [1, 1, 1]
        assert out.provenance == [Provenance.RELABELED, Provenance.CRAFTED, Provenance.ORIGINAL]
        assert corpus.labels.tolist() == [0, 0, 1]

    def test_unknown_id(self):
        with pytest.raises(ValidationError):
            relabel(["zz"], _corpus([[0]]))

    def test_nothing_to_relabel(self):
        corpus = _corpus([[0]])
        assert relabel([], corpus) is corpus


# ============================================================================
# ONE-SHOT DETECTION
# ============================================================================

def test_detect_camouflage_flags_only_predicted_benign(small_split, catalog):
    train, test = small_split
    model = train_linear_svm(train, SvmHyper(epochs=20))
    weights = document_frequency_weights(train, catalog)
    detection = detect_camouflage(model, train, test, weights, DetectorConfig(anchor_count=8))
    assert detection.anchors.anchor_count == 8
    for candidate in detection.candidates:
        x = test.X[test.position(candidate.sample_id)]
        assert model.predict(x[None, :])[0] == 0
        assert candidate.matched
