#!/usr/bin/env python3
"""
Camouflage detector
Finds malware hiding among predicted-benign samples by its resemblance to
trusted, confidently malicious anchors.

FLOW:
1. Anchors: the anchor_count lowest and highest decision scores of the
   trusted (never crafted) training pool
2. Similarity of every candidate to its nearest malicious anchor under
   Jaccard, weighted Jaccard (syntax features) and cosine
3. A sample is a camouflage candidate when any metric falls strictly inside
   that metric's band (t1, t2)
4. Candidates are relabeled Malicious
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

import config
from classifiers import TrainedModel
from errors import DimensionMismatchError, ValidationError
from feature_catalog import Corpus, FeatureCatalog, Provenance

logger = logging.getLogger(__name__)

BAND_EPSILON = 1e-6


# ============================================================================
# SIMILARITY METRICS
# ============================================================================

def _pair(a, b) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionMismatchError(f"vectors differ in shape: {a.shape} vs {b.shape}")
    return a, b


def _check_weights(weights, dimension: int, syntax_mask=None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (dimension,):
        raise DimensionMismatchError(f"weights have shape {w.shape}, vectors have {dimension} features")
    if syntax_mask is not None:
        mask = np.asarray(syntax_mask, dtype=bool)
        if mask.shape != w.shape:
            raise DimensionMismatchError(f"syntax mask has shape {mask.shape}, weights have {w.shape}")
        w = np.where(mask, w, 0.0)
    if not (w > 0).any():
        raise ValidationError("weights not computed")
    return w


def jaccard_index(a, b) -> float:
    """|A & B| / |A | B| over set bits; two empty vectors count as identical"""
    a, b = _pair(a, b)
    union = int(np.sum(a | b))
    if union == 0:
        return 1.0
    return int(np.sum(a & b)) / union


def jaccard_weight_similarity(a, b, weights, syntax_mask=None) -> float:
    """
    sum_k w_k * [a_k = b_k = 1] / sum_k w_k, k over syntax features

    With syntax_mask (catalog.syntax_mask) every other feature is zeroed in
    both sums. Without it the weights are used as given; the ones built by
    document_frequency_weights are already 0 on sequence features.
    """
    a, b = _pair(a, b)
    w = _check_weights(weights, len(a), syntax_mask)
    return float(w[(a == 1) & (b == 1)].sum() / w.sum())


def cosine_similarity(a, b) -> float:
    """A.B / (|A| |B|); 0.0 when either vector is all zero"""
    a, b = _pair(a, b)
    na, nb = int(a.sum()), int(b.sum())
    if na == 0 or nb == 0:
        return 0.0
    return int(a @ b) / (np.sqrt(na) * np.sqrt(nb))


def similarity_matrix(metric: str, A, B, weights=None, syntax_mask=None) -> np.ndarray:
    """Pairwise similarities between the rows of A and the rows of B"""
    A = np.atleast_2d(np.asarray(A, dtype=np.int64))
    B = np.atleast_2d(np.asarray(B, dtype=np.int64))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatchError("row vectors differ in dimension")
    inter = A @ B.T
    size_a, size_b = A.sum(axis=1), B.sum(axis=1)

    if metric == "jaccard":
        union = size_a[:, None] + size_b[None, :] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(union == 0, 1.0, inter / np.maximum(union, 1))
    if metric == "cosine":
        norms = np.sqrt(size_a)[:, None] * np.sqrt(size_b)[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(norms == 0, 0.0, inter / np.where(norms == 0, 1.0, norms))
    if metric == "weighted":
        w = _check_weights(weights, A.shape[1], syntax_mask)
        return (A * w[None, :]) @ B.T / w.sum()
    raise ValidationError(f"unknown similarity metric '{metric}'")


def document_frequency_weights(corpus: Corpus, catalog: FeatureCatalog) -> np.ndarray:
    """Fraction of samples exhibiting each syntax feature; sequence features get 0"""
    if len(corpus) == 0:
        raise ValidationError("document frequencies need a nonempty corpus")
    if corpus.dimension != len(catalog):
        raise DimensionMismatchError("corpus does not match catalog")
    weights = corpus.X.mean(axis=0)
    weights[~catalog.syntax_mask] = 0.0
    return weights


# ============================================================================
# ANCHORS + THRESHOLDS
# ============================================================================

@dataclass
class AnchorSets:
    most_benign: Corpus
    most_malicious: Corpus
    anchor_count: int


@dataclass
class SimilarityThresholds:
    bands: Dict[str, Tuple[float, float]]

    def __post_init__(self):
        for metric, (t1, t2) in self.bands.items():
            if metric not in config.METRICS:
                raise ValidationError(f"unknown similarity metric '{metric}'")
            if not (0.0 <= t1 < t2 <= 1.0):
                raise ValidationError(f"band for {metric} must satisfy 0 <= t1 < t2 <= 1, got ({t1}, {t2})")

    def to_dict(self) -> Dict:
        return {m: [round(t1, 4), round(t2, 4)] for m, (t1, t2) in sorted(self.bands.items())}


@dataclass
class DetectorConfig:
    enabled: bool = True
    anchor_count: int = config.ANCHOR_COUNT
    mode: str = config.THRESHOLD_MODE
    reference_percentile: float = config.REFERENCE_PERCENTILE
    lower_percentile: float = config.ANCHOR_LOWER_PERCENTILE
    upper_percentile: float = config.ANCHOR_UPPER_PERCENTILE
    metrics: Tuple[str, ...] = config.METRICS
    aggregator: str = "max"
    bands: Optional[Dict[str, Tuple[float, float]]] = None
    append_detections: bool = True

    def __post_init__(self):
        if self.mode not in ("reference", "anchor-percentile", "fixed"):
            raise ValidationError(f"unknown threshold mode '{self.mode}'")
        if self.aggregator != "max":
            raise ValidationError("only the 'max' aggregator is supported")
        if self.anchor_count < 1:
            raise ValidationError("anchor_count must be at least 1")
        unknown = set(self.metrics) - set(config.METRICS)
        if unknown:
            raise ValidationError(f"unknown similarity metrics: {sorted(unknown)}")
        if self.mode == "fixed" and not self.bands:
            raise ValidationError("fixed threshold mode needs explicit bands")
        if self.bands:
            self.bands = {m: (float(t[0]), float(t[1])) for m, t in self.bands.items()}
            SimilarityThresholds(self.bands)


def select_anchor_sets(model: TrainedModel, trusted_pool: Corpus, anchor_count: int) -> AnchorSets:
    """
    Extreme-score anchors from a trusted pool

    Samples are ordered by (score, sample_id); the first anchor_count become
    most_benign, the last anchor_count most_malicious.
    """
    if anchor_count < 1:
        raise ValidationError("anchor_count must be at least 1")
    if len(trusted_pool) < 2 * anchor_count:
        raise ValidationError(f"trusted pool of {len(trusted_pool)} is smaller than 2 x {anchor_count} anchors")
    scores = model.scores(trusted_pool.X)
    id_rank = np.empty(len(trusted_pool), dtype=np.int64)
    id_rank[np.argsort(np.array(trusted_pool.sample_ids, dtype=object), kind="stable")] = np.arange(len(trusted_pool))
    order = np.lexsort((id_rank, scores))
    return AnchorSets(trusted_pool.subset(order[:anchor_count]),
                      trusted_pool.subset(order[-anchor_count:]), anchor_count)


def _ordered_band(t1: float, t2: float) -> Tuple[float, float]:
    t1 = float(np.clip(t1, 0.0, 1.0 - BAND_EPSILON))
    t2 = float(np.clip(t2, 0.0, 1.0))
    if t2 <= t1:
        t2 = min(1.0, t1 + BAND_EPSILON)
    return t1, t2


def calibrate_thresholds(anchors: AnchorSets, reference_benign: Corpus, weights,
                         detector: Optional[DetectorConfig] = None) -> SimilarityThresholds:
    """
    Derive one (t1, t2) band per metric

    reference mode: t1 = reference_percentile of trusted benign samples'
    nearest-malicious-anchor similarity; t2 = upper_percentile of the
    malicious anchors' nearest other malicious anchor.
    anchor-percentile mode: lower/upper percentiles of all benign-anchor to
    malicious-anchor similarities.
    fixed mode: the configured bands.
    """
    detector = detector or DetectorConfig()
    if detector.mode == "fixed":
        return SimilarityThresholds({m: detector.bands[m] for m in detector.metrics})

    malicious = anchors.most_malicious.X
    bands = {}
    for metric in detector.metrics:
        if detector.bands and metric in detector.bands:
            bands[metric] = detector.bands[metric]
            continue
        if detector.mode == "anchor-percentile":
            sims = similarity_matrix(metric, anchors.most_benign.X, malicious, weights).ravel()
            t1 = np.percentile(sims, detector.lower_percentile)
            t2 = np.percentile(sims, detector.upper_percentile)
        else:
            reference = reference_benign.X if len(reference_benign) else anchors.most_benign.X
            nearest = similarity_matrix(metric, reference, malicious, weights).max(axis=1)
            t1 = np.percentile(nearest, detector.reference_percentile)
            if len(malicious) > 1:
                peer = similarity_matrix(metric, malicious, malicious, weights)
                np.fill_diagonal(peer, -np.inf)
                t2 = np.percentile(peer.max(axis=1), detector.upper_percentile)
            else:
                t2 = 1.0
        bands[metric] = _ordered_band(t1, t2)
    return SimilarityThresholds(bands)


# ============================================================================
# FILTER + RELABEL
# ============================================================================

@dataclass
class Candidate:
    sample_id: str
    max_similarity: float
    similarities: Dict[str, float] = field(default_factory=dict)
    matched: Tuple[str, ...] = ()

    def to_dict(self) -> Dict:
        return {"sample_id": self.sample_id, "max_similarity": round(self.max_similarity, 4),
                "matched": "|".join(self.matched),
                **{f"sim_{m}": round(v, 4) for m, v in sorted(self.similarities.items())}}


def filter_candidates(predicted_benign: Corpus, anchors: AnchorSets,
                      thresholds: SimilarityThresholds, weights=None) -> List[Candidate]:
    """
    Band-filter predicted-benign samples against the malicious anchors

    Args:
        predicted_benign: Samples the classifier called benign
        anchors: AnchorSets of the current round
        thresholds: Per-metric bands
        weights: Document-frequency weights (needed for the weighted metric)

    Returns:
        Candidates ordered by descending max similarity, then sample_id
    """
    if len(predicted_benign) == 0 or len(anchors.most_malicious) == 0:
        return []
    nearest = {metric: similarity_matrix(metric, predicted_benign.X, anchors.most_malicious.X, weights).max(axis=1)
               for metric in thresholds.bands}
    in_any = np.zeros(len(predicted_benign), dtype=bool)
    hits = {}
    for metric, (t1, t2) in thresholds.bands.items():
        hits[metric] = (nearest[metric] > t1) & (nearest[metric] < t2)
        in_any |= hits[metric]

    candidates = []
    for i in np.flatnonzero(in_any):
        sims = {m: float(nearest[m][i]) for m in thresholds.bands}
        matched = tuple(m for m in config.METRICS if m in hits and hits[m][i])
        candidates.append(Candidate(predicted_benign.sample_ids[i], max(sims.values()), sims, matched))
    candidates.sort(key=lambda c: (-c.max_similarity, c.sample_id))
    logger.debug("%d of %d predicted-benign samples fall inside a band", len(candidates), len(predicted_benign))
    return candidates


def relabel(candidates: Iterable[Union[Candidate, str]], corpus: Corpus) -> Corpus:
    """Set each candidate's label to Malicious; Original samples become Relabeled"""
    ids = [c.sample_id if isinstance(c, Candidate) else str(c) for c in candidates]
    if not ids:
        return corpus
    positions = [corpus.position(sid) for sid in ids]
    labels = corpus.labels.copy()
    provenance = list(corpus.provenance)
    for pos in positions:
        labels[pos] = 1
        if provenance[pos] is Provenance.ORIGINAL:
            provenance[pos] = Provenance.RELABELED
    return Corpus(corpus.X.copy(), labels, provenance, list(corpus.sample_ids))


# ============================================================================
# ONE-SHOT DETECTION
# ============================================================================

@dataclass
class Detection:
    anchors: AnchorSets
    thresholds: SimilarityThresholds
    candidates: List[Candidate]


def trusted_pool(train: Corpus) -> Corpus:
    return train.where(train.provenance_mask(Provenance.ORIGINAL))


def detect_camouflage(model: TrainedModel, train: Corpus, target: Corpus, weights,
                      detector: Optional[DetectorConfig] = None) -> Detection:
    """
    Anchors and bands from the trusted part of `train`, candidates among the
    samples of `target` that the model calls benign
    """
    detector = detector or DetectorConfig()
    pool = trusted_pool(train)
    anchors = select_anchor_sets(model, pool, detector.anchor_count)
    reference = pool.where(pool.labels == 0)
    thresholds = calibrate_thresholds(anchors, reference, weights, detector)
    predicted_benign = target.where(model.predict(target.X) == 0) if len(target) else target
    candidates = filter_candidates(predicted_benign, anchors, thresholds, weights)
    return Detection(anchors, thresholds, candidates)
