#!/usr/bin/env python3
"""
Feature vocabulary, binary sample representation and IG-based feature selection

CATALOG FILE FORMAT:
- UTF-8 text, one feature per line: name<TAB>kind<TAB>indicativeness
- kind in {PERM, INT, HW, API, SEQ}; indicativeness in {B, M}
- Lines starting with '#' are comments
- Optional directive '#! counts PERM=61 INT=12 HW=5 API=97 SEQ=20' declares
  the per-kind totals the file must contain
"""

import base64
import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import entropy

from errors import DimensionMismatchError, ParseError, ValidationError

logger = logging.getLogger(__name__)


# ============================================================================
# ENUMS
# ============================================================================

class FeatureKind(Enum):
    PERMISSION = "PERM"
    INTENT = "INT"
    HARDWARE = "HW"
    API_CALL = "API"
    SEQUENCE = "SEQ"

    @property
    def is_syntax(self) -> bool:
        return self is not FeatureKind.SEQUENCE


class Indicativeness(Enum):
    BENIGN = "B"
    MALICIOUS = "M"


class Label(IntEnum):
    BENIGN = 0
    MALICIOUS = 1


class Provenance(Enum):
    ORIGINAL = "original"
    CRAFTED = "crafted"
    RELABELED = "relabeled"


KIND_ORDER = [FeatureKind.PERMISSION, FeatureKind.INTENT, FeatureKind.HARDWARE,
              FeatureKind.API_CALL, FeatureKind.SEQUENCE]


# ============================================================================
# CATALOG
# ============================================================================

@dataclass(frozen=True)
class FeatureDef:
    id: int
    name: str
    kind: FeatureKind
    indicativeness: Indicativeness
    doc_frequency_weight: float = 0.0


class FeatureCatalog:
    """Ordered, immutable feature vocabulary"""

    def __init__(self, features: Sequence[FeatureDef],
                 declared_counts: Optional[Dict[str, int]] = None):
        self.features: Tuple[FeatureDef, ...] = tuple(features)
        self.declared_counts = dict(declared_counts) if declared_counts else None
        self._index: Dict[str, int] = {}
        for expected_id, feat in enumerate(self.features):
            if feat.id != expected_id:
                raise ValidationError(f"feature ids must be dense: {feat.name} has id {feat.id}, expected {expected_id}")
            if feat.name in self._index:
                raise ValidationError(f"duplicate feature name: {feat.name}")
            self._index[feat.name] = feat.id

        kinds = np.array([f.kind.value for f in self.features], dtype=object)
        self.syntax_mask = np.array([f.kind.is_syntax for f in self.features], dtype=bool)
        self.sequence_mask = ~self.syntax_mask
        self.benign_mask = np.array(
            [f.kind.is_syntax and f.indicativeness is Indicativeness.BENIGN for f in self.features], dtype=bool)
        self.malicious_mask = np.array(
            [f.kind.is_syntax and f.indicativeness is Indicativeness.MALICIOUS for f in self.features], dtype=bool)
        self._kinds = kinds
        for arr in (self.syntax_mask, self.sequence_mask, self.benign_mask, self.malicious_mask):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.features)

    def __iter__(self) -> Iterator[FeatureDef]:
        return iter(self.features)

    def __getitem__(self, idx: int) -> FeatureDef:
        return self.features[idx]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, FeatureCatalog) and self.features == other.features

    def __hash__(self) -> int:
        return hash(self.sha256)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise ValidationError(f"unknown feature: {name}") from None

    def kind_mask(self, kind: FeatureKind) -> np.ndarray:
        return self._kinds == kind.value

    def names_of(self, kind: FeatureKind) -> List[str]:
        return [f.name for f in self.features if f.kind is kind]

    @property
    def kind_counts(self) -> Dict[str, int]:
        return {kind.value: int(self.kind_mask(kind).sum()) for kind in KIND_ORDER}

    @property
    def indicativeness_counts(self) -> Dict[str, int]:
        return {"B": int(self.benign_mask.sum()), "M": int(self.malicious_mask.sum())}

    @property
    def n_syntax(self) -> int:
        return int(self.syntax_mask.sum())

    @property
    def weights(self) -> np.ndarray:
        return np.array([f.doc_frequency_weight for f in self.features], dtype=np.float64)

    def to_tsv(self) -> str:
        """Canonical text form; weights are not part of it"""
        lines = [f"{f.name}\t{f.kind.value}\t{f.indicativeness.value}\n" for f in self.features]
        return "".join(lines)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()

    def with_weights(self, weights: np.ndarray) -> "FeatureCatalog":
        """Return a copy carrying document-frequency weights"""
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(self),):
            raise DimensionMismatchError(f"weights have shape {weights.shape}, catalog has {len(self)} features")
        feats = [replace(f, doc_frequency_weight=float(w)) for f, w in zip(self.features, weights)]
        return FeatureCatalog(feats, self.declared_counts)

    def subset(self, names: Iterable[str]) -> "FeatureCatalog":
        """Sub-catalog in this catalog's order, reindexed densely"""
        wanted = set(names)
        missing = wanted - set(self._index)
        if missing:
            raise ValidationError(f"unknown features: {sorted(missing)}")
        kept = [f for f in self.features if f.name in wanted]
        return FeatureCatalog([replace(f, id=i) for i, f in enumerate(kept)])

    def summary(self) -> Dict:
        return {
            "n_features": len(self),
            "kind_counts": self.kind_counts,
            "syntax_features": self.n_syntax,
            "indicativeness_counts": self.indicativeness_counts,
            "catalog_sha256": self.sha256,
        }


def _parse_counts_directive(text: str, line_no: int) -> Dict[str, int]:
    counts = {}
    for item in text.split()[1:]:
        key, sep, value = item.partition("=")
        if not sep or key not in {k.value for k in FeatureKind}:
            raise ParseError(f"bad counts directive item '{item}'", line_no)
        try:
            counts[key] = int(value)
        except ValueError:
            raise ParseError(f"bad count '{value}' for {key}", line_no) from None
    return counts


def parse_catalog(text: str) -> FeatureCatalog:
    """Parse catalog text into a validated FeatureCatalog"""
    kinds = {k.value: k for k in FeatureKind}
    marks = {i.value: i for i in Indicativeness}
    features: List[FeatureDef] = []
    seen: Dict[str, int] = {}
    declared = None

    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#!"):
            body = line[2:].strip()
            if body.startswith("counts"):
                declared = _parse_counts_directive(body, line_no)
            continue
        if line.startswith("#"):
            continue

        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, found {len(parts)}", line_no)
        name, kind, mark = (p.strip() for p in parts)
        if not name:
            raise ParseError("empty feature name", line_no)
        if kind not in kinds:
            raise ParseError(f"unknown kind '{kind}'", line_no)
        if mark not in marks:
            raise ParseError(f"unknown indicativeness '{mark}'", line_no)
        if name in seen:
            raise ParseError(f"duplicate feature name {name} (first seen on line {seen[name]})", line_no)
        seen[name] = line_no
        features.append(FeatureDef(len(features), name, kinds[kind], marks[mark]))

    if not features:
        raise ValidationError("empty catalog")

    catalog = FeatureCatalog(features, declared)
    if declared is not None:
        actual = catalog.kind_counts
        wrong = {k: (v, actual.get(k, 0)) for k, v in declared.items() if actual.get(k, 0) != v}
        if wrong:
            detail = ", ".join(f"{k}: declared {d}, found {a}" for k, (d, a) in sorted(wrong.items()))
            raise ValidationError(f"kind count mismatch ({detail})")
    return catalog


def load_catalog(path: Union[str, Path]) -> FeatureCatalog:
    """
    Load and validate a catalog file

    Args:
        path: Catalog file in the tab-separated format

    Returns:
        FeatureCatalog
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"catalog file not found: {path}")
    catalog = parse_catalog(path.read_text(encoding="utf-8"))
    logger.debug("loaded catalog %s: %s", path, catalog.kind_counts)
    return catalog


def save_catalog(catalog: FeatureCatalog, path: Union[str, Path]) -> Path:
    from utils.atomic_io import atomic_write_text

    header = "# name<TAB>kind<TAB>indicativeness\n"
    counts = " ".join(f"{k}={v}" for k, v in catalog.kind_counts.items())
    return atomic_write_text(path, f"{header}#! counts {counts}\n{catalog.to_tsv()}")


# ============================================================================
# SAMPLES
# ============================================================================

def as_vector(bits, catalog: Optional[FeatureCatalog] = None) -> np.ndarray:
    """Coerce to a uint8 0/1 vector, checking binariness and dimension"""
    vec = np.asarray(bits)
    if vec.ndim != 1:
        raise DimensionMismatchError(f"feature vector must be 1-D, got shape {vec.shape}")
    if not np.isin(vec, (0, 1)).all():
        raise ValidationError("feature vector components must be 0 or 1")
    if catalog is not None and len(vec) != len(catalog):
        raise DimensionMismatchError(f"vector length {len(vec)} != catalog size {len(catalog)}")
    return vec.astype(np.uint8)


@dataclass(frozen=True)
class LabeledSample:
    vector: np.ndarray
    label: Label
    provenance: Provenance
    sample_id: str


@dataclass
class Corpus:
    """
    Column-store of labeled samples

    X is (n, m) uint8, labels is (n,) int8; provenance and sample_ids are
    parallel lists. Operations return new Corpus objects.
    """
    X: np.ndarray
    labels: np.ndarray
    provenance: List[Provenance]
    sample_ids: List[str]
    _id_index: Dict[str, int] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.labels), -1)
        self.provenance = list(self.provenance)
        self.sample_ids = list(self.sample_ids)
        n = len(self.sample_ids)
        if not (self.X.shape[0] == len(self.labels) == len(self.provenance) == n):
            raise ValidationError("corpus columns have different lengths")
        if len(set(self.sample_ids)) != n:
            raise ValidationError("sample ids must be unique within a corpus")
        if n and not np.isin(self.labels, (0, 1)).all():
            raise ValidationError("labels must be 0 or 1")
        self._id_index = {sid: i for i, sid in enumerate(self.sample_ids)}

    @classmethod
    def empty(cls, dimension: int) -> "Corpus":
        return cls(np.zeros((0, dimension), dtype=np.uint8), np.zeros(0, dtype=np.int8), [], [])

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample], dimension: Optional[int] = None) -> "Corpus":
        if not samples:
            if dimension is None:
                raise ValidationError("dimension required for an empty corpus")
            return cls.empty(dimension)
        X = np.vstack([np.asarray(s.vector, dtype=np.uint8) for s in samples])
        return cls(X, [int(s.label) for s in samples], [s.provenance for s in samples],
                   [s.sample_id for s in samples])

    def __len__(self) -> int:
        return len(self.sample_ids)

    def __iter__(self) -> Iterator[LabeledSample]:
        for i in range(len(self)):
            yield self.sample(i)

    def __eq__(self, other) -> bool:
        return (isinstance(other, Corpus)
                and self.sample_ids == other.sample_ids
                and self.provenance == other.provenance
                and np.array_equal(self.labels, other.labels)
                and self.X.shape == other.X.shape
                and np.array_equal(self.X, other.X))

    @property
    def dimension(self) -> int:
        return self.X.shape[1]

    def sample(self, i: int) -> LabeledSample:
        return LabeledSample(self.X[i].copy(), Label(int(self.labels[i])), self.provenance[i], self.sample_ids[i])

    def position(self, sample_id: str) -> int:
        try:
            return self._id_index[sample_id]
        except KeyError:
            raise ValidationError(f"unknown sample id: {sample_id}") from None

    def has_id(self, sample_id: str) -> bool:
        return sample_id in self._id_index

    def subset(self, indices) -> "Corpus":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return Corpus(self.X[idx], self.labels[idx], [self.provenance[i] for i in idx],
                      [self.sample_ids[i] for i in idx])

    def where(self, mask: np.ndarray) -> "Corpus":
        return self.subset(np.flatnonzero(mask))

    def sorted_by_id(self) -> "Corpus":
        order = sorted(range(len(self)), key=self.sample_ids.__getitem__)
        return self.subset(order)

    def concat(self, other: "Corpus") -> "Corpus":
        if len(self) and len(other) and self.dimension != other.dimension:
            raise DimensionMismatchError("cannot concatenate corpora of different dimension")
        dim = self.dimension if len(self) or not len(other) else other.dimension
        return Corpus(np.vstack([self.X.reshape(-1, dim), other.X.reshape(-1, dim)]),
                      np.concatenate([self.labels, other.labels]),
                      self.provenance + other.provenance, self.sample_ids + other.sample_ids)

    def replace_rows(self, positions: Sequence[int], X_rows: np.ndarray,
                     labels: Sequence[int], provenance: Provenance) -> "Corpus":
        X = self.X.copy()
        y = self.labels.copy()
        prov = list(self.provenance)
        for pos, row, lab in zip(positions, X_rows, labels):
            X[pos] = row
            y[pos] = lab
            prov[pos] = provenance
        return Corpus(X, y, prov, list(self.sample_ids))

    def label_counts(self) -> Dict[str, int]:
        n_mal = int(self.labels.sum())
        return {"benign": len(self) - n_mal, "malicious": n_mal}

    def has_both_labels(self) -> bool:
        return len(self) > 0 and 0 < int(self.labels.sum()) < len(self)

    def provenance_mask(self, *kinds: Provenance) -> np.ndarray:
        wanted = set(kinds)
        return np.array([p in wanted for p in self.provenance], dtype=bool)

    def project(self, source: FeatureCatalog, target: FeatureCatalog) -> "Corpus":
        """Restrict columns to the features of a sub-catalog"""
        if self.dimension != len(source):
            raise DimensionMismatchError("corpus does not match the source catalog")
        cols = [source.index(f.name) for f in target]
        return Corpus(self.X[:, cols], self.labels.copy(), list(self.provenance), list(self.sample_ids))


# ============================================================================
# INFORMATION GAIN
# ============================================================================

def _label_entropy(labels: np.ndarray) -> float:
    n_mal = int(labels.sum())
    return float(entropy([len(labels) - n_mal, n_mal], base=2))


def information_gain_all(X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Shannon IG (bits) of every column of X with respect to binary labels"""
    X = np.asarray(X, dtype=np.int64)
    y = np.asarray(labels, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValidationError("information gain needs a nonempty corpus")

    h_y = _label_entropy(y)
    on = X.sum(axis=0)
    on_mal = X[y == 1].sum(axis=0)
    off = n - on
    off_mal = int(y.sum()) - on_mal

    with np.errstate(divide="ignore", invalid="ignore"):
        h_on = entropy(np.vstack([on - on_mal, on_mal]), base=2, axis=0)
        h_off = entropy(np.vstack([off - off_mal, off_mal]), base=2, axis=0)
    h_on = np.where(on > 0, h_on, 0.0)
    h_off = np.where(off > 0, h_off, 0.0)
    conditional = (on / n) * h_on + (off / n) * h_off
    return np.clip(h_y - conditional, 0.0, h_y)


def information_gain(corpus: Corpus, feature: int) -> float:
    """
    H(label) - H(label | feature bit), log base 2, 0*log0 = 0

    Args:
        corpus: Nonempty labeled corpus
        feature: Feature id

    Returns:
        Gain in bits, within [0, H(label)]
    """
    if len(corpus) == 0:
        raise ValidationError("information gain needs a nonempty corpus")
    if not 0 <= feature < corpus.dimension:
        raise ValidationError(f"feature id {feature} out of range 0..{corpus.dimension - 1}")
    return float(information_gain_all(corpus.X[:, [feature]], corpus.labels)[0])


def rank_features(corpus: Corpus, catalog: FeatureCatalog) -> List[Tuple[str, float]]:
    """Features by descending gain, ties by catalog order"""
    if corpus.dimension != len(catalog):
        raise DimensionMismatchError("corpus does not match catalog")
    gains = information_gain_all(corpus.X, corpus.labels)
    order = np.lexsort((np.arange(len(catalog)), -gains))
    return [(catalog[i].name, float(gains[i])) for i in order]


def select_top_features(corpus: Corpus, raw_catalog: FeatureCatalog, k: int,
                        pinned: Iterable[str] = ()) -> FeatureCatalog:
    """
    Keep every pinned feature, fill the rest by descending information gain

    Returns:
        Sub-catalog of exactly k features, in raw catalog order, reindexed
    """
    pinned = list(dict.fromkeys(pinned))
    if k > len(raw_catalog):
        raise ValidationError(f"k={k} exceeds raw catalog size {len(raw_catalog)}")
    if k < len(pinned):
        raise ValidationError(f"k={k} is smaller than the {len(pinned)} pinned features")
    for name in pinned:
        raw_catalog.index(name)

    chosen = set(pinned)
    for name, _gain in rank_features(corpus, raw_catalog):
        if len(chosen) >= k:
            break
        chosen.add(name)
    logger.info("selected %d of %d features (%d pinned)", k, len(raw_catalog), len(pinned))
    return raw_catalog.subset(chosen)


# ============================================================================
# BIT PACKING (shared by corpus files and model envelopes)
# ============================================================================

def pack_bits(vector: np.ndarray) -> str:
    """base64 of numpy.packbits, big bit order"""
    return base64.b64encode(np.packbits(np.asarray(vector, dtype=np.uint8), bitorder="big").tobytes()).decode("ascii")


def unpack_bits(text: str, dimension: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(text.encode("ascii"), validate=True), dtype=np.uint8)
    if len(raw) != (dimension + 7) // 8:
        raise ValidationError(f"bitset holds {len(raw) * 8} bits, expected {dimension}")
    return np.unpackbits(raw, count=dimension, bitorder="big").astype(np.uint8)
