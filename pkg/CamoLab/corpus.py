#!/usr/bin/env python3
"""
Corpus generation, ingestion, serialization and splitting

CORPUS FILE (corpus.jsonl):
- line 1: {"catalog_sha256": ..., "n": N, "spec_sha256": ... or null}
- then N records: {"bits": base64(packbits, big bit order), "id": ...,
  "label": 0|1, "provenance": "original"|"crafted"|"relabeled"}
- canonical JSON: sorted keys, compact separators, one object per line
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from sklearn.model_selection import train_test_split

import config
from app_parsers import extract_app_directory
from errors import CatalogDriftError, ParseError, ValidationError
from feature_catalog import (Corpus, FeatureCatalog, Label, Provenance, pack_bits,
                             unpack_bits)
from utils.atomic_io import atomic_write_text
from utils.workers import map_ordered, resolve_workers

logger = logging.getLogger(__name__)

LABEL_DIRS = {"benign": Label.BENIGN, "malicious": Label.MALICIOUS}


# ============================================================================
# GENERATOR
# ============================================================================

@dataclass
class GeneratorSpec:
    """
    Bernoulli mixture parameters

    Benign-indicative features fire with p_b on benign samples and q_b on
    malicious ones; malicious-indicative with p_m on malicious and q_m on
    benign; sequence features with p_seq / q_seq. Every bit is then flipped
    with probability `noise`. Neutral features fire at neutral_rate in both
    classes.
    """
    catalog: FeatureCatalog = field(repr=False, compare=False, default=None)
    n_benign: int = config.GEN_N_BENIGN
    n_malicious: int = config.GEN_N_MALICIOUS
    p_b: float = config.GEN_P_BENIGN
    q_b: float = config.GEN_Q_BENIGN
    p_m: float = config.GEN_P_MALICIOUS
    q_m: float = config.GEN_Q_MALICIOUS
    p_seq: float = config.GEN_P_SEQUENCE
    q_seq: float = config.GEN_Q_SEQUENCE
    noise: float = config.GEN_NOISE
    seed: int = 0
    neutral_features: Tuple[str, ...] = ()
    neutral_rate: float = config.GEN_NEUTRAL_RATE

    RATE_FIELDS = ("p_b", "q_b", "p_m", "q_m", "p_seq", "q_seq", "noise", "neutral_rate")

    def validate(self):
        if self.catalog is None:
            raise ValidationError("generator spec needs a catalog")
        for name in self.RATE_FIELDS:
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValidationError(f"rate {name}={value} outside [0, 1]")
        if self.n_malicious < 1:
            raise ValidationError("n_malicious must be at least 1")
        if self.n_benign < 0:
            raise ValidationError("n_benign must be nonnegative")
        for name in self.neutral_features:
            self.catalog.index(name)

    def to_dict(self) -> Dict:
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "catalog"}
        out["neutral_features"] = list(self.neutral_features)
        out["catalog_sha256"] = self.catalog.sha256 if self.catalog is not None else None
        return out

    @property
    def sha256(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def class_rates(self) -> Tuple[np.ndarray, np.ndarray]:
        """Per-feature firing rates for (benign, malicious) samples"""
        cat = self.catalog
        benign = np.zeros(len(cat))
        malicious = np.zeros(len(cat))
        benign[cat.benign_mask], malicious[cat.benign_mask] = self.p_b, self.q_b
        benign[cat.malicious_mask], malicious[cat.malicious_mask] = self.q_m, self.p_m
        benign[cat.sequence_mask], malicious[cat.sequence_mask] = self.q_seq, self.p_seq
        for name in self.neutral_features:
            j = cat.index(name)
            benign[j] = malicious[j] = self.neutral_rate
        return benign, malicious


def _generate_row(seed: int, class_code: int, index: int, rates: np.ndarray, noise: float) -> np.ndarray:
    rng = np.random.default_rng([seed, class_code, index])
    row = rng.random(len(rates)) < rates
    flips = rng.random(len(rates)) < noise
    return (row ^ flips).astype(np.uint8)


def generate_corpus(spec: GeneratorSpec) -> Corpus:
    """
    Seeded synthetic corpus; each sample draws from its own derived seed, so
    growing n_benign keeps the earlier samples unchanged

    Args:
        spec: GeneratorSpec (carries the catalog)

    Returns:
        Corpus of n_benign benign then n_malicious malicious samples
    """
    spec.validate()
    benign_rates, malicious_rates = spec.class_rates()
    m = len(spec.catalog)
    rows, labels, ids = [], [], []
    for label, count, rates, prefix in ((0, spec.n_benign, benign_rates, "ben"),
                                        (1, spec.n_malicious, malicious_rates, "mal")):
        for i in range(count):
            rows.append(_generate_row(spec.seed, label, i, rates, spec.noise))
            labels.append(label)
            ids.append(f"{prefix}-{i:06d}")
    X = np.vstack(rows) if rows else np.zeros((0, m), dtype=np.uint8)
    logger.debug("generated %d benign + %d malicious samples", spec.n_benign, spec.n_malicious)
    return Corpus(X, labels, [Provenance.ORIGINAL] * len(ids), ids)


# ============================================================================
# SERIALIZATION
# ============================================================================

def _canonical(obj: Dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def corpus_to_text(corpus: Corpus, catalog: FeatureCatalog, spec_sha256: Optional[str] = None) -> str:
    if len(corpus) and corpus.dimension != len(catalog):
        raise ValidationError("corpus does not match catalog")
    lines = [_canonical({"catalog_sha256": catalog.sha256, "n": len(corpus), "spec_sha256": spec_sha256})]
    for i in range(len(corpus)):
        lines.append(_canonical({"bits": pack_bits(corpus.X[i]), "id": corpus.sample_ids[i],
                                 "label": int(corpus.labels[i]), "provenance": corpus.provenance[i].value}))
    return "\n".join(lines) + "\n"


def save_corpus(corpus: Corpus, path: Union[str, Path], catalog: FeatureCatalog,
                spec_sha256: Optional[str] = None) -> Path:
    """Write a corpus file atomically"""
    return atomic_write_text(path, corpus_to_text(corpus, catalog, spec_sha256))


def read_header(path: Union[str, Path]) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
    return _parse_header(first)


def _parse_header(line: str) -> Dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError:
        raise ParseError("corpus header is not JSON", 1) from None
    if not isinstance(header, dict) or not {"catalog_sha256", "n", "spec_sha256"} <= set(header):
        raise ParseError("corpus header lacks catalog_sha256 / spec_sha256 / n", 1)
    return header


def load_corpus(path: Union[str, Path], catalog: FeatureCatalog) -> Corpus:
    """
    Read a corpus file and check it against the catalog

    Raises:
        CatalogDriftError: header hash differs from the catalog
        ValidationError: truncated or over-long file (names the record index)
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"corpus file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError("corpus file is empty", 1)
    header = _parse_header(lines[0])
    if header["catalog_sha256"] != catalog.sha256:
        raise CatalogDriftError(f"catalog drift: corpus was written for catalog {header['catalog_sha256'][:12]}, "
                                f"loaded catalog is {catalog.sha256[:12]}")

    n = int(header["n"])
    records = [line for line in lines[1:] if line.strip()]
    if len(records) < n:
        raise ValidationError(f"truncated corpus: expected {n} records, record {len(records)} is missing")
    if len(records) > n:
        raise ValidationError(f"corpus declares {n} records but holds {len(records)}")

    m = len(catalog)
    X = np.zeros((n, m), dtype=np.uint8)
    labels, provenance, ids = [], [], []
    for index, line in enumerate(records):
        try:
            record = json.loads(line)
            X[index] = unpack_bits(record["bits"], m)
            labels.append(int(record["label"]))
            provenance.append(Provenance(record["provenance"]))
            ids.append(str(record["id"]))
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise ParseError(f"bad corpus record {index}: {e}", index + 2) from None
    return Corpus(X, labels, provenance, ids)


# ============================================================================
# SPLITTING
# ============================================================================

def split_corpus(corpus: Corpus, test_fraction: float = config.TEST_FRACTION,
                 seed: int = 0) -> Tuple[Corpus, Corpus]:
    """
    Stratified, seeded train/test partition

    Returns:
        (train, test), each keeping the corpus's original sample order
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must lie strictly between 0 and 1, got {test_fraction}")
    counts = corpus.label_counts()
    small = [name for name, count in counts.items() if count < 2]
    if small:
        raise ValidationError(f"class(es) {small} have fewer than 2 samples; cannot stratify")
    try:
        train_idx, test_idx = train_test_split(np.arange(len(corpus)), test_size=test_fraction,
                                               stratify=corpus.labels, random_state=seed)
    except ValueError as e:
        raise ValidationError(f"cannot split corpus: {e}") from None
    return corpus.subset(np.sort(train_idx)), corpus.subset(np.sort(test_idx))


# ============================================================================
# APP DIRECTORY INGESTION
# ============================================================================

def _app_directories(root: Path, label: Optional[Label]) -> List[Tuple[Path, Label]]:
    labeled = [(root / name, lab) for name, lab in LABEL_DIRS.items() if (root / name).is_dir()]
    if labeled:
        return [(app, lab) for folder, lab in labeled for app in sorted(p for p in folder.iterdir() if p.is_dir())]
    if label is None:
        raise ValidationError(f"{root} has no benign/ or malicious/ folder; pass an explicit label")
    return [(app, label) for app in sorted(p for p in root.iterdir() if p.is_dir())]


def ingest_app_directory(root: Union[str, Path], catalog: FeatureCatalog, label: Optional[Label] = None,
                         workers: Optional[int] = None,
                         patterns: Optional[Dict[str, Tuple[str, ...]]] = None) -> Corpus:
    """
    Extract every app package under root into a corpus

    Layout: root/benign/<app>/ and root/malicious/<app>/, or a flat root of
    app directories with an explicit label. Sample ids are the app paths
    relative to root.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"app directory not found: {root}")
    apps = _app_directories(root, label)
    if not apps:
        return Corpus.empty(len(catalog))

    results = map_ordered(extract_app_directory, [str(path) for path, _ in apps],
                          workers=resolve_workers(workers), catalog=catalog, patterns=patterns)
    X = np.vstack([vector for _, vector in results])
    ids = [path.relative_to(root).as_posix() for path, _ in apps]
    labels = [int(lab) for _, lab in apps]
    logger.info("ingested %d apps from %s", len(ids), root)
    return Corpus(X, labels, [Provenance.ORIGINAL] * len(ids), ids)
