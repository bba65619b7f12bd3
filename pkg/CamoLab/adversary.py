#!/usr/bin/env python3
"""
Adversary: bounded gradient-guided crafting and training-set poisoning

ATTACKER PROFILES:
- weak:          c_f = 0.33, ceil(0.33 * n_syntax) syntax features drawn at
                 random from the strong profile's subset; also injects
                 round(c_f * fraction * |train|) random-feature samples
                 labeled Benign
- strong:        c_f = 0.67, the first ceil(0.67 * n_syntax) syntax features
                 in catalog order (the widely documented part of the vocabulary)
- sophisticated: c_f = 1.0, every syntax feature

CRAFTING LOOP (per sample):
- stop as soon as the victim predicts Benign, or after loop_bound flips;
  poisoning keeps flipping past the victim's boundary up to loop_bound
- candidates: add a benign-indicative feature that is 0, or remove a
  malicious-indicative feature that is 1, inside the modifiable mask and
  passing the sample's c_f gate
- take the candidate with the largest positive gain toward class 0
  (ties go to the lowest feature id); no positive gain ends the loop
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

import config
from classifiers import TrainedModel
from errors import DimensionMismatchError, ValidationError
from feature_catalog import Corpus, FeatureCatalog, FeatureKind, Label, Provenance
from surrogate import LogisticSurrogate, gradient_wrt_input

logger = logging.getLogger(__name__)

ADD = 1
REMOVE = -1


# ============================================================================
# PROFILES
# ============================================================================

@dataclass(frozen=True, eq=False)
class AttackerProfile:
    name: str
    c_f: float
    modifiable: np.ndarray
    addable: np.ndarray
    removable: np.ndarray
    loop_bound: int = config.LOOP_BOUND
    seed: int = 0

    @property
    def modifiable_ids(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.modifiable)]

    def describe(self) -> Dict:
        return {"name": self.name, "c_f": self.c_f, "loop_bound": self.loop_bound, "seed": self.seed,
                "modifiable_count": int(self.modifiable.sum())}


def make_attacker_profile(name: str, catalog: FeatureCatalog, seed: int = 0,
                          loop_bound: int = config.LOOP_BOUND,
                          kinds: Optional[Iterable[FeatureKind]] = None,
                          c_f: Optional[float] = None) -> AttackerProfile:
    """
    Build one of the three attacker profiles

    Args:
        name: weak | strong | sophisticated
        catalog: Feature vocabulary (only syntax features become modifiable)
        seed: Draws the weak mask and every crafting gate
        loop_bound: Max flips per sample
        kinds: Optionally restrict the mask to these syntax kinds
        c_f: Optional override of the profile's aggressiveness
    """
    key = name.lower()
    if key not in config.PROFILE_CF:
        raise ValidationError(f"unknown attacker profile '{name}' (weak, strong, sophisticated)")
    if loop_bound < 0:
        raise ValidationError("loop_bound must be nonnegative")
    cf = config.PROFILE_CF[key] if c_f is None else float(c_f)
    if not 0.0 <= cf <= 1.0:
        raise ValidationError(f"c_f must lie in [0, 1], got {cf}")

    syntax_ids = np.flatnonzero(catalog.syntax_mask)
    n_syntax = len(syntax_ids)
    public_ids = syntax_ids[:math.ceil(config.PROFILE_CF["strong"] * n_syntax)]
    if key == "weak":
        size = math.ceil(config.PROFILE_CF["weak"] * n_syntax)
        chosen = np.random.default_rng(seed).choice(public_ids, size=size, replace=False)
    elif key == "strong":
        chosen = public_ids
    else:
        chosen = syntax_ids

    modifiable = np.zeros(len(catalog), dtype=bool)
    modifiable[chosen] = True
    if kinds is not None:
        kind_mask = np.zeros(len(catalog), dtype=bool)
        for kind in kinds:
            if not kind.is_syntax:
                raise ValidationError("sequence features are never modifiable")
            kind_mask |= catalog.kind_mask(kind)
        modifiable &= kind_mask

    return AttackerProfile(key, cf, modifiable, modifiable & catalog.benign_mask,
                           modifiable & catalog.malicious_mask, loop_bound, seed)


def perturbation_bounds(x, j: int, c_f: float) -> Tuple[float, float]:
    """
    Perturbation envelope of feature j: (c_f * (0 - x_j), c_f * (1 - x_j))

    A flip in direction d is admissible when it stays inside the envelope;
    on binary features that is realized by a Bernoulli gate of probability c_f.
    """
    if not 0.0 <= c_f <= 1.0:
        raise ValidationError(f"c_f must lie in [0, 1], got {c_f}")
    xj = int(np.asarray(x)[j])
    if xj not in (0, 1):
        raise ValidationError("feature vector must be binary")
    return (c_f * (0 - xj), c_f * (1 - xj))


def _key_entropy(sample_key: str) -> int:
    return int(hashlib.sha256(sample_key.encode("utf-8")).hexdigest()[:16], 16)


def admissibility_gate(profile: AttackerProfile, sample_key: str, dimension: int) -> np.ndarray:
    """Per (sample, feature) Bernoulli(c_f) draws, fixed by the profile seed and the sample key"""
    rng = np.random.default_rng(np.random.SeedSequence([profile.seed, _key_entropy(sample_key)]))
    return rng.random(dimension) < profile.c_f


# ============================================================================
# CRAFTING
# ============================================================================

@dataclass
class CraftResult:
    original: np.ndarray
    crafted: np.ndarray
    flips: List[Tuple[int, int]] = field(default_factory=list)
    success: bool = False
    sample_id: str = ""

    def to_dict(self) -> Dict:
        return {"sample_id": self.sample_id, "success": self.success,
                "flips": [[j, d] for j, d in self.flips]}


def craft_batch(X, sample_keys: Sequence[str], surrogate: LogisticSurrogate,
                victim: TrainedModel, profile: AttackerProfile,
                stop_on_evasion: bool = True) -> List[CraftResult]:
    """
    Run the crafting loop for many samples at once

    Rows are independent: each row's result equals a single-sample run with
    the same key. With stop_on_evasion=False a row keeps its full loop_bound
    budget (or stops when no candidate has positive gain) even after the
    victim calls it Benign.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=np.uint8))
    n, m = X0.shape
    if len(sample_keys) != n:
        raise ValidationError("one sample key per row is required")
    for model in (surrogate, victim):
        if model.dimension != m:
            raise DimensionMismatchError(f"{model.family} expects {model.dimension} features, samples have {m}")
    if len(profile.modifiable) != m:
        raise DimensionMismatchError("attacker profile does not match the sample dimension")

    crafted = X0.copy()
    flips: List[List[Tuple[int, int]]] = [[] for _ in range(n)]
    if n == 0:
        return []
    gates = np.vstack([admissibility_gate(profile, key, m) for key in sample_keys])
    active = np.ones(n, dtype=bool)

    for step in range(profile.loop_bound + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        if stop_on_evasion:
            evaded = victim.predict(crafted[idx]) == 0
            active[idx[evaded]] = False
            idx = idx[~evaded]
        if step == profile.loop_bound or idx.size == 0:
            break

        current = crafted[idx]
        grad = gradient_wrt_input(surrogate, current, 0)
        grad = np.atleast_2d(grad)
        can_add = (current == 0) & profile.addable & gates[idx]
        can_remove = (current == 1) & profile.removable & gates[idx]
        gain = np.full(grad.shape, -np.inf)
        gain[can_add] = grad[can_add]
        gain[can_remove] = -grad[can_remove]

        best = gain.argmax(axis=1)
        best_gain = gain[np.arange(len(idx)), best]
        stuck = ~(best_gain > 0)
        active[idx[stuck]] = False

        for row, j in zip(idx[~stuck], best[~stuck]):
            direction = ADD if crafted[row, j] == 0 else REMOVE
            crafted[row, j] = 1 - crafted[row, j]
            flips[row].append((int(j), direction))

    success = victim.predict(crafted) == 0
    return [CraftResult(X0[i].copy(), crafted[i].copy(), flips[i], bool(success[i]), sample_keys[i])
            for i in range(n)]


def craft_adversarial(x, surrogate: LogisticSurrogate, victim: TrainedModel,
                      profile: AttackerProfile, sample_key: str = "") -> CraftResult:
    """
    Greedy gradient crafting of one malicious vector

    Args:
        x: Malicious feature vector
        surrogate: Gradient source
        victim: Model whose Benign verdict counts as success
        profile: Attacker profile
        sample_key: Identity used to draw the c_f gates (the sample id)

    Returns:
        CraftResult
    """
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValidationError("craft_adversarial expects a single vector")
    return craft_batch(x[None, :], [sample_key], surrogate, victim, profile)[0]


# ============================================================================
# POISONING
# ============================================================================

@dataclass
class PoisonLog:
    profile: Dict
    fraction: float
    crafted_label: int
    results: List[CraftResult] = field(default_factory=list)
    fake_ids: List[str] = field(default_factory=list)

    @property
    def success_rate(self) -> float:
        return float(np.mean([r.success for r in self.results])) if self.results else 0.0

    def to_dict(self) -> Dict:
        return {**self.profile, "fraction": self.fraction, "crafted_label": self.crafted_label,
                "crafted": len(self.results), "fake_samples": len(self.fake_ids),
                "success_rate": round(self.success_rate, 4),
                "flip_logs": [r.to_dict() for r in self.results]}


def _pick_malicious(train: Corpus, fraction: float, seed: int) -> List[int]:
    positions = sorted(np.flatnonzero(train.labels == 1), key=lambda i: train.sample_ids[i])
    count = int(round(fraction * len(positions)))
    if fraction > 0 and count < 1:
        raise ValidationError(f"fraction {fraction} selects no malicious sample out of {len(positions)}")
    if count >= len(positions):
        return positions
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    chosen = rng.choice(len(positions), size=count, replace=False)
    return sorted((positions[i] for i in chosen), key=lambda i: train.sample_ids[i])


def poison_corpus_with_log(train: Corpus, profile: AttackerProfile, fraction: float,
                           surrogate: LogisticSurrogate, victim: TrainedModel,
                           crafted_label: Label = Label.MALICIOUS) -> Tuple[Corpus, PoisonLog]:
    """Poison a training corpus and keep the per-sample flip logs"""
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"fraction must lie in [0, 1], got {fraction}")
    log = PoisonLog(profile.describe(), fraction, int(crafted_label))
    if fraction == 0.0:
        return train, log

    positions = _pick_malicious(train, fraction, profile.seed)
    results = craft_batch(train.X[positions], [train.sample_ids[p] for p in positions],
                          surrogate, victim, profile, stop_on_evasion=False)
    poisoned = train.replace_rows(positions, np.array([r.crafted for r in results]),
                                  [int(crafted_label)] * len(positions), Provenance.CRAFTED)
    log.results = results

    if profile.name == "weak":
        n_fake = int(round(profile.c_f * fraction * len(train)))
        rng = np.random.default_rng(np.random.SeedSequence([profile.seed, 2]))
        bits = ((rng.random((n_fake, train.dimension)) < 0.5) & profile.modifiable).astype(np.uint8)
        fake_ids = [f"fake-{i:06d}" for i in range(n_fake)]
        fakes = Corpus(bits, np.zeros(n_fake, dtype=np.int8), [Provenance.CRAFTED] * n_fake, fake_ids)
        poisoned = poisoned.concat(fakes)
        log.fake_ids = fake_ids

    logger.info("%s poisoning: %d crafted (success %.2f), %d fake samples",
                profile.name, len(results), log.success_rate, len(log.fake_ids))
    return poisoned, log


def poison_corpus(train: Corpus, profile: AttackerProfile, fraction: float,
                  surrogate: LogisticSurrogate, victim: TrainedModel,
                  crafted_label: Label = Label.MALICIOUS) -> Corpus:
    """
    Replace a `fraction` share of malicious training samples by crafted
    variants (provenance Crafted, label `crafted_label`), each spending the
    full flip budget; the weak profile also appends
    round(c_f * fraction * |train|) random samples labeled Benign.
    """
    return poison_corpus_with_log(train, profile, fraction, surrogate, victim, crafted_label)[0]


def evade_corpus(test: Corpus, surrogate: LogisticSurrogate, victim: TrainedModel,
                 profile: AttackerProfile) -> Tuple[Corpus, List[CraftResult]]:
    """Test-time evasion: craft every malicious test sample, labels unchanged"""
    positions = [int(i) for i in np.flatnonzero(test.labels == 1)]
    if not positions:
        return test, []
    results = craft_batch(test.X[positions], [test.sample_ids[p] for p in positions],
                          surrogate, victim, profile)
    evaded = test.replace_rows(positions, np.array([r.crafted for r in results]),
                               [1] * len(positions), Provenance.CRAFTED)
    return evaded, results
