#!/usr/bin/env python3
"""
Self-adaptive learning pipeline and experiment sweeps

ONE ROUND:
1. train the classifier on the current training pool, evaluate on test (pre)
2. anchors + similarity bands from the trusted (Original) training subset
3. band-filter predicted-benign training samples -> relabel Malicious
4. band-filter predicted-benign test samples -> append as Relabeled training
   samples (duplicates by sample_id skipped)
5. retrain; post = retrained classifier OR detector verdict on test

EXPERIMENTS:
- attack:        Conventional / Without AD / Within AD rows per classifier x attacker
- imbalance:     malicious:benign ratios, 10-fold stratified cross-validation
- feature_count: 564-feature raw space vs the 195 selected by information gain
- crafted_size:  accuracy vs poison fraction, Without AD and Within AD
- kind_impact:   sophisticated attack restricted to one syntax kind at a time
"""

import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold

import config
from adversary import evade_corpus, make_attacker_profile, poison_corpus_with_log
from camouflage_detector import (DetectorConfig, calibrate_thresholds, document_frequency_weights,
                                 filter_candidates, relabel, select_anchor_sets, trusted_pool)
from classifiers import (CLASSIFIER_NAMES, EvalReport, TrainedModel, evaluate, evaluate_predictions,
                         train_classifier)
from corpus import GeneratorSpec, generate_corpus, split_corpus
from errors import DegenerateTrainingSetError, ParseError, ValidationError
from feature_catalog import (Corpus, FeatureCatalog, FeatureDef, FeatureKind, Indicativeness, Label,
                             Provenance, load_catalog, select_top_features)
from surrogate import SurrogateHyper, train_surrogate
from utils import banner, ok, saved, stat, warn
from utils.atomic_io import atomic_write_text, write_csv
from utils.workers import map_ordered, resolve_workers

logger = logging.getLogger(__name__)

CONVENTIONAL = "Conventional"
WITHOUT_AD = "Without AD"
WITHIN_AD = "Within AD"

EXPERIMENT_KINDS = ("attack", "imbalance", "feature_count", "crafted_size", "kind_impact")

HYPER_KEYS = {
    "linear_svm": ("C", "epochs", "batch_size"),
    "knn": ("k",),
    "forest": ("n_trees", "max_depth", "features_per_split"),
}

THREAT_NONE = "none"
THREAT_POISON_EVADE = "poison+evade"
THREAT_POISON_ONLY = "poison-only"

ATTACK_COLUMNS = ["cell", "classifier", "attacker", "setting", "threat", "fraction", "kinds", "seeds",
                  "fn_mean", "fn_sd", "fn_rate_mean", "accuracy_mean", "accuracy_sd", "candidates_mean"]


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass
class ClassifierConfig:
    family: str = "svm"
    hyper: Dict = field(default_factory=dict)

    def __post_init__(self):
        canonical = CLASSIFIER_NAMES.get(self.family.lower())
        if canonical is None:
            raise ValidationError(f"unknown classifier '{self.family}' (choose svm, knn or forest)")
        unknown = set(self.hyper) - set(HYPER_KEYS[canonical])
        if unknown:
            raise ValidationError(f"unknown {self.family} hyperparameters: {sorted(unknown)}")

    def train(self, corpus: Corpus, seed: int) -> TrainedModel:
        return train_classifier(self.family, corpus, seed=seed, **self.hyper)


@dataclass
class AttackSettings:
    loop_bound: int = config.LOOP_BOUND
    crafted_label: str = "benign"
    evade_test: bool = True
    surrogate_epochs: int = config.SURROGATE_EPOCHS
    surrogate_learning_rate: float = config.SURROGATE_LEARNING_RATE

    def __post_init__(self):
        if self.crafted_label not in ("benign", "malicious"):
            raise ValidationError(f"crafted_label must be benign or malicious, got '{self.crafted_label}'")
        if self.loop_bound < 0:
            raise ValidationError("loop_bound must be nonnegative")

    @property
    def label(self) -> Label:
        return Label.BENIGN if self.crafted_label == "benign" else Label.MALICIOUS

    @property
    def threat(self) -> str:
        """poison+evade crafts the malicious test samples too; poison-only leaves them clean"""
        return THREAT_POISON_EVADE if self.evade_test else THREAT_POISON_ONLY


@dataclass
class GridCell:
    index: int
    classifier: str
    profile: Optional[str]
    fraction: float
    ad: bool
    kinds: Optional[Tuple[str, ...]] = None

    @property
    def setting(self) -> str:
        if self.profile is None:
            return CONVENTIONAL
        return WITHIN_AD if self.ad else WITHOUT_AD

    @property
    def attacker(self) -> str:
        return self.profile or "none"


@dataclass
class ExperimentGrid:
    """
    Cells of an experiment

    Each (classifier, attacker, fraction, kinds) combination yields one cell
    per AD mode; `conventional` adds one unattacked, detector-off cell per
    classifier. Imbalance and feature-count runs read ratios / raw_size.
    """
    classifiers: Tuple[str, ...] = ("svm", "knn", "forest")
    profiles: Tuple[str, ...] = ("weak", "strong", "sophisticated")
    fractions: Tuple[float, ...] = (config.POISON_FRACTION,)
    ad: Tuple[bool, ...] = (False, True)
    conventional: bool = True
    kinds: Tuple[str, ...] = ()
    seeds: Tuple[int, ...] = config.SEEDS
    rounds: int = config.SAL_ROUNDS
    ratios: Tuple[str, ...] = tuple(f"{m}:{b}" for m, b in config.IMBALANCE_RATIOS)
    cv_folds: int = config.CV_FOLDS
    base_malicious: int = config.IMBALANCE_BASE_MALICIOUS
    raw_size: int = config.RAW_CATALOG_SIZE

    def __post_init__(self):
        self.classifiers = tuple(self.classifiers)
        self.profiles = tuple(p.lower() for p in self.profiles)
        self.fractions = tuple(float(f) for f in self.fractions)
        self.ad = tuple(bool(a) for a in self.ad)
        self.kinds = tuple(self.kinds)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.ratios = tuple(self.ratios)
        for name in self.classifiers:
            if name.lower() not in CLASSIFIER_NAMES:
                raise ValidationError(f"unknown classifier '{name}' in grid")
        for name in self.profiles:
            if name not in config.PROFILE_CF:
                raise ValidationError(f"unknown attacker profile '{name}' in grid")
        for fraction in self.fractions:
            if not 0.0 <= fraction <= 1.0:
                raise ValidationError(f"grid fraction {fraction} outside [0, 1]")
        syntax_codes = {k.value for k in FeatureKind if k.is_syntax}
        for code in self.kinds:
            if code not in syntax_codes:
                raise ValidationError(f"grid kind '{code}' is not a syntax kind (PERM, INT, HW, API)")
        if not self.seeds:
            raise ValidationError("grid needs at least one seed")
        if self.rounds < 1:
            raise ValidationError("rounds must be at least 1")
        for ratio in self.ratios:
            parse_ratio(ratio)
        if self.cv_folds < 2:
            raise ValidationError("cv_folds must be at least 2")

    def cells(self) -> List[GridCell]:
        """Every fully specified cell in deterministic order"""
        kind_sets = [(code,) for code in self.kinds] or [None]
        out: List[GridCell] = []
        for clf in self.classifiers:
            if self.conventional:
                out.append(GridCell(len(out), clf, None, 0.0, False))
            for profile in self.profiles:
                for fraction in self.fractions:
                    for kinds in kind_sets:
                        for ad in self.ad:
                            out.append(GridCell(len(out), clf, profile, fraction, ad, kinds))
        return out

    def to_dict(self) -> Dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out


@dataclass
class ExperimentConfig:
    kind: str = "attack"
    test_fraction: float = config.TEST_FRACTION
    corpus: Dict = field(default_factory=dict)
    classifiers: Dict[str, Dict] = field(default_factory=dict)
    attack: AttackSettings = field(default_factory=AttackSettings)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    grid: ExperimentGrid = field(default_factory=ExperimentGrid)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ValidationError(f"unknown experiment kind '{self.kind}' ({', '.join(EXPERIMENT_KINDS)})")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("test_fraction must lie strictly between 0 and 1")
        generator_keys = {f.name for f in fields(GeneratorSpec)} - {"catalog", "seed"}
        unknown = set(self.corpus) - generator_keys
        if unknown:
            raise ValidationError(f"unknown [corpus] keys: {sorted(unknown)}")
        for name, hyper in self.classifiers.items():
            ClassifierConfig(name, dict(hyper))
        self.classifiers = {CLASSIFIER_NAMES[name.lower()]: dict(hyper) for name, hyper in self.classifiers.items()}

    def generator_spec(self, catalog: FeatureCatalog, seed: int) -> GeneratorSpec:
        settings = dict(self.corpus)
        if "neutral_features" in settings:
            settings["neutral_features"] = tuple(settings["neutral_features"])
        return GeneratorSpec(catalog=catalog, seed=seed, **settings)

    def classifier_config(self, name: str) -> ClassifierConfig:
        family = CLASSIFIER_NAMES.get(name.lower(), name)
        return ClassifierConfig(name, dict(self.classifiers.get(family, {})))

    def to_dict(self) -> Dict:
        detector = asdict(self.detector)
        detector["metrics"] = list(self.detector.metrics)
        return {"kind": self.kind, "test_fraction": self.test_fraction, "corpus": dict(self.corpus),
                "classifier": {k: dict(v) for k, v in self.classifiers.items()},
                "attack": asdict(self.attack), "detector": detector, "grid": self.grid.to_dict()}


def _take(section: str, table: Dict, allowed: Sequence[str]) -> Dict:
    if not isinstance(table, dict):
        raise ValidationError(f"[{section}] must be a table")
    unknown = set(table) - set(allowed)
    if unknown:
        raise ValidationError(f"unknown [{section}] keys: {sorted(unknown)}")
    return dict(table)


def parse_experiment_config(doc: Dict) -> ExperimentConfig:
    """
    Build an ExperimentConfig from a parsed TOML document

    Sections: [experiment] [corpus] [classifier] [attack] [detector] [grid].
    Missing keys keep their defaults; unknown sections or keys are errors.
    """
    sections = ("experiment", "corpus", "classifier", "attack", "detector", "grid")
    unknown = set(doc) - set(sections)
    if unknown:
        raise ValidationError(f"unknown config sections: {sorted(unknown)}")

    experiment = _take("experiment", doc.get("experiment", {}), ("kind", "test_fraction"))
    attack = _take("attack", doc.get("attack", {}), [f.name for f in fields(AttackSettings)])
    detector = _take("detector", doc.get("detector", {}), [f.name for f in fields(DetectorConfig)])
    grid = _take("grid", doc.get("grid", {}), [f.name for f in fields(ExperimentGrid)])
    classifiers = _take("classifier", doc.get("classifier", {}), list(CLASSIFIER_NAMES))
    if "metrics" in detector:
        detector["metrics"] = tuple(detector["metrics"])
    try:
        return ExperimentConfig(corpus=dict(doc.get("corpus", {})), classifiers=classifiers,
                                attack=AttackSettings(**attack), detector=DetectorConfig(**detector),
                                grid=ExperimentGrid(**grid), **experiment)
    except TypeError as e:
        raise ValidationError(f"bad experiment config: {e}") from None


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ParseError(f"{path.name}: {e}") from None
    return parse_experiment_config(doc)


def parse_ratio(text: Union[str, Sequence[int]]) -> Tuple[int, int]:
    """'1:5' -> (1, 5), read as malicious:benign"""
    if isinstance(text, str):
        parts = text.split(":")
        if len(parts) != 2:
            raise ValidationError(f"ratio must look like '1:5', got '{text}'")
        try:
            malicious, benign = int(parts[0]), int(parts[1])
        except ValueError:
            raise ValidationError(f"ratio must hold integers, got '{text}'") from None
    else:
        malicious, benign = (int(v) for v in text)
    if malicious < 1:
        raise ValidationError(f"ratio {text} has zero malicious samples")
    if benign < 1:
        raise ValidationError(f"ratio {text} has zero benign samples")
    return malicious, benign


# ============================================================================
# SAL ROUND
# ============================================================================

@dataclass
class PipelineState:
    train: Corpus
    test: Corpus
    catalog: FeatureCatalog
    detector: DetectorConfig
    classifier: ClassifierConfig
    seed: int = 0
    round_index: int = 0


@dataclass
class RoundReport:
    round_index: int
    pre: EvalReport
    candidates: int
    relabeled: int
    appended: int
    post: EvalReport
    thresholds: Dict = field(default_factory=dict)
    seed: int = 0

    def to_dict(self) -> Dict:
        return {"round": self.round_index, "seed": self.seed, "candidates": self.candidates,
                "relabeled": self.relabeled, "appended": self.appended,
                "pre": self.pre.to_dict(), "post": self.post.to_dict(), "thresholds": self.thresholds}


def run_sal_round(state: PipelineState) -> Tuple[PipelineState, RoundReport]:
    """
    One train / detect / relabel / retrain pass

    The test corpus is never modified. With the detector disabled the state
    only advances its round counter and post equals pre.
    """
    if len(state.train) == 0 or len(state.test) == 0:
        raise ValidationError("SAL round needs nonempty train and test corpora")
    if not state.train.has_both_labels():
        raise DegenerateTrainingSetError()

    model = state.classifier.train(state.train, state.seed)
    pre = evaluate(model, state.test)
    next_index = state.round_index + 1
    if not state.detector.enabled:
        return replace(state, round_index=next_index), RoundReport(next_index, pre, 0, 0, 0, pre, {}, state.seed)

    pool = trusted_pool(state.train)
    weights = document_frequency_weights(pool, state.catalog)
    anchors = select_anchor_sets(model, pool, state.detector.anchor_count)
    thresholds = calibrate_thresholds(anchors, pool.where(pool.labels == 0), weights, state.detector)

    train_suspects = state.train.where(model.predict(state.train.X) == 0)
    train_candidates = filter_candidates(train_suspects, anchors, thresholds, weights)
    test_candidates = filter_candidates(state.test.where(model.predict(state.test.X) == 0),
                                        anchors, thresholds, weights)

    relabeled = sum(1 for c in train_candidates if state.train.labels[state.train.position(c.sample_id)] == 0)
    new_train = relabel(train_candidates, state.train)

    appended = 0
    if state.detector.append_detections:
        fresh = [c.sample_id for c in test_candidates if not new_train.has_id(c.sample_id)]
        if fresh:
            rows = state.test.subset([state.test.position(sid) for sid in fresh])
            new_train = new_train.concat(Corpus(rows.X, np.ones(len(fresh), dtype=np.int8),
                                                [Provenance.RELABELED] * len(fresh), fresh))
            appended = len(fresh)

    retrained = state.classifier.train(new_train, state.seed)
    flagged = np.isin(np.array(state.test.sample_ids, dtype=object),
                      np.array([c.sample_id for c in test_candidates], dtype=object))
    verdict = (retrained.predict(state.test.X).astype(bool) | flagged).astype(np.int8)
    post = evaluate_predictions(state.test.labels, verdict)

    logger.debug("round %d: %d train + %d test candidates, %d relabeled, %d appended",
                 next_index, len(train_candidates), len(test_candidates), relabeled, appended)
    report = RoundReport(next_index, pre, len(train_candidates) + len(test_candidates), relabeled, appended,
                         post, thresholds.to_dict(), state.seed)
    return replace(state, train=new_train, round_index=next_index), report


def run_sal(state: PipelineState, rounds: int = config.SAL_ROUNDS) -> Tuple[PipelineState, List[RoundReport]]:
    if rounds < 1:
        raise ValidationError("rounds must be at least 1")
    reports = []
    for _ in range(rounds):
        state, report = run_sal_round(state)
        reports.append(report)
    return state, reports


# ============================================================================
# ATTACK EXPERIMENT
# ============================================================================

@dataclass
class ExperimentResult:
    kind: str
    table: pd.DataFrame
    rounds: List[Dict] = field(default_factory=list)


def _attack_seed_run(cell: GridCell, experiment: ExperimentConfig, catalog: FeatureCatalog,
                     seed: int) -> Tuple[EvalReport, List[RoundReport]]:
    corpus = generate_corpus(experiment.generator_spec(catalog, seed))
    train, test = split_corpus(corpus, experiment.test_fraction, seed)
    classifier = experiment.classifier_config(cell.classifier)

    if cell.profile is not None:
        attack = experiment.attack
        kinds = [FeatureKind(code) for code in cell.kinds] if cell.kinds else None
        profile = make_attacker_profile(cell.profile, catalog, seed, attack.loop_bound, kinds=kinds)
        surrogate = train_surrogate(train, SurrogateHyper(attack.surrogate_epochs, attack.surrogate_learning_rate))
        victim = classifier.train(train, seed)
        train, _log = poison_corpus_with_log(train, profile, cell.fraction, surrogate, victim, attack.label)
        if attack.evade_test:
            test, _ = evade_corpus(test, surrogate, classifier.train(train, seed), profile)

    detector = replace(experiment.detector, enabled=cell.ad)
    state = PipelineState(train, test, catalog, detector, classifier, seed)
    _state, reports = run_sal(state, experiment.grid.rounds if cell.ad else 1)
    return reports[-1].post, reports


def run_attack_cell(cell: GridCell, experiment: ExperimentConfig, catalog: FeatureCatalog) -> Dict:
    """All seeds of one grid cell -> summary row plus per-round records"""
    finals, round_records = [], []
    threat = THREAT_NONE if cell.profile is None else experiment.attack.threat
    for seed in experiment.grid.seeds:
        final, reports = _attack_seed_run(cell, experiment, catalog, seed)
        finals.append((final, sum(r.candidates for r in reports)))
        for report in reports:
            round_records.append({"cell": cell.index, "classifier": cell.classifier, "attacker": cell.attacker,
                                  "setting": cell.setting, "threat": threat, "fraction": cell.fraction,
                                  **report.to_dict()})

    fn = np.array([r.fn for r, _ in finals], dtype=float)
    acc = np.array([r.accuracy for r, _ in finals])
    row = {"cell": cell.index, "classifier": cell.classifier, "attacker": cell.attacker,
           "setting": cell.setting, "threat": threat, "fraction": cell.fraction,
           "kinds": "|".join(cell.kinds) if cell.kinds else "all", "seeds": len(finals),
           "fn_mean": fn.mean(), "fn_sd": fn.std(), "fn_rate_mean": float(np.mean([r.fn_rate for r, _ in finals])),
           "accuracy_mean": acc.mean(), "accuracy_sd": acc.std(),
           "candidates_mean": float(np.mean([c for _, c in finals]))}
    return {"row": row, "rounds": round_records}


def partition_cells(cells: List[GridCell], partition_x: int = 1, partition_y: int = 1) -> List[GridCell]:
    """Every partition_y-th cell starting at position partition_x (1-based)"""
    if partition_y < 1:
        raise ValidationError(f"partition total must be >= 1, got {partition_y}")
    if not 1 <= partition_x <= partition_y:
        raise ValidationError(f"partition must be between 1 and {partition_y}, got {partition_x}")
    return cells[partition_x - 1::partition_y]


def run_attack_experiment(grid: ExperimentGrid, experiment: Optional[ExperimentConfig] = None,
                          catalog: Optional[FeatureCatalog] = None, workers: Optional[int] = None,
                          partition_x: int = 1, partition_y: int = 1,
                          show_progress: bool = False) -> ExperimentResult:
    """
    Run every cell of a grid (or one partition of it)

    Returns:
        ExperimentResult whose table has one row per cell with mean and sd
        of FN and accuracy over the grid seeds
    """
    experiment = replace(experiment or ExperimentConfig(), grid=grid)
    if catalog is None:
        catalog = load_catalog(config.CATALOG_FILE)
    cells = partition_cells(grid.cells(), partition_x, partition_y)
    if not cells:
        return ExperimentResult("attack", pd.DataFrame(columns=ATTACK_COLUMNS))

    outcomes = map_ordered(run_attack_cell, cells, workers=resolve_workers(workers), desc="cells",
                           show_progress=show_progress, experiment=experiment, catalog=catalog)
    table = pd.DataFrame([o["row"] for o in outcomes], columns=ATTACK_COLUMNS)
    rounds = [record for o in outcomes for record in o["rounds"]]
    return ExperimentResult("attack", table, rounds)


def run_crafted_size_sweep(fractions: Sequence[float], experiment: ExperimentConfig,
                           catalog: Optional[FeatureCatalog] = None, **kwargs) -> ExperimentResult:
    """Accuracy vs poison fraction, Without AD and Within AD"""
    grid = replace(experiment.grid, fractions=tuple(fractions), conventional=False, ad=(False, True))
    result = run_attack_experiment(grid, experiment, catalog, **kwargs)
    result.kind = "crafted_size"
    return result


def run_kind_impact(kinds: Sequence[str], experiment: ExperimentConfig,
                    catalog: Optional[FeatureCatalog] = None, **kwargs) -> ExperimentResult:
    """Sophisticated attack restricted to one syntax kind per cell, detector off"""
    grid = replace(experiment.grid, profiles=("sophisticated",), kinds=tuple(kinds), ad=(False,),
                   conventional=True)
    result = run_attack_experiment(grid, experiment, catalog, **kwargs)
    result.kind = "kind_impact"
    return result


# ============================================================================
# IMBALANCE SWEEP
# ============================================================================

IMBALANCE_COLUMNS = ["ratio", "n_malicious", "n_benign", "folds", "accuracy", "accuracy_sd", "fn_rate"]


def _imbalance_ratio(ratio: str, spec: GeneratorSpec, classifier: ClassifierConfig, folds: int,
                     base_malicious: int, seed: int) -> Dict:
    malicious, benign = parse_ratio(ratio)
    n_benign = int(round(base_malicious * benign / malicious))
    corpus = generate_corpus(replace(spec, n_malicious=base_malicious, n_benign=n_benign, seed=seed))
    try:
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
        splits = list(splitter.split(corpus.X, corpus.labels))
    except ValueError as e:
        raise ValidationError(f"cannot run {folds}-fold cross-validation at {ratio}: {e}") from None

    accuracies, fn_rates = [], []
    for train_idx, test_idx in splits:
        model = classifier.train(corpus.subset(train_idx), seed)
        report = evaluate(model, corpus.subset(test_idx))
        accuracies.append(report.accuracy)
        fn_rates.append(report.fn_rate)
    return {"ratio": f"{malicious}:{benign}", "n_malicious": base_malicious, "n_benign": n_benign,
            "folds": folds, "accuracy": float(np.mean(accuracies)), "accuracy_sd": float(np.std(accuracies)),
            "fn_rate": float(np.mean(fn_rates))}


def run_imbalance_sweep(ratios: Sequence[str], spec: GeneratorSpec,
                        classifier: Optional[ClassifierConfig] = None,
                        folds: int = config.CV_FOLDS, base_malicious: int = config.IMBALANCE_BASE_MALICIOUS,
                        seed: int = 0, workers: Optional[int] = None,
                        show_progress: bool = False) -> pd.DataFrame:
    """
    Mean k-fold accuracy per malicious:benign ratio

    Every ratio keeps base_malicious malicious samples and scales the benign
    count; per-sample seeds make the smaller corpora prefixes of the larger.
    """
    for ratio in ratios:
        parse_ratio(ratio)
    if not ratios:
        return pd.DataFrame(columns=IMBALANCE_COLUMNS)
    rows = map_ordered(_imbalance_ratio, list(ratios), workers=resolve_workers(workers), desc="ratios",
                       show_progress=show_progress, spec=spec, classifier=classifier or ClassifierConfig(),
                       folds=folds, base_malicious=base_malicious, seed=seed)
    return pd.DataFrame(rows, columns=IMBALANCE_COLUMNS)


# ============================================================================
# FEATURE COUNT
# ============================================================================

FEATURE_COUNT_COLUMNS = ["space", "n_features", "accuracy", "canonical_overlap"]


def build_raw_catalog(canonical: FeatureCatalog, size: int = config.RAW_CATALOG_SIZE) -> FeatureCatalog:
    """Canonical features followed by neutral API-call padding up to `size`"""
    if size < len(canonical):
        raise ValidationError(f"raw size {size} is smaller than the catalog ({len(canonical)})")
    padding = [FeatureDef(len(canonical) + i, f"NEUTRAL_{i:03d}", FeatureKind.API_CALL, Indicativeness.BENIGN)
               for i in range(size - len(canonical))]
    return FeatureCatalog(list(canonical) + padding)


def run_feature_count_experiment(canonical: FeatureCatalog, experiment: Optional[ExperimentConfig] = None,
                                 seed: int = 0) -> pd.DataFrame:
    """
    Held-out accuracy on the full raw space vs the information-gain top-k,
    k = len(canonical)
    """
    experiment = experiment or ExperimentConfig(kind="feature_count")
    raw = build_raw_catalog(canonical, experiment.grid.raw_size)
    neutral = tuple(f.name for f in raw if f.id >= len(canonical))
    spec = replace(experiment.generator_spec(raw, seed), neutral_features=neutral)
    train, test = split_corpus(generate_corpus(spec), experiment.test_fraction, seed)
    family = experiment.grid.classifiers[0] if experiment.grid.classifiers else "svm"
    classifier = experiment.classifier_config(family)

    full = evaluate(classifier.train(train, seed), test)
    selected = select_top_features(train, raw, len(canonical))
    reduced = evaluate(classifier.train(train.project(raw, selected), seed), test.project(raw, selected))
    overlap = sum(1 for f in selected if f.name in canonical)
    return pd.DataFrame([
        {"space": "raw", "n_features": len(raw), "accuracy": full.accuracy, "canonical_overlap": len(canonical)},
        {"space": "selected", "n_features": len(selected), "accuracy": reduced.accuracy, "canonical_overlap": overlap},
    ], columns=FEATURE_COUNT_COLUMNS)


# ============================================================================
# ORCHESTRATOR
# ============================================================================

class ExperimentOrchestrator:
    """Run a configured experiment and persist results.csv / rounds.jsonl"""

    def __init__(self, experiment: ExperimentConfig, catalog: FeatureCatalog, output_dir: Union[str, Path],
                 partition_x: int = 1, partition_y: int = 1, workers: Optional[int] = None,
                 show_progress: bool = True):
        """
        Args:
            experiment: Parsed experiment configuration
            catalog: Canonical feature catalog
            output_dir: Directory for result files
            partition_x: Which partition to run (1 to partition_y)
            partition_y: Total number of partitions
            workers: Process count, capped by CAMOLAB_THREADS
        """
        partition_cells([], partition_x, partition_y)
        self.experiment = experiment
        self.catalog = catalog
        self.output_dir = Path(output_dir)
        self.partition_x = partition_x
        self.partition_y = partition_y
        self.workers = resolve_workers(workers)
        self.show_progress = show_progress
        self.partition_suffix = f"_p{partition_x}_of_{partition_y}" if partition_y > 1 else ""

        if partition_y > 1:
            banner("PARTITION MODE", f"Processing partition {partition_x} of {partition_y}",
                   f"Pattern: every {partition_y}th cell starting from position {partition_x}")

    @property
    def results_path(self) -> Path:
        return self.output_dir / f"results{self.partition_suffix}.csv"

    @property
    def rounds_path(self) -> Path:
        return self.output_dir / f"rounds{self.partition_suffix}.jsonl"

    def run(self) -> ExperimentResult:
        exp = self.experiment
        grid = exp.grid
        banner(f"EXPERIMENT: {exp.kind.upper()}",
               f"Classifiers: {', '.join(grid.classifiers)}",
               f"Seeds: {', '.join(str(s) for s in grid.seeds)}",
               f"Workers: {self.workers}")
        common = dict(workers=self.workers, partition_x=self.partition_x, partition_y=self.partition_y,
                      show_progress=self.show_progress)

        if exp.kind == "attack":
            return run_attack_experiment(grid, exp, self.catalog, **common)
        if exp.kind == "crafted_size":
            return run_crafted_size_sweep(grid.fractions, exp, self.catalog, **common)
        if exp.kind == "kind_impact":
            kinds = grid.kinds or tuple(k.value for k in FeatureKind if k.is_syntax)
            return run_kind_impact(kinds, exp, self.catalog, **common)

        if self.partition_y > 1:
            warn(f"{exp.kind} runs are not partitioned; partition {self.partition_x} runs everything")
        if exp.kind == "imbalance":
            family = grid.classifiers[0] if grid.classifiers else "svm"
            tables = [run_imbalance_sweep(grid.ratios, exp.generator_spec(self.catalog, seed),
                                          exp.classifier_config(family), grid.cv_folds, grid.base_malicious,
                                          seed, self.workers, self.show_progress).assign(seed=seed)
                      for seed in grid.seeds]
            return ExperimentResult("imbalance", pd.concat(tables, ignore_index=True))
        tables = [run_feature_count_experiment(self.catalog, exp, seed).assign(seed=seed) for seed in grid.seeds]
        return ExperimentResult("feature_count", pd.concat(tables, ignore_index=True))

    def save(self, result: ExperimentResult) -> List[Path]:
        paths = [write_csv(result.table, self.results_path, config.FLOAT_FORMAT)]
        saved(f"Results: {self.results_path}")
        if result.rounds:
            lines = [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in result.rounds]
            paths.append(atomic_write_text(self.rounds_path, "\n".join(lines) + "\n"))
            saved(f"Rounds: {self.rounds_path}")
        return paths

    def print_summary(self, result: ExperimentResult):
        banner(f"{result.kind.upper()} SUMMARY")
        if result.table.empty:
            warn("No cells in this run")
            return
        if "setting" in result.table:
            for _, row in result.table.iterrows():
                stat(f"{row['classifier']:<7} {row['attacker']:<14} {row['setting']:<13} "
                     f"FN {row['fn_mean']:.1f}±{row['fn_sd']:.1f}  acc {row['accuracy_mean']:.4f}")
        else:
            for _, row in result.table.iterrows():
                stat(", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        ok(f"{len(result.table)} row(s)")
