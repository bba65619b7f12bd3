"""Self-adaptive rounds, experiment configuration, grids and sweeps"""

from dataclasses import replace

import numpy as np
import pandas as pd
import pytest

from camouflage_detector import DetectorConfig
from corpus import GeneratorSpec
from errors import DegenerateTrainingSetError, ParseError, ValidationError
from feature_catalog import Corpus, Provenance
from sal_pipeline import (ATTACK_COLUMNS, CONVENTIONAL, IMBALANCE_COLUMNS, THREAT_NONE, THREAT_POISON_EVADE,
                          THREAT_POISON_ONLY, WITHIN_AD, WITHOUT_AD, AttackSettings, ClassifierConfig,
                          ExperimentConfig, ExperimentGrid, ExperimentOrchestrator, PipelineState,
                          build_raw_catalog, load_experiment_config, parse_experiment_config, parse_ratio,
                          partition_cells, run_attack_experiment, run_crafted_size_sweep, run_imbalance_sweep, run_kind_impact, run_sal, run_sal_round)

FAST_SVM = ClassifierConfig("svm", {"epochs": 15})


def _state(split, catalog, **detector):
    train, test = split
    return PipelineState(train, test, catalog, DetectorConfig(anchor_count=8, **detector), FAST_SVM, seed=1)


def _tiny_experiment(**grid):
    return ExperimentConfig(
        corpus={"n_benign": 60, "n_malicious": 60},
        classifiers={"svm": {"epochs": 10}, "knn": {"k": 3}},
        detector=DetectorConfig(anchor_count=5),
        grid=ExperimentGrid(**{"classifiers": ("svm",), "profiles": ("strong",), "seeds": (0,), "rounds": 2,
                               **grid}))


# ============================================================================
# SAL ROUNDS
# ============================================================================

class TestSalRound:
    def test_disabled_detector_is_plain_training(self, small_split, catalog):
        state = _state(small_split, catalog, enabled=False)
        after, report = run_sal_round(state)
        assert report.post == report.pre
        assert (report.candidates, report.relabeled, report.appended) == (0, 0, 0)
        assert after.train == state.train
        assert after.round_index == 1

    def test_round_never_touches_test(self, small_split, catalog):
        state = _state(small_split, catalog)
        after, report = run_sal_round(state)
        assert after.test == state.test
        assert report.pre.total == report.post.total == len(state.test)

    def test_train_only_grows_by_appended_detections(self, small_split, catalog):
        state = _state(small_split, catalog)
        after, report = run_sal_round(state)
        assert len(after.train) == len(state.train) + report.appended
        assert after.train.sample_ids[:len(state.train)] == state.train.sample_ids
        appended = after.train.subset(range(len(state.train), len(after.train)))
        assert (appended.labels == 1).all()
        assert set(appended.provenance) <= {Provenance.RELABELED}

    def test_relabeling_only_moves_toward_malicious(self, small_split, catalog):
        state = _state(small_split, catalog)
        after, _ = run_sal_round(state)
        before = state.train.labels
        now = after.train.labels[:len(before)]
        assert (now >= before).all()
        assert np.array_equal(after.train.X[:len(before)], state.train.X)

    def test_no_duplicate_ids_after_several_rounds(self, small_split, catalog):
        final, reports = run_sal(_state(small_split, catalog), rounds=3)
        assert len(set(final.train.sample_ids)) == len(final.train)
        assert [r.round_index for r in reports] == [1, 2, 3]

    def test_report_serializes(self, small_split, catalog):
        _, report = run_sal_round(_state(small_split, catalog))
        doc = report.to_dict()
        assert set(doc) >= {"round", "seed", "candidates", "pre", "post", "thresholds"}
        assert set(doc["thresholds"]) == {"jaccard", "weighted", "cosine"}

    def test_degenerate_training_set(self, small_split, catalog):
        train, test = small_split
        benign_only = train.where(train.labels == 0)
        with pytest.raises(DegenerateTrainingSetError):
            run_sal_round(replace(_state(small_split, catalog), train=benign_only))

    def test_empty_test(self, small_split, catalog):
        with pytest.raises(ValidationError):
            run_sal_round(replace(_state(small_split, catalog), test=Corpus.empty(len(catalog))))

    def test_rounds_must_be_positive(self, small_split, catalog):
        with pytest.raises(ValidationError):
            run_sal(_state(small_split, catalog), rounds=0)


# ============================================================================
# CONFIGURATION
# ============================================================================

class TestConfig:
    def test_defaults(self):
        exp = parse_experiment_config({})
        assert exp.kind == "attack"
        assert exp.detector.anchor_count == 50
        assert exp.grid.classifiers == ("svm", "knn", "forest")

    def test_sections(self):
        exp = parse_experiment_config({
            "experiment": {"kind": "imbalance"},
            "corpus": {"n_benign": 10, "p_b": 0.7},
            "classifier": {"rf": {"n_trees": 5}},
            "attack": {"loop_bound": 4, "crafted_label": "malicious"},
            "detector": {"mode": "anchor-percentile", "metrics": ["jaccard"]},
            "grid": {"ratios": ["1:2"], "cv_folds": 3},
        })
        assert exp.kind == "imbalance"
        assert exp.classifiers == {"forest": {"n_trees": 5}}
        assert exp.classifier_config("forest").hyper == {"n_trees": 5}
        assert exp.attack.loop_bound == 4
        assert exp.detector.metrics == ("jaccard",)
        assert exp.grid.ratios == ("1:2",)

    @pytest.mark.parametrize("doc", [
        {"extra": {}},
        {"grid": {"speed": 1}},
        {"corpus": {"n_ugly": 3}},
        {"classifier": {"svm": {"depth": 2}}},
        {"classifier": {"mlp": {}}},
        {"experiment": {"kind": "bogus"}},
        {"attack": {"crafted_label": "maybe"}},
        {"grid": {"profiles": ["godlike"]}},
        {"grid": {"kinds": ["SEQ"]}},
        {"grid": {"ratios": ["1:0"]}},
    ])
    def test_rejects(self, doc):
        with pytest.raises(ValidationError):
            parse_experiment_config(doc)

    def test_load_toml(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text('[experiment]\nkind = "feature_count"\n[grid]\nraw_size = 250\nseeds = [1, 2]\n')
        exp = load_experiment_config(path)
        assert exp.kind == "feature_count"
        assert exp.grid.seeds == (1, 2)

    def test_bad_toml(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text("[grid\n")
        with pytest.raises(ParseError):
            load_experiment_config(path)

    def test_evasion_is_part_of_the_default_attack(self):
        assert AttackSettings().evade_test
        assert AttackSettings().threat == THREAT_POISON_EVADE
        assert AttackSettings(evade_test=False).threat == THREAT_POISON_ONLY
        assert parse_experiment_config({}).attack.evade_test

    def test_bundled_attack_configs_name_their_threat(self):
        import config

        assert load_experiment_config(config.CONFIGS_DIR / "attack_grid.toml").attack.evade_test
        assert not load_experiment_config(config.CONFIGS_DIR / "poison_only.toml").attack.evade_test

    def test_bundled_configs_parse(self):
        import config

        for path in sorted(config.CONFIGS_DIR.glob("*.toml")):
            if path.name.startswith("gen_"):
                continue
            assert load_experiment_config(path).kind

    def test_to_dict_round_trips(self):
        exp = _tiny_experiment()
        again = parse_experiment_config({
            "experiment": {"kind": exp.kind, "test_fraction": exp.test_fraction},
            "corpus": exp.to_dict()["corpus"],
            "classifier": exp.to_dict()["classifier"],
            "detector": exp.to_dict()["detector"],
            "grid": exp.to_dict()["grid"],
        })
        assert again.grid == exp.grid
        assert again.detector == exp.detector

    @pytest.mark.parametrize("text, expected", [("1:5", (1, 5)), ("2:3", (2, 3)), ((1, 10), (1, 10))])
    def test_parse_ratio(self, text, expected):
        assert parse_ratio(text) == expected

    @pytest.mark.parametrize("text", ["0:5", "1:0", "1-5", "a:b", "1:2:3"])
    def test_parse_ratio_rejects(self, text):
        with pytest.raises(ValidationError):
            parse_ratio(text)


# ============================================================================
# GRID + PARTITIONS
# ============================================================================

class TestGrid:
    def test_cell_order(self):
        grid = ExperimentGrid(classifiers=("svm", "knn"), profiles=("weak", "strong"), fractions=(0.5,))
        cells = grid.cells()
        assert len(cells) == 2 * (1 + 2 * 2)
        assert [c.index for c in cells] == list(range(10))
        assert [(c.classifier, c.attacker, c.setting) for c in cells[:5]] == [
            ("svm", "none", CONVENTIONAL),
            ("svm", "weak", WITHOUT_AD), ("svm", "weak", WITHIN_AD),
            ("svm", "strong", WITHOUT_AD), ("svm", "strong", WITHIN_AD),
        ]

    def test_kinds_multiply_cells(self):
        grid = ExperimentGrid(classifiers=("svm",), profiles=("sophisticated",), kinds=("PERM", "API"),
                              ad=(False,), conventional=False)
        assert [c.kinds for c in grid.cells()] == [("PERM",), ("API",)]

    def test_empty_grid(self):
        assert ExperimentGrid(classifiers=()).cells() == []

    def test_partitions_cover_every_cell_once(self):
        cells = ExperimentGrid().cells()
        parts = [partition_cells(cells, x, 4) for x in range(1, 5)]
        indices = sorted(c.index for part in parts for c in part)
        assert indices == list(range(len(cells)))
        assert [c.index for c in parts[1]][:3] == [1, 5, 9]

    @pytest.mark.parametrize("x, y", [(0, 3), (4, 3), (1, 0)])
    def test_bad_partition(self, x, y):
        with pytest.raises(ValidationError):
            partition_cells([], x, y)


# ============================================================================
# EXPERIMENTS
# ============================================================================

class TestAttackExperiment:
    def test_empty_grid_gives_empty_table(self, catalog):
        result = run_attack_experiment(ExperimentGrid(classifiers=()), catalog=catalog)
        assert result.table.empty
        assert list(result.table.columns) == ATTACK_COLUMNS

    def test_small_grid(self, catalog):
        exp = _tiny_experiment()
        result = run_attack_experiment(exp.grid, exp, catalog)
        table = result.table
        assert list(table["setting"]) == [CONVENTIONAL, WITHOUT_AD, WITHIN_AD]
        assert (table["seeds"] == 1).all()
        assert table["accuracy_mean"].between(0.0, 1.0).all()
        assert (table["fn_sd"] == 0.0).all()
        within = [r for r in result.rounds if r["setting"] == WITHIN_AD]
        assert [r["round"] for r in within] == [1, 2]
        assert table.loc[0, "candidates_mean"] == 0.0

    def test_threat_column_separates_poison_only_runs(self, catalog):
        exp = _tiny_experiment()
        evading = run_attack_experiment(exp.grid, exp, catalog)
        assert list(evading.table["threat"]) == [THREAT_NONE, THREAT_POISON_EVADE, THREAT_POISON_EVADE]
        assert {r["threat"] for r in evading.rounds} == {THREAT_NONE, THREAT_POISON_EVADE}
        poison_only = replace(exp, attack=AttackSettings(evade_test=False))
        table = run_attack_experiment(poison_only.grid, poison_only, catalog).table
        assert list(table["threat"]) == [THREAT_NONE, THREAT_POISON_ONLY, THREAT_POISON_ONLY]

    def test_partition_runs_a_subset(self, catalog):
        exp = _tiny_experiment()
        part = run_attack_experiment(exp.grid, exp, catalog, partition_x=2, partition_y=2)
        assert list(part.table["cell"]) == [1]

    def test_repeatable(self, catalog):
        exp = _tiny_experiment(ad=(False,), conventional=False)
        a = run_attack_experiment(exp.grid, exp, catalog).table
        b = run_attack_experiment(exp.grid, exp, catalog).table
        pd.testing.assert_frame_equal(a, b)


class TestSweeps:
    def test_imbalance(self, catalog):
        spec = GeneratorSpec(catalog=catalog)
        table = run_imbalance_sweep(["1:1", "1:3"], spec, FAST_SVM, folds=3, base_malicious=12)
        assert list(table.columns) == IMBALANCE_COLUMNS
        assert table["n_benign"].tolist() == [12, 36]
        assert table["accuracy"].between(0.0, 1.0).all()

    def test_imbalance_no_ratios(self, catalog):
        table = run_imbalance_sweep([], GeneratorSpec(catalog=catalog))
        assert table.empty and list(table.columns) == IMBALANCE_COLUMNS

    def test_imbalance_too_few_samples_for_folds(self, catalog):
        with pytest.raises(ValidationError):
            run_imbalance_sweep(["1:1"], GeneratorSpec(catalog=catalog), FAST_SVM, folds=5, base_malicious=3)

    def test_crafted_size(self, catalog):
        result = run_crafted_size_sweep([0.2, 0.4], _tiny_experiment(), catalog)
        table = result.table
        assert result.kind == "crafted_size"
        assert list(table["setting"]) == [WITHOUT_AD, WITHIN_AD, WITHOUT_AD, WITHIN_AD]
        assert list(table["fraction"]) == [0.2, 0.2, 0.4, 0.4]

    def test_kind_impact(self, catalog):
        result = run_kind_impact(["PERM", "API"], _tiny_experiment(), catalog)
        table = result.table
        assert result.kind == "kind_impact"
        assert list(table["setting"]) == [CONVENTIONAL, WITHOUT_AD, WITHOUT_AD]
        assert list(table["attacker"]) == ["none", "sophisticated", "sophisticated"]
        assert list(table["kinds"]) == ["all", "PERM", "API"]
        assert [r["round"] for r in result.rounds] == [1, 1, 1]

    def test_raw_catalog(self, catalog):
        raw = build_raw_catalog(catalog, 564)
        assert len(raw) == 564
        assert [f.name for f in raw][:195] == [f.name for f in catalog]
        assert raw[195].name == "NEUTRAL_000"
        with pytest.raises(ValidationError):
            build_raw_catalog(catalog, 100)


class TestOrchestrator:
    def test_feature_count_run_and_save(self, tmp_path, catalog):
        exp = replace(_tiny_experiment(), kind="feature_count",
                      grid=ExperimentGrid(classifiers=("svm",), seeds=(0,), raw_size=230))
        orchestrator = ExperimentOrchestrator(exp, catalog, tmp_path, show_progress=False)
        result = orchestrator.run()
        assert result.table["space"].tolist() == ["raw", "selected"]
        assert result.table["n_features"].tolist() == [230, 195]
        paths = orchestrator.save(result)
        assert paths == [tmp_path / "results.csv"]
        assert pd.read_csv(paths[0])["seed"].tolist() == [0, 0]

    def test_partition_file_names(self, tmp_path, catalog):
        orchestrator = ExperimentOrchestrator(_tiny_experiment(), catalog, tmp_path, 2, 3, show_progress=False)
        assert orchestrator.results_path.name == "results_p2_of_3.csv"
        assert orchestrator.rounds_path.name == "rounds_p2_of_3.jsonl"

    def test_attack_run_writes_rounds(self, tmp_path, catalog):
        orchestrator = ExperimentOrchestrator(_tiny_experiment(), catalog, tmp_path, show_progress=False)
        paths = orchestrator.save(orchestrator.run())
        assert [p.name for p in paths] == ["results.csv", "rounds.jsonl"]
