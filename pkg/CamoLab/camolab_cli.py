#!/usr/bin/env python3
"""
CamoLab command line

Every subcommand writes its outputs atomically plus a run manifest
(<out>.manifest.json, or manifest.json inside an output directory) holding
the argv, resolved config, seeds and artifact hashes; `replay` re-runs a
manifest and checks the outputs are byte-identical.

Exit codes: 0 success, 1 validation or usage error, 2 runtime error.
"""

import argparse
import json
import logging
import os
import secrets
import sys
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

import config
from adversary import make_attacker_profile, poison_corpus_with_log
from app_parsers import extract_app_directory
from camouflage_detector import DetectorConfig, detect_camouflage, document_frequency_weights, relabel, trusted_pool
from classifiers import EvalReport, evaluate, load_model, save_model
from corpus import (GeneratorSpec, generate_corpus, ingest_app_directory, load_corpus, save_corpus,
                    split_corpus)
from errors import EXIT_OK, EXIT_RUNTIME, ValidationError, exit_code_for
from feature_catalog import Corpus, Label, Provenance, load_catalog, save_catalog
from sal_pipeline import ClassifierConfig, ExperimentOrchestrator, load_experiment_config
from surrogate import SurrogateHyper, train_surrogate
from utils import banner, fail, ok, saved, stat, warn
from utils.atomic_io import atomic_write_text, sha256_file, write_csv

logger = logging.getLogger("camolab")

TOOL_NAME = "camolab"
MANIFEST_FORMAT = "camolab-run-manifest"

# Numeric columns that name a cell rather than measure it
IDENTITY_COLUMNS = ("cell", "fraction", "kinds", "seeds", "n_malicious", "n_benign", "folds", "n_features")


# ============================================================================
# RUN MANIFEST
# ============================================================================

@dataclass
class RunManifest:
    subcommand: str
    argv: List[str]
    cwd: str
    config: Dict = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    timestamp: str = ""

    def to_dict(self) -> Dict:
        return {"format": MANIFEST_FORMAT, **asdict(self)}

    def save(self, path: Path) -> Path:
        return atomic_write_text(path, json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"manifest not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ValidationError(f"manifest is not valid JSON: {e}") from None
        if doc.pop("format", None) != MANIFEST_FORMAT:
            raise ValidationError(f"{path} is not a CamoLab run manifest")
        try:
            return cls(**doc)
        except TypeError as e:
            raise ValidationError(f"malformed manifest: {e}") from None


class RunContext:
    """Collects what a subcommand read, wrote and decided"""

    def __init__(self, subcommand: str, argv: List[str]):
        self.subcommand = subcommand
        self.argv = list(argv)
        self.config: Dict = {}
        self.seeds: List[int] = []
        self.inputs: List[Path] = []
        self.outputs: List[Path] = []
        self.manifest_path: Optional[Path] = None

    def resolve_seed(self, seed: Optional[int]) -> int:
        """Use --seed if given; otherwise draw one and record it in argv"""
        if seed is None:
            seed = secrets.randbelow(2**31)
            self.argv += ["--seed", str(seed)]
            warn(f"No --seed given; using generated seed {seed}")
        self.seeds.append(seed)
        return seed

    def read(self, *paths) -> None:
        self.inputs += [Path(p) for p in paths if p is not None]

    def wrote(self, *paths) -> None:
        self.outputs += [Path(p) for p in paths if p is not None]

    def manifest_for_file(self, out) -> None:
        self.manifest_path = Path(f"{out}.manifest.json")

    def manifest_in_dir(self, out_dir, name: str = config.MANIFEST_FILE) -> None:
        self.manifest_path = Path(out_dir) / name

    def finish(self) -> Optional[Path]:
        if self.manifest_path is None:
            return None
        manifest = RunManifest(
            subcommand=self.subcommand, argv=self.argv, cwd=os.getcwd(), config=self.config, seeds=self.seeds,
            inputs={str(p): sha256_file(p) for p in self.inputs if Path(p).is_file()},
            outputs={str(p): sha256_file(p) for p in self.outputs},
            timestamp=datetime.now().isoformat(timespec="seconds"))
        manifest.save(self.manifest_path)
        saved(f"Manifest: {self.manifest_path}")
        return self.manifest_path


# ============================================================================
# HELPERS
# ============================================================================

def _label(text: Optional[str]) -> Optional[Label]:
    if text is None:
        return None
    return Label.BENIGN if text == "benign" else Label.MALICIOUS


def _parse_hyper(pairs: List[str]) -> Dict:
    hyper = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise ValidationError(f"hyperparameter must look like key=value, got '{pair}'")
        try:
            value = int(raw)
        except ValueError:
            try:
                value = float(raw)
            except ValueError:
                raise ValidationError(f"hyperparameter {key} needs a number, got '{raw}'") from None
        hyper[key] = value
    return hyper


def _load_generator_file(path) -> Dict:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"generator spec not found: {path}")
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"{path.name}: {e}") from None
    table = doc.get("corpus", doc)
    allowed = set(GeneratorSpec.__dataclass_fields__) - {"catalog"}
    unknown = set(table) - allowed
    if unknown:
        raise ValidationError(f"unknown generator keys: {sorted(unknown)}")
    return dict(table)


def _write_corpus_pair(ctx: RunContext, corpus, catalog, out, test_out, test_fraction, seed,
                       spec_sha256: Optional[str] = None):
    if test_out:
        train, test = split_corpus(corpus, test_fraction, seed)
        save_corpus(train, out, catalog, spec_sha256)
        save_corpus(test, test_out, catalog, spec_sha256)
        ctx.wrote(out, test_out)
        saved(f"Train corpus: {out} ({len(train):,} samples)")
        saved(f"Test corpus: {test_out} ({len(test):,} samples)")
    else:
        save_corpus(corpus, out, catalog, spec_sha256)
        ctx.wrote(out)
        saved(f"Corpus: {out} ({len(corpus):,} samples)")


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_catalog(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    ctx.read(args.catalog)
    summary = catalog.summary()
    banner("FEATURE CATALOG", f"Source: {args.catalog}")
    stat(f"Features: {summary['n_features']} ({summary['syntax_features']} syntax)")
    for kind, count in summary["kind_counts"].items():
        stat(f"{kind:<5} {count}", indent=2)
    stat(f"sha256: {catalog.sha256}")
    if args.out:
        save_catalog(catalog, args.out)
        ctx.wrote(args.out)
        ctx.manifest_for_file(args.out)
        saved(f"Catalog: {args.out}")
    return EXIT_OK


def cmd_gen(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    ctx.read(args.catalog, args.spec)
    settings = _load_generator_file(args.spec) if args.spec else {}
    file_seed = settings.pop("seed", None)
    seed = ctx.resolve_seed(args.seed if args.seed is not None else file_seed)
    if "neutral_features" in settings:
        settings["neutral_features"] = tuple(settings["neutral_features"])
    if args.n_benign is not None:
        settings["n_benign"] = args.n_benign
    if args.n_malicious is not None:
        settings["n_malicious"] = args.n_malicious
    spec = GeneratorSpec(catalog=catalog, seed=seed, **settings)
    ctx.config = spec.to_dict()

    banner("GENERATING CORPUS", f"Benign: {spec.n_benign:,}  Malicious: {spec.n_malicious:,}  Seed: {seed}")
    corpus = generate_corpus(spec)
    _write_corpus_pair(ctx, corpus, catalog, args.out, args.test_out, args.test_fraction, seed, spec.sha256)
    ctx.manifest_for_file(args.out)
    return EXIT_OK


def cmd_extract(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    ctx.read(args.catalog)
    root = Path(args.apps)
    label = _label(args.label)
    banner("EXTRACTING FEATURES", f"Apps: {root}")
    if (root / "manifest.xml").exists():
        if label is None:
            raise ValidationError("a single app needs --label")
        app_id, vector = extract_app_directory(root, catalog)
        corpus = Corpus(vector[None, :], [int(label)], [Provenance.ORIGINAL], [app_id])
    else:
        corpus = ingest_app_directory(root, catalog, label, args.workers)
    ok(f"Extracted {len(corpus):,} apps ({corpus.label_counts()})")
    if args.test_out:
        ctx.resolve_seed(args.seed)
    ctx.config = {"apps": str(root), "label": args.label, "test_fraction": args.test_fraction}
    _write_corpus_pair(ctx, corpus, catalog, args.out, args.test_out, args.test_fraction,
                       ctx.seeds[0] if ctx.seeds else 0)
    ctx.manifest_for_file(args.out)
    return EXIT_OK


def cmd_train(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    corpus = load_corpus(args.corpus, catalog)
    ctx.read(args.catalog, args.corpus)
    seed = ctx.resolve_seed(args.seed)
    hyper = _parse_hyper(args.hyper)

    banner("TRAINING", f"Family: {args.classifier}  Samples: {len(corpus):,}  Seed: {seed}")
    if args.classifier == "surrogate":
        try:
            surrogate_hyper = SurrogateHyper(**hyper)
        except TypeError as e:
            raise ValidationError(f"bad surrogate hyperparameters: {e}") from None
        model = train_surrogate(corpus, surrogate_hyper)
    else:
        model = ClassifierConfig(args.classifier, hyper).train(corpus, seed)
    save_model(model, args.out)
    ctx.config = {"classifier": args.classifier, "hyper": hyper}
    ctx.wrote(args.out)
    ctx.manifest_for_file(args.out)
    saved(f"Model: {args.out}")
    return EXIT_OK


def cmd_eval(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    model = load_model(args.model)
    corpus = load_corpus(args.corpus, catalog)
    ctx.read(args.catalog, args.model, args.corpus)
    report = evaluate(model, corpus)
    banner("EVALUATION", f"Model: {args.model}  Samples: {len(corpus):,}")
    stat(f"Accuracy: {report.accuracy:.4f}")
    stat(f"FN: {report.fn}  (rate {report.fn_rate:.4f})")
    if args.format == 'json':
        text = json.dumps(report.to_dict(), sort_keys=True) + "\n"
    else:
        text = f"{EvalReport.CSV_HEADER}\n{report.csv_row()}\n"
    if args.out:
        atomic_write_text(args.out, text)
        ctx.wrote(args.out)
        ctx.manifest_for_file(args.out)
        saved(f"Report: {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def poisoned_corpus_path(corpus_path) -> Path:
    """<dir>/<stem>.poisoned.jsonl next to the clean corpus"""
    path = Path(corpus_path)
    return path.with_name(f"{path.stem}.poisoned.jsonl")


def cmd_attack(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    train = load_corpus(args.corpus, catalog)
    ctx.read(args.catalog, args.corpus)
    seed = ctx.resolve_seed(args.seed)
    profile = make_attacker_profile(args.profile, catalog, seed, args.loop_bound)
    out = args.out or poisoned_corpus_path(args.corpus)
    classifier = ClassifierConfig(args.classifier)

    banner("POISONING ATTACK", f"Profile: {profile.name} (c_f {profile.c_f})  Fraction: {args.fraction}",
           f"Victim: {args.classifier}  Crafted label: {args.crafted_label}")
    surrogate = train_surrogate(train, SurrogateHyper())
    victim = classifier.train(train, seed)
    poisoned, log = poison_corpus_with_log(train, profile, args.fraction, surrogate, victim,
                                           _label(args.crafted_label))
    ok(f"Crafted {len(log.results):,} samples, success rate {log.success_rate:.4f}")
    if log.fake_ids:
        ok(f"Injected {len(log.fake_ids):,} random benign-labeled samples")

    save_corpus(poisoned, out, catalog)
    log_path = args.log or f"{out}.flips.json"
    atomic_write_text(log_path, json.dumps(log.to_dict(), sort_keys=True, indent=1) + "\n")
    ctx.config = {"profile": profile.describe(), "fraction": args.fraction, "classifier": args.classifier,
                  "crafted_label": args.crafted_label}
    ctx.wrote(out, log_path)
    ctx.manifest_for_file(out)
    saved(f"Poisoned corpus: {out}")
    saved(f"Flip logs: {log_path}")
    return EXIT_OK


def cmd_detect(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    model = load_model(args.model)
    train = load_corpus(args.train, catalog)
    target = load_corpus(args.target, catalog)
    ctx.read(args.catalog, args.model, args.train, args.target)
    detector = DetectorConfig(anchor_count=args.anchor_count, mode=args.mode)
    weights = document_frequency_weights(trusted_pool(train), catalog)

    banner("CAMOUFLAGE DETECTION", f"Target: {args.target} ({len(target):,} samples)")
    detection = detect_camouflage(model, train, target, weights, detector)
    for metric, band in detection.thresholds.to_dict().items():
        stat(f"{metric:<9} band ({band[0]:.4f}, {band[1]:.4f})")
    ok(f"{len(detection.candidates):,} candidates")

    columns = ["sample_id", "max_similarity", "matched"] + [f"sim_{m}" for m in sorted(detector.metrics)]
    table = pd.DataFrame([c.to_dict() for c in detection.candidates], columns=columns)
    write_csv(table, args.out, config.FLOAT_FORMAT)
    ctx.wrote(args.out)
    if args.relabel_out:
        save_corpus(relabel(detection.candidates, target), args.relabel_out, catalog)
        ctx.wrote(args.relabel_out)
        saved(f"Relabeled corpus: {args.relabel_out}")
    ctx.config = {"detector": {**asdict(detector), "metrics": list(detector.metrics)},
                  "thresholds": detection.thresholds.to_dict()}
    ctx.manifest_for_file(args.out)
    saved(f"Candidates: {args.out}")
    return EXIT_OK


def cmd_pipeline(args, ctx: RunContext) -> int:
    catalog = load_catalog(args.catalog)
    experiment = load_experiment_config(args.config)
    ctx.read(args.catalog, args.config)
    out_dir = Path(args.out_dir)
    orchestrator = ExperimentOrchestrator(experiment, catalog, out_dir, args.partition, args.total,
                                          args.workers, show_progress=not args.quiet)
    result = orchestrator.run()
    ctx.wrote(*orchestrator.save(result))
    orchestrator.print_summary(result)
    ctx.config = experiment.to_dict()
    ctx.seeds = list(experiment.grid.seeds)
    ctx.manifest_in_dir(out_dir, f"manifest{orchestrator.partition_suffix}.json")
    if args.total > 1:
        print(f"\n💡 NOTE: This is partition {args.partition}/{args.total}")
        print(f"   Run the other partitions, then: report --merge-dir {out_dir} --total {args.total}")
    return EXIT_OK


def to_long_format(results: pd.DataFrame) -> pd.DataFrame:
    """One row per (cell identity, metric): plot-ready long format"""
    metric_columns = [c for c in results.columns
                      if pd.api.types.is_float_dtype(results[c]) and c not in IDENTITY_COLUMNS]
    id_columns = [c for c in results.columns if c not in metric_columns]
    return results.melt(id_vars=id_columns, value_vars=metric_columns, var_name="metric", value_name="value")


def cmd_report(args, ctx: RunContext) -> int:
    if args.merge_dir:
        from merge import merge_partitions

        merge_partitions(args.merge_dir, args.total)
        results_path = Path(args.merge_dir) / config.RESULTS_FILE
        ctx.wrote(results_path)
    else:
        if not args.results:
            raise ValidationError("report needs --results or --merge-dir")
        results_path = Path(args.results)
    if not results_path.exists():
        raise ValidationError(f"results file not found: {results_path}")
    ctx.read(results_path)

    out = Path(args.out) if args.out else results_path.with_name(config.LONG_RESULTS_FILE)
    long = to_long_format(pd.read_csv(results_path))
    write_csv(long, out, config.FLOAT_FORMAT)
    ctx.wrote(out)
    ctx.manifest_for_file(out)
    saved(f"Long-format results: {out} ({len(long):,} rows)")
    return EXIT_OK


def cmd_replay(args, ctx: RunContext) -> int:
    manifest = RunManifest.load(args.manifest)
    banner("REPLAY", f"Subcommand: {manifest.subcommand}", f"Working dir: {manifest.cwd}")
    previous = os.getcwd()
    try:
        os.chdir(manifest.cwd)
        code = dispatch(manifest.argv)
        if code != EXIT_OK:
            fail(f"Replayed run exited with {code}")
            return code
        mismatched = [path for path, digest in manifest.outputs.items()
                      if not Path(path).exists() or sha256_file(path) != digest]
    finally:
        os.chdir(previous)

    for path in manifest.outputs:
        if path in mismatched:
            fail(f"{path} differs from the recorded run")
        else:
            ok(f"{path} identical")
    return EXIT_RUNTIME if mismatched else EXIT_OK


# ============================================================================
# PARSER
# ============================================================================

class LabArgumentParser(argparse.ArgumentParser):
    """Usage errors print usage to stderr and exit 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> LabArgumentParser:
    common = LabArgumentParser(add_help=False)
    common.add_argument('--catalog', default=str(config.CATALOG_FILE),
                        help='Feature catalog TSV (default: bundled 195-feature catalog)')
    common.add_argument('--verbose', action='store_true', help='Debug logging')
    common.add_argument('--workers', type=int, default=None,
                        help=f'Worker processes, capped by {config.THREADS_ENV}')

    parser = LabArgumentParser(
        prog=TOOL_NAME,
        description='CamoLab - poisoning attacks and camouflage detection on app feature vectors',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate a seeded synthetic corpus with an 80/20 split
  python camolab_cli.py gen --spec resources/configs/gen_default.toml --out data/train.jsonl --test-out data/test.jsonl --seed 0

  # Train and evaluate a linear SVM
  python camolab_cli.py train --corpus data/train.jsonl --classifier svm --out data/svm.json --seed 0
  python camolab_cli.py eval --model data/svm.json --corpus data/test.jsonl

  # Poison half the malicious training samples
  python camolab_cli.py attack --profile sophisticated --fraction 0.5 --corpus data/train.jsonl --seed 0

  # Run the attack table (optionally split across machines)
  python camolab_cli.py pipeline --config resources/configs/attack_grid.toml --out-dir data/attack
  python camolab_cli.py pipeline --config resources/configs/attack_grid.toml --out-dir data/attack --partition 1 --total 3

  # Merge partitions and render long-format CSV; replay a run
  python camolab_cli.py report --merge-dir data/attack --total 3
  python camolab_cli.py replay --manifest data/attack/manifest.json
        """
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=LabArgumentParser)

    p = sub.add_parser('catalog', parents=[common], help='Validate and summarize a catalog')
    p.add_argument('--out', help='Write the normalized catalog here')
    p.set_defaults(handler=cmd_catalog)

    p = sub.add_parser('gen', parents=[common], help='Generate a synthetic corpus')
    p.add_argument('--spec', help='Generator TOML ([corpus] table)')
    p.add_argument('--out', required=True)
    p.add_argument('--test-out', help='Also split off a stratified test corpus')
    p.add_argument('--test-fraction', type=float, default=config.TEST_FRACTION)
    p.add_argument('--n-benign', type=int)
    p.add_argument('--n-malicious', type=int)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser('extract', parents=[common], help='Extract features from app directories')
    p.add_argument('--apps', required=True, help='App dir, or a root with benign/ and malicious/')
    p.add_argument('--label', choices=['benign', 'malicious'])
    p.add_argument('--out', required=True)
    p.add_argument('--test-out')
    p.add_argument('--test-fraction', type=float, default=config.TEST_FRACTION)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_extract)

    p = sub.add_parser('train', parents=[common], help='Train a classifier or the surrogate')
    p.add_argument('--corpus', required=True)
    p.add_argument('--classifier', default='svm', choices=['svm', 'knn', 'forest', 'surrogate'])
    p.add_argument('--hyper', nargs='*', default=[], help='Hyperparameters as key=value')
    p.add_argument('--out', required=True)
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', parents=[common], help='Evaluate a model on a corpus')
    p.add_argument('--model', required=True)
    p.add_argument('--corpus', required=True)
    p.add_argument('--out', help='Write the report here instead of stdout')
    p.add_argument('--format', choices=['csv', 'json'], default='csv')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('attack', parents=[common], help='Poison a training corpus')
    p.add_argument('--profile', required=True, choices=sorted(config.PROFILE_CF))
    p.add_argument('--fraction', type=float, default=config.POISON_FRACTION)
    p.add_argument('--corpus', required=True)
    p.add_argument('--classifier', default='svm', choices=['svm', 'knn', 'forest'])
    p.add_argument('--crafted-label', default='malicious', choices=['benign', 'malicious'])
    p.add_argument('--loop-bound', type=int, default=config.LOOP_BOUND)
    p.add_argument('--out', help='Poisoned corpus path (default: <corpus stem>.poisoned.jsonl)')
    p.add_argument('--log', help='Flip log path (default: <out>.flips.json)')
    p.add_argument('--seed', type=int)
    p.set_defaults(handler=cmd_attack)

    p = sub.add_parser('detect', parents=[common], help='Find camouflaged samples in a target corpus')
    p.add_argument('--model', required=True)
    p.add_argument('--train', required=True, help='Training corpus (anchors come from its Original samples)')
    p.add_argument('--target', required=True)
    p.add_argument('--anchor-count', type=int, default=config.ANCHOR_COUNT)
    p.add_argument('--mode', default=config.THRESHOLD_MODE, choices=['reference', 'anchor-percentile'])
    p.add_argument('--out', required=True, help='Candidate CSV')
    p.add_argument('--relabel-out', help='Also write the target corpus with candidates relabeled')
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser('pipeline', parents=[common], help='Run a configured experiment')
    p.add_argument('--config', required=True, help='Experiment TOML')
    p.add_argument('--out-dir', default=config.DATA_DIR)
    p.add_argument('--partition', type=int, default=1, help='Which partition to run (1 to --total)')
    p.add_argument('--total', type=int, default=1, help='Total number of partitions (default: 1)')
    p.add_argument('--quiet', action='store_true', help='No progress bars')
    p.set_defaults(handler=cmd_pipeline)

    p = sub.add_parser('report', parents=[common], help='Render results.csv as long-format CSV')
    p.add_argument('--results')
    p.add_argument('--merge-dir', help='Merge partition files in this directory first')
    p.add_argument('--total', type=int, default=1)
    p.add_argument('--out')
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser('replay', parents=[common], help='Re-run a recorded manifest')
    p.add_argument('--manifest', required=True)
    p.set_defaults(handler=cmd_replay)
    return parser


def configure_logging(verbose: bool):
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the subcommand, write its manifest, return the exit code"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 1
    configure_logging(args.verbose)

    ctx = RunContext(args.command, argv)
    try:
        code = args.handler(args, ctx)
        if code == EXIT_OK and args.command != "replay":
            ctx.finish()
        return code
    except Exception as e:
        fail(f"{type(e).__name__}: {e}")
        logger.debug("command failed", exc_info=True)
        return exit_code_for(e)


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
