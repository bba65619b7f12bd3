import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Paths
PACKAGE_DIR = Path(__file__).resolve().parent
RESOURCES_DIR = PACKAGE_DIR / "resources"
DATA_DIR = os.getenv("CAMOLAB_DATA_DIR", "./data")

CATALOG_FILE = RESOURCES_DIR / "catalog_195.tsv"
PATTERNS_FILE = RESOURCES_DIR / "sequence_patterns.tsv"
SAMPLE_APPS_DIR = RESOURCES_DIR / "sample_apps"
CONFIGS_DIR = RESOURCES_DIR / "configs"

# Parallelism
THREADS_ENV = "CAMOLAB_THREADS"
THREADS_ENV_FALLBACK = "KUAFU_THREADS"
DEFAULT_WORKERS = 1

# Catalog shape
CANONICAL_KIND_COUNTS = {"PERM": 61, "INT": 12, "HW": 5, "API": 97, "SEQ": 20}
CANONICAL_INDICATIVENESS = {"B": 73, "M": 102}
RAW_CATALOG_SIZE = 564

# Corpus generator
GEN_N_BENIGN = 2000
GEN_N_MALICIOUS = 2000
GEN_P_BENIGN = 0.6
GEN_Q_BENIGN = 0.05
GEN_P_MALICIOUS = 0.6
GEN_Q_MALICIOUS = 0.05
GEN_P_SEQUENCE = 0.5
GEN_Q_SEQUENCE = 0.05
GEN_NOISE = 0.02
GEN_NEUTRAL_RATE = 0.1
TEST_FRACTION = 0.2

# Classifiers
SVM_C = 1.0
SVM_EPOCHS = 200
SVM_BATCH_SIZE = 32
KNN_K = 5
FOREST_TREES = 100
FOREST_MAX_DEPTH = 10

# Surrogate
SURROGATE_EPOCHS = 300
SURROGATE_LEARNING_RATE = 0.5

# Adversary
PROFILE_CF = {"weak": 0.33, "strong": 0.67, "sophisticated": 1.0}
LOOP_BOUND = 20
POISON_FRACTION = 0.5

# Camouflage detector
ANCHOR_COUNT = 50
THRESHOLD_MODE = "reference"  # not the 60/99 anchor-percentile rule, see README "Detector Thresholds"
REFERENCE_PERCENTILE = 99.9
ANCHOR_LOWER_PERCENTILE = 60.0
ANCHOR_UPPER_PERCENTILE = 99.0
METRICS = ("jaccard", "weighted", "cosine")

# SAL pipeline
SAL_ROUNDS = 3
CV_FOLDS = 10
IMBALANCE_BASE_MALICIOUS = 100
IMBALANCE_RATIOS = ((1, 1), (1, 5), (1, 10), (1, 20), (1, 50))
SEEDS = (0,)

# Output files
RESULTS_FILE = "results.csv"
ROUNDS_FILE = "rounds.jsonl"
MANIFEST_FILE = "manifest.json"
LONG_RESULTS_FILE = "results_long.csv"
FLOAT_FORMAT = "%.4f"
