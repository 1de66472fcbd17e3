"""Constants for the consensus Monte Carlo engine."""

SCHEMA_VERSION = 1

MODEL_PROBIT = "probit"
MODEL_NIW = "niw"
MODEL_MIXTURE = "mixture"
MODEL_TAGS = (MODEL_PROBIT, MODEL_NIW, MODEL_MIXTURE)

MODE_SUBPOSTERIOR = "subposterior"
MODE_PARTIAL = "partial_posterior"

CONF_SCHEMA_VERSION = "schema_version"
CONF_SEED = "seed"
CONF_OUT = "out"
CONF_THREADS = "threads"
CONF_MODEL = "model"
CONF_TYPE = "type"
CONF_DATA = "data"
CONF_SYNTHETIC = "synthetic"
CONF_PARTITIONS = "partitions"
CONF_K = "k"
CONF_MODE = "mode"
CONF_SAMPLER = "sampler"
CONF_OBJECTIVE = "objective"
CONF_EVALUATION = "evaluation"

CONF_ITERATIONS = "iterations"
CONF_BURN_IN = "burn_in"
CONF_THIN = "thin"
CONF_STEP_SIZE = "step_size"
CONF_LEAPFROG_STEPS = "leapfrog_steps"
CONF_TUNE = "tune"
CONF_REFERENCE_MULTIPLIER = "reference_multiplier"
CONF_FORMAT = "format"

CONF_ENTROPY = "entropy"
CONF_BATCH_SIZE = "batch_size"
CONF_STEP_A = "step_a"
CONF_STEP_B = "step_b"
CONF_FLOOR = "floor"
CONF_MIXTURE_GRADIENT = "mixture_gradient"

CONF_SUITES = "suites"
CONF_ALGORITHMS = "algorithms"
CONF_TEST_POINTS = "test_points"
CONF_TRIM_FRACTION = "trim_fraction"

DEFAULT_ITERATIONS = 5100
DEFAULT_BURN_IN = 100
DEFAULT_THIN = 5
DEFAULT_STEP_SIZE = 0.1
DEFAULT_LEAPFROG_STEPS = 10
DEFAULT_REFERENCE_MULTIPLIER = 10

DEFAULT_BATCH_SIZE = 40
DEFAULT_OPT_ITERATIONS = 25
DEFAULT_STEP_A = 0.1
DEFAULT_STEP_B = 10.0
DEFAULT_WEIGHT_FLOOR = 1e-6

DEFAULT_TEST_POINTS = 100
DEFAULT_TRIM_FRACTION = 1.0
DEFAULT_K_SWEEP = [5, 10, 25, 50]

# Numeric tolerances shared across modules.
SIMPLEX_TOLERANCE = 1e-10
SYMMETRY_TOLERANCE = 1e-10
PSD_TOLERANCE = 1e-10
EIGENVECTOR_SIGN_TOLERANCE = 1e-12
VARIANCE_REGULARIZER = 1e-12
PROBIT_CDF_CLAMP = 1e-12
REFERENCE_THRESHOLD = 1e-12
SINGULAR_CONDITION = 1e12

# Truncation point (in standard deviations above the mean) beyond which the
# truncated normal sampler switches from inverse CDF to exponential rejection.
TRUNCNORM_TAIL_CUTOFF = 5.0

HMC_TUNE_WARMUP_STEPS = 100
HMC_TUNE_TARGET_ACCEPTANCE = 0.6
HMC_TUNE_MAX_HALVINGS = 20

SAMPLE_FILE_MAGIC = b"CMCS"
FORMAT_BINARY = "binary"
FORMAT_CSV = "csv"

MANIFEST_FILE = "manifest.json"
SERIAL_DIR = "serial"
SAMPLES_DIR = "samples"
WEIGHTS_DIR = "weights"
AGGREGATED_DIR = "aggregated"
REPORTS_DIR = "reports"
