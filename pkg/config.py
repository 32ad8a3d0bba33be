# DATASETS
TENSOR_SUFFIX = ".usbl"
MANIFEST_NAME = "manifest.yaml"
DATA_DIR_ENVVAR = "USBL_DATA_DIR"

# HYPERPRIORS
HALF_CAUCHY_SCALE_GLOBAL = 1.0
HALF_CAUCHY_SCALE_LOCAL = 1.0
HALF_NORMAL_SCALE_INNOVATION = 0.1  # 0.01 for the tighter variant
INNOVATION_SCALE_CHOICES = (0.1, 0.01)
HALF_STUDENT_T_DF = 3.0
HALF_STUDENT_T_SCALE = 0.1
ALPHA_PRIOR_LOC = 0.0
ALPHA_PRIOR_SCALE = 1.0
GAUSSIAN_WEIGHT_SCALE = 1.0
LOWRANK_FACTOR_SCALE = 1.0
OMEGA_HALF_CAUCHY_SCALE = 10.0
GRW_INTERCEPT_SCALE = 1.0

# prior kind per modality name; anything missing falls back by shape
PRIOR_KINDS = ("eeg-dugh", "eeg-lowrank", "horseshoe-grw", "horseshoe", "gaussian")
DEFAULT_PRIOR_BY_MODALITY = {
    "eeg": "eeg-dugh",
    "fau": "horseshoe-grw",
    "dyn": "horseshoe-grw",
    "gaze": "horseshoe-grw",
    "rt": "gaussian",
}
LOWRANK_MAX_RANK = 8

# LEAD FIELD AND COVARIANCES
KERNEL_MULTIPLIER = 2.0
KERNEL_TRUNCATION = 3.0
DATA_COV_SHRINKAGE = 0.01
NOISE_FACTORS = 5
FA_MAX_ITERS = 500
FA_TOL = 1e-6
JITTER = 1e-8

# INITIALIZATION
INIT_WEIGHT_SD = 0.01
INIT_LOG_SCALE = -2.302585092994046  # log(0.1)
INIT_ALPHA = 0.01

# OPTIMIZER
LR_START = 0.01
LR_END = 0.0025
STEPS = 5000
GRAD_CLIP_NORM = 1.0
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
LAPLACE_REL_STEP = 1e-4
CURVATURE_FLOOR = 1e-12

# MCMC (omega)
MCMC_WARMUP = 500
MCMC_SAMPLES = 1000
MCMC_TARGET_ACCEPTANCE = 0.44
MCMC_INITIAL_STEP = 1.0

# CALIBRATION
CALIBRATION_FOLDS = 5

# CROSS-VALIDATION
CV_FOLDS = 5
CV_REPEATS = 10
CV_SEED = 42
CV_STRATIFIED = True
DECISION_THRESHOLD = 0.5
CI_LEVEL = 0.95
FDR_Q = 0.05
MDES_ALPHA = 0.05
MDES_POWER = 0.8
CROSS_ENTROPY_CLAMP = 1e-12

# BASELINES
RIDGE_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
RIDGE_NESTED_FOLDS = 5
RIDGE_MAX_ITER = 1000
LOGIT_CLAMP = 15.0
RT_TRIM_HIGH = 10000.0
RT_TRIM_LOW = 300.0
RT_MODALITY = "rt"
SHORT_WINDOWS = ((-0.05, 0.05), (0.05, 0.2), (0.2, 0.3), (0.3, 0.4), (0.4, 0.5))
LONG_WINDOWS = SHORT_WINDOWS + ((-0.2, -0.05), (0.0, 0.05), (0.5, 0.7), (0.7, 1.0))

# SYNTHETIC COHORTS
SYNTH_N_PARTICIPANTS = 24
SYNTH_CLASS_BALANCE = 0.5
SYNTH_BLOCKS = 12
SYNTH_TRIALS_PER_BLOCK = 10
SYNTH_EFFECT_SIZE = 0.5
SYNTH_PARTICIPANT_VARIABILITY = 0.3
SYNTH_TRIAL_NOISE_SD = 1.0
SYNTH_SESSION_EFFECT_SD = 0.5
SYNTH_AR_COEF = 0.0
SYNTH_SPARSITY = 2
SYNTH_N_VERTICES = 60
SYNTH_N_REGIONS = 6
SYNTH_RT_BASE_MS = 600.0
SYNTH_RT_SCALE_MS = 100.0
# (name, channels, samples, sample_rate, stimulus_index)
SYNTH_MODALITIES = (
    ("eeg", 8, 25, 20.0, 4),
    ("gaze", 2, 25, 20.0, 4),
    ("rt", 1, 1, 1.0, 0),
)

# DEFF
DEFF_PCS = 5

# CLI EXIT CODES
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

# set by the CLI; utils.log appends here when not None
LOGFILE = None
