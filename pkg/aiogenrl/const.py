"""Define package constants."""
# Grid world
DEFAULT_GRID_SIZE: int = 9
DEFAULT_NUM_WALLS: int = 2
MIN_GRID_SIZE: int = 5
VIEW_SIZE: int = 7
OBS_CHANNELS: int = 3
OBS_SHAPE: tuple[int, int, int] = (VIEW_SIZE, VIEW_SIZE, OBS_CHANNELS)
OBS_DIM: int = VIEW_SIZE * VIEW_SIZE * OBS_CHANNELS
NUM_ACTIONS: int = 7
GOAL_REWARD_DECAY: float = 0.9
DEFAULT_NOISE_AMPLITUDE: float = 0.05
MAX_NOISE_AMPLITUDE: float = 0.5
MULTIROOM_MAX_ATTEMPTS: int = 64

# Agent networks
HIDDEN_SIZE: int = 64
POLICY_LAYER_SHAPES: tuple[tuple[int, int], ...] = (
    (OBS_DIM, HIDDEN_SIZE),
    (HIDDEN_SIZE, HIDDEN_SIZE),
    (HIDDEN_SIZE, NUM_ACTIONS),
)

# PPO
DEFAULT_GAMMA: float = 0.99
DEFAULT_GAE_LAMBDA: float = 0.95
DEFAULT_CLIP_RANGE: float = 0.2
DEFAULT_VF_COEF: float = 0.5
DEFAULT_ENT_COEF: float = 0.01
DEFAULT_GEN_COEF: float = 0.5
DEFAULT_LEARNING_RATE: float = 3e-4
DEFAULT_N_STEPS: int = 2048
DEFAULT_BATCH_SIZE: int = 64
DEFAULT_N_EPOCHS: int = 10
DEFAULT_MAX_GRAD_NORM: float = 0.5
ADVANTAGE_EPS: float = 1e-8

# Adam
ADAM_BETA1: float = 0.9
ADAM_BETA2: float = 0.999
ADAM_EPS: float = 1e-8

# Weight features
STAT_NAMES: tuple[str, ...] = ("mean", "var", "p0", "p25", "p50", "p75", "p100")
PERCENTILES: tuple[float, ...] = (0.0, 25.0, 50.0, 75.0, 100.0)
STATS_PER_LAYER: int = len(STAT_NAMES)
DEFAULT_SELECTION_THRESHOLD: float = 0.3
PROPER_SIGNAL_PEARSON: float = 0.5
IMAGE_WIDTH: int = OBS_DIM

# Weight file format
WEIGHT_FILE_MAGIC: bytes = b"RLWB"
WEIGHT_FILE_VERSION: int = 1

# Predictors
DEFAULT_PREDICTOR_EPOCHS: int = 500
DEFAULT_CNN_EPOCHS: int = 100
DEFAULT_PREDICTOR_BATCH_SIZE: int = 32
DEFAULT_PREDICTOR_LR: float = 1e-3
DEFAULT_TEST_FRACTION: float = 0.2
DEFAULT_MIN_SAMPLES: int = 20
CNN_CHANNELS: int = 8
CNN_POOL_GRID: tuple[int, int] = (8, 8)
ARTIFACT_PARAMS_FILE: str = "params.rlwb"
ARTIFACT_META_FILE: str = "artifact.json"

# Dataset forge
DEFAULT_N_AGENTS: int = 200
DEFAULT_STEPS_PER_AGENT: int = 200_000
DEFAULT_N_EVAL_ENVS: int = 100
DEFAULT_TRAIN_SEED_BASE: int = 0
DEFAULT_EVAL_SEED_BASE: int = 1_000_000
MANIFEST_FORMAT_VERSION: int = 1
MANIFEST_FILE: str = "manifest.json"
WEIGHTS_DIR: str = "weights"

# Comparison harness
DEFAULT_COMPARE_AGENTS: int = 10
DEFAULT_COMPARE_STEPS: int = 200_000
DEFAULT_EVAL_EVERY: int = 5_000
DEFAULT_COMPARE_TRAIN_SEED_BASE: int = 500_000
DEFAULT_COMPARE_EVAL_SEED_BASE: int = 2_000_000
ARM_STANDARD: str = "standard"
ARM_UPGRADED: str = "upgraded"
ARMS: tuple[str, ...] = (ARM_STANDARD, ARM_UPGRADED)
SVG_SIZE_INCHES: tuple[float, float] = (8.0, 5.0)
SVG_AXES_RECT: tuple[float, float, float, float] = (0.1, 0.1, 0.8, 0.8)
SVG_HASH_SALT: str = "aiogenrl"
ARM_COLORS: dict[str, str] = {ARM_STANDARD: "#2ca02c", ARM_UPGRADED: "#9467bd"}

# CLI
CONFIG_ECHO_FILE: str = "config.json"
WORKERS_ENV_VAR: str = "AIOGENRL_WORKERS"
