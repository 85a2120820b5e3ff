"""
Configuration settings for the cascade attribute learning network
"""
import math
from typing import Dict, List, Tuple

# Workspace and Physics Configuration
WORKSPACE_HALF_EXTENT = 5.0  # workspace is [-5, 5] x [-5, 5] meters
DT = 0.05                    # seconds per step
BALL_MASS = 1.0              # kg
FORCE_BOUND = 5.0            # N per axis (ball action bound)
VELOCITY_BOUND = 2.0         # m/s for the ball, rad/s for arm joints
AGENT_RADIUS = 0.1           # m
REACH_RADIUS = 0.25          # m
EPISODE_HORIZON = 200        # steps

START_POSITION: Tuple[float, float] = (-1.5, 0.0)
TARGET_POSITION: Tuple[float, float] = (1.5, 0.0)

# Planar arm (base at the origin)
ARM_LINK_LENGTHS: Tuple[float, float] = (2.5, 2.5)

AGENT_KINDS: List[str] = ["ball", "arm"]

# Reward Configuration
REWARD_GOAL = 10.0
STEP_COST = 0.01
SHAPING_COEFFICIENT = 0.1

# Attribute Defaults (keyed by attribute kind)
ATTRIBUTE_DEFAULTS: Dict[str, Dict] = {
    "reaching": {
        "shaped": False,
        "shaping_k": SHAPING_COEFFICIENT,
        "reward_goal": REWARD_GOAL,
        "step_cost": STEP_COST,
    },
    "obstacle": {
        "radius": 0.5,
        "penalty": 1.0,
        "fraction": 0.5,       # position along start -> target
        "lateral_jitter": 0.3, # m, perpendicular to start -> target
        "axial_jitter": 0.1,   # m, along start -> target
    },
    "door": {
        "penalty": 1.0,
        "period": 100,         # steps
        "open_fraction": 0.3,  # share of the period the door is open
        "fraction": 0.6,       # position along start -> target
        "thickness": 0.2,      # m
    },
    "speed_limit": {
        "penalty": 1.0,
        "limits": [1.5, 1.0],  # m/s, cycled
        "segment": 50,         # steps per schedule segment
    },
    "force_disturbance": {
        "amplitude": 2.0,      # N
        "omega": 1.0,          # rad/s
        "seed": None,          # fixed phases when set, per-episode otherwise
    },
}

ATTRIBUTE_KINDS: List[str] = list(ATTRIBUTE_DEFAULTS.keys())

# Network Configuration
HIDDEN_SIZES: Tuple[int, ...] = (64, 64)
INITIAL_LOG_STD = math.log(0.5)
OUTPUT_LAYER_SCALE = 0.01

# RL Configuration (standard PPO settings)
RL_DEFAULTS: Dict = {
    "gamma": 0.99,
    "gae_lambda": 0.95,
    "clip_epsilon": 0.2,
    "kl_beta": 1.0,
    "loss_variant": "clip",
    "epochs": 10,
    "minibatch_size": 64,
    "horizon": 2048,
    "iterations": 500,
    "value_coef": 0.5,
    "entropy_coef": 0.0,
    "learning_rate": 3e-4,
    "max_grad_norm": 0.5,
    "normalize_advantages": True,
    "workers": 1,
    "seed": 0,
    "curriculum_patience": 50,
    "stop_at_terminal": False,
}

LOSS_VARIANTS: List[str] = ["pg", "kl", "clip"]

# Adam Configuration
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8

# Curriculum Configuration
CURRICULUM_DEFAULTS: Dict = {
    "mode": "forward",
    "initial_level": 0.1,
    "terminal_level": WORKSPACE_HALF_EXTENT,
    "increase_rate": 0.2,               # lambda_CL = 1 + rate
    "threshold": 0.5 * REWARD_GOAL,     # undiscounted episode return
    "capacity": 20,                     # episodes in the long-term queue
}

CURRICULUM_MODES: List[str] = ["forward", "reverse"]
MAX_RESAMPLE_TRIES = 100

# Cascade Configuration
CASCADE_DEFAULTS: Dict = {
    "alpha_start": 0.1,
    "ramp_fraction": 0.4,
    "penalty_coef": 0.01,
    "strict_fingerprint": False,
    "finetune": False,
}

# Harness Configuration
EVAL_EPISODES = 200
CSV_FLOAT_FORMAT = "%.17g"
EXPERIMENT_KINDS: List[str] = [
    "train_base", "train_attribute", "assemble_eval", "compare_baseline"
]
COMPARISON_ARMS: List[str] = ["calnet_cl", "baseline_cl", "baseline_rcl"]

TRAINING_LOG_COLUMNS: List[str] = [
    "iteration", "mean_episode_reward", "mean_reward_base", "mean_reward_attr",
    "mean_penalty", "random_level", "loss", "kl_estimate",
]

# Environment variable overrides
SEED_ENV_VAR = "CALNET_SEED"
OUTPUT_DIR_ENV_VAR = "CALNET_OUTPUT_DIR"

# Exit codes
EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_TRAINING_FAULT = 3
EXIT_IO_ERROR = 4
