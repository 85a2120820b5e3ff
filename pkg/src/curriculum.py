"""
Curriculum over the initial-state random level
Reward-gated geometric growth of the sampling radius (forward CL around
the start point, reverse CL around the target)
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from config.settings import CURRICULUM_DEFAULTS, MAX_RESAMPLE_TRIES
from src.envs import EnvInstance, EpisodeLayout
from src.errors import ConfigurationError, EnvironmentConfigurationError

logger = logging.getLogger(__name__)


class CurriculumMode(str, Enum):
    FORWARD = "forward"
    REVERSE = "reverse"


@dataclass(frozen=True)
class CurriculumState:
    """
    Random level, long-term reward queue and growth settings

    The level is kept as initial_level * growth ** level_increases (capped
    at terminal_level) so every realized value is an exact member of the
    geometric sequence.
    """
    initial_level: float = CURRICULUM_DEFAULTS["initial_level"]
    terminal_level: float = CURRICULUM_DEFAULTS["terminal_level"]
    growth: float = 1.0 + CURRICULUM_DEFAULTS["increase_rate"]
    threshold: float = CURRICULUM_DEFAULTS["threshold"]
    capacity: int = CURRICULUM_DEFAULTS["capacity"]
    mode: CurriculumMode = CurriculumMode.FORWARD
    level_increases: int = 0
    long_term_rewards: Tuple[float, ...] = field(default_factory=tuple)
    done: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "mode", CurriculumMode(self.mode))
        except ValueError:
            raise ConfigurationError(f"curriculum.mode: unknown mode '{self.mode}'")
        if self.initial_level <= 0:
            raise ConfigurationError("curriculum.initial_level must be positive")
        if self.terminal_level < self.initial_level:
            raise ConfigurationError("curriculum.terminal_level must not be below initial_level")
        if self.growth <= 1.0:
            raise ConfigurationError("curriculum growth factor must exceed 1")
        if self.capacity < 1:
            raise ConfigurationError("curriculum.capacity must be at least 1")
        object.__setattr__(self, "long_term_rewards", tuple(float(r) for r in self.long_term_rewards))

    @property
    def random_level(self) -> float:
        return min(self.initial_level * self.growth ** self.level_increases, self.terminal_level)


def terminal_reached(state: CurriculumState) -> bool:
    """True once the sampling disc has grown to the terminal level"""
    return state.random_level >= state.terminal_level


def curriculum_update(state: CurriculumState, new_episode_rewards: Sequence[float]) -> CurriculumState:
    """
    Append episode returns and promote the level when the full queue
    averages above the threshold

    Args:
        state: Current curriculum state
        new_episode_rewards: Undiscounted returns of the episodes just finished

    Returns:
        CurriculumState: Updated state (level multiplied by the growth
        factor and queue cleared on promotion)
    """
    if terminal_reached(state):
        return replace(state, done=True)

    queue = (state.long_term_rewards + tuple(float(r) for r in new_episode_rewards))[-state.capacity:]
    if len(queue) == state.capacity and float(np.mean(queue)) > state.threshold:
        promoted = replace(state, level_increases=state.level_increases + 1, long_term_rewards=())
        promoted = replace(promoted, done=terminal_reached(promoted))
        logger.info(
            f"Curriculum level {state.random_level:.4g} -> {promoted.random_level:.4g} "
            f"(queue average {np.mean(queue):.4g} > {state.threshold:.4g})"
        )
        return promoted
    return replace(state, long_term_rewards=queue)


def anchor_point(state: CurriculumState, env: EnvInstance, layout: Optional[EpisodeLayout] = None) -> np.ndarray:
    if state.mode is CurriculumMode.REVERSE:
        return np.asarray(layout.target if layout is not None else env.target, dtype=np.float64)
    return np.asarray(env.start, dtype=np.float64)


def sample_initial(
    state: CurriculumState,
    env: EnvInstance,
    rng: np.random.Generator,
    layout: Optional[EpisodeLayout] = None
) -> np.ndarray:
    """
    Uniform initial position in the disc of radius random_level about the anchor

    Positions outside the workspace, out of the agent's reach or inside an
    obstacle of `layout` are redrawn.

    Args:
        state: Curriculum state (level, mode)
        env: Environment configuration
        rng: Random generator owned by the caller
        layout: Episode layout whose obstacles must be avoided

    Returns:
        np.ndarray: Initial agent position

    Raises:
        EnvironmentConfigurationError: No valid position after the retry budget
    """
    anchor = anchor_point(state, env, layout)
    level = state.random_level
    for _ in range(MAX_RESAMPLE_TRIES):
        radius = level * math.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2.0 * math.pi)
        position = anchor + radius * np.array([math.cos(angle), math.sin(angle)])
        if env.is_valid_initial_position(position, layout):
            return position
    raise EnvironmentConfigurationError(
        f"no valid initial position within {level:.4g} m of {anchor.tolist()} after {MAX_RESAMPLE_TRIES} tries"
    )
