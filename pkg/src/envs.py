"""
Attribute-composable 2D continuous-control environments
A force-controlled point-mass ball and a velocity-controlled planar
two-link arm, with the reaching base attribute and four stackable
attribute modifiers (obstacle, door, speed limit, force disturbance)
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, FrozenSet, Mapping, Optional, Sequence, Tuple

import numpy as np

from config.settings import (
    AGENT_RADIUS,
    ARM_LINK_LENGTHS,
    ATTRIBUTE_DEFAULTS,
    BALL_MASS,
    DT,
    EPISODE_HORIZON,
    FORCE_BOUND,
    REACH_RADIUS,
    START_POSITION,
    TARGET_POSITION,
    VELOCITY_BOUND,
    WORKSPACE_HALF_EXTENT,
)
from src.errors import ConfigurationError, EnvironmentFault, ResampleRequest

logger = logging.getLogger(__name__)

ACTION_DIM = 2


class AgentKind(str, Enum):
    BALL = "ball"
    ARM = "arm"


class AttributeKind(str, Enum):
    REACHING = "reaching"
    OBSTACLE = "obstacle"
    DOOR = "door"
    SPEED_LIMIT = "speed_limit"
    FORCE_DISTURBANCE = "force_disturbance"


@dataclass(frozen=True)
class AttributeSpec:
    """
    One attribute of the task: its kind, unique name and parameters

    Parameters missing from `params` take the defaults in
    config.settings.ATTRIBUTE_DEFAULTS; unknown keys are rejected.
    """
    kind: AttributeKind
    name: str = ""
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        try:
            kind = AttributeKind(self.kind)
        except ValueError:
            raise ConfigurationError(f"unknown attribute kind '{self.kind}'")

        defaults = ATTRIBUTE_DEFAULTS[kind.value]
        unknown = sorted(set(self.params) - set(defaults))
        if unknown:
            raise ConfigurationError(f"attribute '{self.name or kind.value}': unknown parameter(s) {unknown}")

        merged = dict(defaults)
        merged.update(self.params)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "name", self.name or kind.value)
        object.__setattr__(self, "params", merged)

    def param(self, key: str) -> Any:
        return self.params[key]

    @property
    def projection(self) -> Tuple[str, ...]:
        """Feature blocks that form S_i, in order"""
        if self.kind is AttributeKind.REACHING:
            return ("agent", "target")
        return ("agent", self.name)

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind.value, "name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class EpisodeLayout:
    """Per-episode placement drawn at reset"""
    target: np.ndarray
    obstacles: Mapping[str, Tuple[np.ndarray, float]] = field(default_factory=dict)
    phases: Mapping[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class WorldState:
    """
    Full simulator state at one time step

    `position` and `velocity` are the ball's, or the arm end effector's
    (derived from the joint state by forward kinematics).
    """
    position: np.ndarray
    velocity: np.ndarray
    target: np.ndarray
    t: int
    layout: EpisodeLayout
    features: Mapping[str, np.ndarray] = field(default_factory=dict)
    joint_angles: Optional[np.ndarray] = None
    joint_velocities: Optional[np.ndarray] = None
    contacts: FrozenSet[str] = frozenset()

    def agent_block(self) -> np.ndarray:
        if self.joint_angles is None:
            return np.concatenate([self.position, self.velocity])
        return np.concatenate([self.joint_angles, self.joint_velocities, self.position])


@dataclass(frozen=True)
class EnvInstance:
    """
    Environment configuration: agent, ordered attributes (index 0 = reaching),
    physics constants, episode horizon and workspace
    """
    agent: AgentKind = AgentKind.BALL
    attributes: Tuple[AttributeSpec, ...] = (AttributeSpec(AttributeKind.REACHING),)
    dt: float = DT
    mass: float = BALL_MASS
    force_bound: float = FORCE_BOUND
    velocity_bound: float = VELOCITY_BOUND
    agent_radius: float = AGENT_RADIUS
    reach_radius: float = REACH_RADIUS
    workspace_half_extent: float = WORKSPACE_HALF_EXTENT
    horizon: int = EPISODE_HORIZON
    start: Tuple[float, float] = START_POSITION
    target: Tuple[float, float] = TARGET_POSITION
    link_lengths: Tuple[float, float] = ARM_LINK_LENGTHS

    def __post_init__(self):
        try:
            object.__setattr__(self, "agent", AgentKind(self.agent))
        except ValueError:
            raise ConfigurationError(f"unknown agent kind '{self.agent}'")
        attributes = tuple(self.attributes)
        object.__setattr__(self, "attributes", attributes)
        object.__setattr__(self, "start", tuple(float(c) for c in self.start))
        object.__setattr__(self, "target", tuple(float(c) for c in self.target))
        object.__setattr__(self, "link_lengths", tuple(float(c) for c in self.link_lengths))

        if not attributes or attributes[0].kind is not AttributeKind.REACHING:
            raise ConfigurationError("environment attribute 0 must be the reaching base attribute")
        if sum(spec.kind is AttributeKind.REACHING for spec in attributes) != 1:
            raise ConfigurationError("environment must have exactly one reaching attribute")
        names = [spec.name for spec in attributes]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"attribute names must be unique, got {names}")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if self.mass <= 0 or self.force_bound <= 0 or self.velocity_bound <= 0:
            raise ConfigurationError("mass and action/velocity bounds must be positive")
        for label, point in (("start", self.start), ("target", self.target)):
            if len(point) != 2 or max(abs(c) for c in point) > self.workspace_half_extent:
                raise ConfigurationError(f"{label} position {point} lies outside the workspace")

    @property
    def base(self) -> AttributeSpec:
        return self.attributes[0]

    @property
    def action_dim(self) -> int:
        return ACTION_DIM

    @property
    def action_bound(self) -> float:
        return self.force_bound if self.agent is AgentKind.BALL else self.velocity_bound

    def attribute(self, name: str) -> AttributeSpec:
        for spec in self.attributes:
            if spec.name == name:
                return spec
        raise ConfigurationError(f"environment has no attribute named '{name}'")

    def with_attributes(self, attributes: Sequence[AttributeSpec]) -> "EnvInstance":
        return replace(self, attributes=tuple(attributes))

    def feature_dim(self, spec: AttributeSpec) -> int:
        agent_dim = 4 if self.agent is AgentKind.BALL else 6
        return agent_dim + FEATURE_SIZES[spec.kind]

    def sample_layout(self, rng: np.random.Generator) -> EpisodeLayout:
        return sample_layout(self, rng)

    def reset(self, initial_position=None, rng=None, layout=None) -> WorldState:
        return reset(self, initial_position, rng, layout)

    def step(self, state: WorldState, action) -> Tuple[WorldState, np.ndarray, bool]:
        return step(self, state, action)

    def reached(self, state: WorldState) -> bool:
        return reached(self, state)

    def is_valid_initial_position(self, position, layout: Optional[EpisodeLayout] = None) -> bool:
        return is_valid_initial_position(self, position, layout)


FEATURE_SIZES: Dict[AttributeKind, int] = {
    AttributeKind.REACHING: 2,          # target position
    AttributeKind.OBSTACLE: 3,          # center x, center y, radius
    AttributeKind.DOOR: 3,              # sin phase, cos phase, open flag
    AttributeKind.SPEED_LIMIT: 2,       # current limit, current speed
    AttributeKind.FORCE_DISTURBANCE: 2, # current disturbance force
}


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def _path_frame(env: EnvInstance) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Start point, unit direction start -> target, and its left normal"""
    start = np.asarray(env.start, dtype=np.float64)
    delta = np.asarray(env.target, dtype=np.float64) - start
    length = float(np.linalg.norm(delta))
    direction = delta / length if length > 0 else np.array([1.0, 0.0])
    normal = np.array([-direction[1], direction[0]])
    return start, direction, normal


def _door_geometry(env: EnvInstance, spec: AttributeSpec) -> Tuple[np.ndarray, np.ndarray, float]:
    start, direction, _ = _path_frame(env)
    delta = np.asarray(env.target, dtype=np.float64) - start
    point = start + spec.param("fraction") * delta
    contact = env.agent_radius + 0.5 * spec.param("thickness")
    return point, direction, contact


def _clamp_norm(vector: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm > bound:
        return vector * (bound / norm)
    return vector


def forward_kinematics(link_lengths: Sequence[float], joint_angles) -> np.ndarray:
    """End-effector position of the planar two-link arm"""
    l1, l2 = link_lengths
    q1, q2 = joint_angles
    return np.array([
        l1 * math.cos(q1) + l2 * math.cos(q1 + q2),
        l1 * math.sin(q1) + l2 * math.sin(q1 + q2),
    ])


def arm_jacobian(link_lengths: Sequence[float], joint_angles) -> np.ndarray:
    """d(end-effector position) / d(joint angles), 2x2"""
    l1, l2 = link_lengths
    q1, q2 = joint_angles
    s1, c1 = math.sin(q1), math.cos(q1)
    s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
    return np.array([
        [-l1 * s1 - l2 * s12, -l2 * s12],
        [l1 * c1 + l2 * c12, l2 * c12],
    ])


def inverse_kinematics(link_lengths: Sequence[float], position) -> np.ndarray:
    """
    Elbow-positive joint angles placing the end effector at `position`

    Raises:
        ResampleRequest: The position is outside the arm's reach
    """
    l1, l2 = link_lengths
    x, y = float(position[0]), float(position[1])
    cos_q2 = (x * x + y * y - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    if abs(cos_q2) > 1.0:
        raise ResampleRequest(f"position ({x:.3f}, {y:.3f}) is out of the arm's reach")
    q2 = math.acos(cos_q2)
    q1 = math.atan2(y, x) - math.atan2(l2 * math.sin(q2), l1 + l2 * math.cos(q2))
    return np.array([q1, q2])


# ---------------------------------------------------------------------------
# Time-variant schedules
# ---------------------------------------------------------------------------

def door_is_open(spec: AttributeSpec, t: int) -> bool:
    """Door is closed for the first (1 - w) of every period, then open"""
    period = int(spec.param("period"))
    return (t % period) >= period * (1.0 - spec.param("open_fraction"))


def speed_limit_at(spec: AttributeSpec, t: int) -> float:
    """Speed limit in force at step t (limits cycle every `segment` steps)"""
    limits = list(spec.param("limits"))
    return float(limits[(t // int(spec.param("segment"))) % len(limits)])


def apply_force_disturbance(spec: AttributeSpec, phases: np.ndarray, t: float) -> np.ndarray:
    """
    F(t) = A * [sin(w t + phi_1), sin(w t + phi_2)]

    Args:
        spec: Force-disturbance attribute
        phases: The two seeded phase offsets
        t: Time in seconds

    Returns:
        np.ndarray: Disturbance force in newtons
    """
    amplitude = float(spec.param("amplitude"))
    omega = float(spec.param("omega"))
    return amplitude * np.sin(omega * t + np.asarray(phases, dtype=np.float64))


def _attribute_features(
    env: EnvInstance,
    spec: AttributeSpec,
    layout: EpisodeLayout,
    t: int,
    velocity: np.ndarray
) -> Optional[np.ndarray]:
    if spec.kind is AttributeKind.OBSTACLE:
        center, radius = layout.obstacles[spec.name]
        return np.array([center[0], center[1], radius])
    if spec.kind is AttributeKind.DOOR:
        angle = 2.0 * math.pi * t / int(spec.param("period"))
        return np.array([math.sin(angle), math.cos(angle), 1.0 if door_is_open(spec, t) else 0.0])
    if spec.kind is AttributeKind.SPEED_LIMIT:
        return np.array([speed_limit_at(spec, t), float(np.linalg.norm(velocity))])
    if spec.kind is AttributeKind.FORCE_DISTURBANCE:
        return apply_force_disturbance(spec, layout.phases[spec.name], t * env.dt)
    return None


def _features(env: EnvInstance, layout: EpisodeLayout, t: int, velocity: np.ndarray) -> Dict[str, np.ndarray]:
    features = {}
    for spec in env.attributes:
        block = _attribute_features(env, spec, layout, t, velocity)
        if block is not None:
            features[spec.name] = block
    return features


# ---------------------------------------------------------------------------
# Reset / step
# ---------------------------------------------------------------------------

def sample_layout(env: EnvInstance, rng: np.random.Generator) -> EpisodeLayout:
    """
    Draw the per-episode layout: obstacles between start and target,
    disturbance phases
    """
    start, direction, normal = _path_frame(env)
    delta = np.asarray(env.target, dtype=np.float64) - start
    obstacles = {}
    phases = {}
    for spec in env.attributes:
        if spec.kind is AttributeKind.OBSTACLE:
            axial = spec.param("axial_jitter") * rng.uniform(-1.0, 1.0)
            lateral = spec.param("lateral_jitter") * rng.uniform(-1.0, 1.0)
            center = start + spec.param("fraction") * delta + axial * direction + lateral * normal
            obstacles[spec.name] = (center, float(spec.param("radius")))
        elif spec.kind is AttributeKind.FORCE_DISTURBANCE:
            seed = spec.param("seed")
            # a spawned child leaves the episode stream untouched
            source = np.random.default_rng(seed) if seed is not None else rng.spawn(1)[0]
            phases[spec.name] = source.uniform(0.0, 2.0 * math.pi, size=2)
    return EpisodeLayout(np.asarray(env.target, dtype=np.float64), obstacles, phases)


def is_valid_initial_position(env: EnvInstance, position, layout: Optional[EpisodeLayout] = None) -> bool:
    """Inside the workspace, reachable by the agent and clear of obstacles"""
    position = np.asarray(position, dtype=np.float64)
    if position.shape != (2,) or not np.all(np.isfinite(position)):
        return False
    if np.any(np.abs(position) > env.workspace_half_extent):
        return False
    if env.agent is AgentKind.ARM:
        l1, l2 = env.link_lengths
        distance = float(np.linalg.norm(position))
        if distance > l1 + l2 or distance < abs(l1 - l2):
            return False
    if layout is not None:
        for center, radius in layout.obstacles.values():
            if np.linalg.norm(position - center) < env.agent_radius + radius:
                return False
    return True


def reset(
    env: EnvInstance,
    initial_position=None,
    rng: Optional[np.random.Generator] = None,
    layout: Optional[EpisodeLayout] = None
) -> WorldState:
    """
    Start an episode

    Args:
        env: Environment configuration
        initial_position: Agent (or end-effector) position; the start point when None
        rng: Generator for the layout draw (seed 0 when None)
        layout: Pre-drawn layout; drawn from rng when None

    Returns:
        WorldState: State at time index 0

    Raises:
        ResampleRequest: The position is outside the workspace, unreachable or inside an obstacle
    """
    if layout is None:
        layout = sample_layout(env, rng if rng is not None else np.random.default_rng(0))
    position = np.asarray(env.start if initial_position is None else initial_position, dtype=np.float64)
    if not is_valid_initial_position(env, position, layout):
        raise ResampleRequest(f"initial position {position.tolist()} rejected")

    velocity = np.zeros(2)
    joint_angles = joint_velocities = None
    if env.agent is AgentKind.ARM:
        joint_angles = inverse_kinematics(env.link_lengths, position)
        joint_velocities = np.zeros(2)
        position = forward_kinematics(env.link_lengths, joint_angles)

    return WorldState(
        position=position,
        velocity=velocity,
        target=layout.target,
        t=0,
        layout=layout,
        features=_features(env, layout, 0, velocity),
        joint_angles=joint_angles,
        joint_velocities=joint_velocities,
    )


def _signed_door_distance(point: np.ndarray, door_point: np.ndarray, normal: np.ndarray) -> float:
    return float(np.dot(point - door_point, normal))


def step(env: EnvInstance, state: WorldState, action) -> Tuple[WorldState, np.ndarray, bool]:
    """
    Advance one time step

    Args:
        env: Environment configuration
        state: Current state
        action: Force (ball) or joint-velocity command (arm), clamped to the action bound

    Returns:
        Tuple[WorldState, np.ndarray, bool]: Next state, reward per attribute
        (aligned with env.attributes) and the done flag
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACTION_DIM,):
        raise ConfigurationError(f"action must have shape ({ACTION_DIM},), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise EnvironmentFault("non-finite action", step=state.t)

    bound = env.action_bound
    command = np.clip(action, -bound, bound)

    disturbance = np.zeros(2)
    for spec in env.attributes:
        if spec.kind is AttributeKind.FORCE_DISTURBANCE:
            disturbance = disturbance + apply_force_disturbance(spec, state.layout.phases[spec.name], state.t * env.dt)

    joint_angles = joint_velocities = None
    if env.agent is AgentKind.BALL:
        velocity = _clamp_norm(state.velocity + (command + disturbance) * env.dt / env.mass, env.velocity_bound)
        position = np.clip(state.position + velocity * env.dt, -env.workspace_half_extent, env.workspace_half_extent)
    else:
        joint_velocities = np.clip(command + disturbance * env.dt / env.mass, -env.velocity_bound, env.velocity_bound)
        joint_angles = state.joint_angles + joint_velocities * env.dt
        position = forward_kinematics(env.link_lengths, joint_angles)
        velocity = arm_jacobian(env.link_lengths, joint_angles) @ joint_velocities

    contacts = set()
    for spec in env.attributes:
        if spec.kind is not AttributeKind.DOOR or door_is_open(spec, state.t):
            continue
        door_point, normal, contact = _door_geometry(env, spec)
        before = _signed_door_distance(state.position, door_point, normal)
        after = _signed_door_distance(position, door_point, normal)
        crossed = before * after < 0.0
        entering = abs(after) < contact and abs(after) <= abs(before)
        if crossed or entering:
            contacts.add(spec.name)
            position = state.position
            velocity = np.zeros(2)
            if env.agent is AgentKind.ARM:
                joint_angles = state.joint_angles
                joint_velocities = np.zeros(2)

    t = state.t + 1
    next_state = WorldState(
        position=position,
        velocity=velocity,
        target=state.target,
        t=t,
        layout=state.layout,
        features=_features(env, state.layout, t, velocity),
        joint_angles=joint_angles,
        joint_velocities=joint_velocities,
        contacts=frozenset(contacts),
    )
    if not (np.all(np.isfinite(position)) and np.all(np.isfinite(velocity))):
        raise EnvironmentFault("non-finite state", step=state.t)

    rewards = np.array([REWARD_FUNCTIONS[spec.kind](env, spec, next_state, command) for spec in env.attributes])
    done = reached(env, next_state) or t >= env.horizon
    return next_state, rewards, done


def reached(env: EnvInstance, state: WorldState) -> bool:
    """Whether the agent is within the reach radius of the target"""
    return float(np.linalg.norm(state.position - state.target)) < env.reach_radius


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------

def reward_reaching(env: EnvInstance, spec: AttributeSpec, state: WorldState, action) -> float:
    """Sparse goal bonus with a living cost; optional distance shaping"""
    distance = float(np.linalg.norm(state.position - state.target))
    reward = -float(spec.param("step_cost"))
    if distance < env.reach_radius:
        reward += float(spec.param("reward_goal"))
    if spec.param("shaped"):
        reward -= float(spec.param("shaping_k")) * distance
    return reward


def reward_obstacle(env: EnvInstance, spec: AttributeSpec, state: WorldState, action) -> float:
    center_x, center_y, radius = state.features[spec.name]
    distance = float(np.linalg.norm(state.position - np.array([center_x, center_y])))
    if distance < env.agent_radius + radius:
        return -float(spec.param("penalty"))
    return 0.0


def reward_door(env: EnvInstance, spec: AttributeSpec, state: WorldState, action) -> float:
    if spec.name in state.contacts:
        return -float(spec.param("penalty"))
    if door_is_open(spec, state.t):
        return 0.0
    door_point, normal, contact = _door_geometry(env, spec)
    if abs(_signed_door_distance(state.position, door_point, normal)) < contact:
        return -float(spec.param("penalty"))
    return 0.0


def reward_speed_limit(env: EnvInstance, spec: AttributeSpec, state: WorldState, action) -> float:
    excess = float(np.linalg.norm(state.velocity)) - speed_limit_at(spec, state.t)
    return -float(spec.param("penalty")) * max(0.0, excess)


def reward_force_disturbance(env: EnvInstance, spec: AttributeSpec, state: WorldState, action) -> float:
    return 0.0


REWARD_FUNCTIONS: Dict[AttributeKind, Callable[..., float]] = {
    AttributeKind.REACHING: reward_reaching,
    AttributeKind.OBSTACLE: reward_obstacle,
    AttributeKind.DOOR: reward_door,
    AttributeKind.SPEED_LIMIT: reward_speed_limit,
    AttributeKind.FORCE_DISTURBANCE: reward_force_disturbance,
}


# ---------------------------------------------------------------------------
# State projection
# ---------------------------------------------------------------------------

def project_state(state: WorldState, spec: AttributeSpec) -> np.ndarray:
    """
    The S_i feature vector of one attribute

    Layout: agent block (ball: position, velocity; arm: joint angles,
    joint velocities, end-effector position) followed by the attribute
    block (reaching: target position; others: their own features).
    """
    blocks = [state.agent_block()]
    if spec.kind is AttributeKind.REACHING:
        blocks.append(state.target)
    else:
        if spec.name not in state.features:
            raise ConfigurationError(f"world state has no features for attribute '{spec.name}'")
        blocks.append(state.features[spec.name])
    return np.concatenate(blocks)


def project_many(state: WorldState, specs: Sequence[AttributeSpec]) -> np.ndarray:
    """Concatenated projections of several attributes"""
    return np.concatenate([project_state(state, spec) for spec in specs])
