"""
Compensative attribute cascade
Attribute modules connected in series behind a frozen base policy; each
module reads its attribute's state and the incoming action and adds a
weighted compensative action to it
"""
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.settings import CASCADE_DEFAULTS, HIDDEN_SIZES, INITIAL_LOG_STD, OUTPUT_LAYER_SCALE
from src.curriculum import CurriculumState
from src.envs import AttributeSpec, EnvInstance, WorldState, project_many, project_state
from src.errors import ConfigurationError, FingerprintMismatchError
from src.nncore import (
    GaussianPolicyParams,
    MlpParams,
    Tensors,
    gaussian_log_prob,
    gaussian_mean,
    gaussian_sample,
    init_gaussian_policy,
    init_value_net,
    mlp_forward,
    mlp_from_tensors,
    mlp_to_tensors,
    policy_from_tensors,
    policy_to_tensors,
)
from src.rlcore import ActorStep, IterationHook, PolicyActor, RlConfig, TrainingResult, parameter_rng, train

logger = logging.getLogger(__name__)

SAMPLE = "sample"
MEAN = "mean"


@dataclass(frozen=True)
class AlphaSchedule:
    """Linear ramp of the blend weight from `start` to 1 over the first `ramp_fraction` of training"""
    start: float = CASCADE_DEFAULTS["alpha_start"]
    ramp_fraction: float = CASCADE_DEFAULTS["ramp_fraction"]

    def __post_init__(self):
        if not 0.0 <= self.start < 1.0:
            raise ConfigurationError("cascade.alpha_start must lie in [0, 1)")
        if not 0.0 < self.ramp_fraction <= 1.0:
            raise ConfigurationError("cascade.ramp_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class AttributeModule:
    """
    Compensate network of one attribute

    The Gaussian head reads S_i followed by the incoming action. The base
    fingerprint identifies the base policy the module was trained behind.
    """
    spec: AttributeSpec
    head: GaussianPolicyParams
    alpha: float = 1.0
    penalty_coef: float = CASCADE_DEFAULTS["penalty_coef"]
    trained: bool = False
    base_fingerprint: str = ""
    schedule: AlphaSchedule = field(default_factory=AlphaSchedule)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"module '{self.spec.name}': alpha {self.alpha} outside [0, 1]")
        if self.penalty_coef < 0:
            raise ConfigurationError(f"module '{self.spec.name}': penalty coefficient must be non-negative")
        if self.head.in_dim <= self.head.action_dim:
            raise ConfigurationError(f"module '{self.spec.name}': head input must hold S_i and the incoming action")

    @property
    def action_dim(self) -> int:
        return self.head.action_dim


@dataclass(frozen=True)
class CascadeStack:
    """
    Base policy followed by attribute modules in evaluation order

    `base_specs` lists the attributes whose projections form the base input
    (reaching only for a CALNet base, every attribute for a from-scratch
    baseline). `value_net` belongs to whichever head was trained last.
    """
    base: GaussianPolicyParams
    base_specs: Tuple[AttributeSpec, ...]
    modules: Tuple[AttributeModule, ...] = ()
    value_net: Optional[MlpParams] = None
    action_bound: float = math.inf

    def __post_init__(self):
        object.__setattr__(self, "base_specs", tuple(self.base_specs))
        object.__setattr__(self, "modules", tuple(self.modules))
        if not self.base_specs:
            raise ConfigurationError("cascade stack needs at least one base attribute")
        for module in self.modules:
            if module.action_dim != self.base.action_dim:
                raise ConfigurationError(
                    f"module '{module.spec.name}' action dimension {module.action_dim} "
                    f"does not match base action dimension {self.base.action_dim}"
                )

    @property
    def action_dim(self) -> int:
        return self.base.action_dim

    @property
    def attribute_names(self) -> List[str]:
        return [spec.name for spec in self.base_specs] + [m.spec.name for m in self.modules]


# ---------------------------------------------------------------------------
# Forward composition
# ---------------------------------------------------------------------------

def compensate_forward(
    module: AttributeModule,
    s_i,
    a_prev,
    mode: str = MEAN,
    rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """
    Compensative action of one module

    Args:
        module: Attribute module
        s_i: Projection of the world onto the module's attribute
        a_prev: Action produced by the preceding stage
        mode: "mean" (deterministic) or "sample"
        rng: Generator for sample mode

    Returns:
        np.ndarray: Compensative action a_c
    """
    x = _module_input(module, s_i, a_prev)
    if mode == SAMPLE:
        if rng is None:
            raise ConfigurationError("sample mode needs a random generator")
        return gaussian_sample(module.head, x, rng)
    return gaussian_mean(module.head, x)


def _module_input(module: AttributeModule, s_i, a_prev) -> np.ndarray:
    x = np.concatenate([np.asarray(s_i, dtype=np.float64), np.asarray(a_prev, dtype=np.float64)])
    if x.shape != (module.head.in_dim,):
        raise ConfigurationError(
            f"module '{module.spec.name}' expects input dimension {module.head.in_dim}, got {x.shape[0]}"
        )
    return x


def blend(a_prev, a_c, alpha: float, action_bound: float = math.inf) -> np.ndarray:
    """a = clip(a_prev + alpha * a_c) componentwise to the action bound"""
    return np.clip(np.asarray(a_prev, dtype=np.float64) + alpha * np.asarray(a_c, dtype=np.float64),
                   -action_bound, action_bound)


def alpha_at(schedule: AlphaSchedule, iteration: int, total_iterations: int) -> float:
    """Blend weight at a training iteration (1 from ceil(f * total) onwards)"""
    ramp_end = math.ceil(schedule.ramp_fraction * total_iterations)
    if ramp_end <= 0 or iteration >= ramp_end:
        return 1.0
    return schedule.start + (1.0 - schedule.start) * iteration / ramp_end


def comp_penalty(a_c, penalty_coef: float) -> float:
    """-c * ||a_c||^2"""
    a_c = np.asarray(a_c, dtype=np.float64)
    return -penalty_coef * float(np.dot(a_c, a_c))


def base_action(stack: CascadeStack, world: WorldState, mode: str = MEAN,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Action a_0 of the base policy, clamped to the action bound

    Args:
        stack: Stack whose base policy acts
        world: Current state
        mode: MEAN or SAMPLE
        rng: Generator for SAMPLE mode

    Returns:
        np.ndarray: Base action
    """
    observation = project_many(world, stack.base_specs)
    raw = gaussian_sample(stack.base, observation, rng) if mode == SAMPLE else gaussian_mean(stack.base, observation)
    return np.clip(raw, -stack.action_bound, stack.action_bound)


def stack_act(
    stack: CascadeStack,
    world: WorldState,
    mode: str = MEAN,
    rng: Optional[np.random.Generator] = None
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """
    Run the base and every module in order

    Args:
        stack: Cascade to evaluate
        world: Current world state
        mode: "mean" for evaluation, "sample" for stochastic acting
        rng: Generator for sample mode

    Returns:
        Tuple[np.ndarray, List[np.ndarray]]: Final action and the
        compensative action of each module
    """
    action = base_action(stack, world, mode, rng)
    compensations = []
    for module in stack.modules:
        a_c = compensate_forward(module, project_state(world, module.spec), action, mode, rng)
        action = blend(action, a_c, module.alpha, stack.action_bound)
        compensations.append(a_c)
    return action, compensations


def base_fingerprint(base: GaussianPolicyParams) -> str:
    """64-bit BLAKE2b hash (hex) of the base tensors in name order"""
    digest = hashlib.blake2b(digest_size=8)
    for name, tensor in sorted(policy_to_tensors(base, "policy").items()):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Actors
# ---------------------------------------------------------------------------

def init_base_stack(
    env: EnvInstance,
    rng: np.random.Generator,
    specs: Optional[Sequence[AttributeSpec]] = None,
    hidden_sizes: Sequence[int] = HIDDEN_SIZES
) -> CascadeStack:
    """
    Fresh base policy with its value net

    With `specs` omitted the base reads the reaching attribute only; pass
    every environment attribute for a from-scratch baseline.
    """
    specs = tuple(specs) if specs is not None else (env.base,)
    in_dim = sum(env.feature_dim(spec) for spec in specs)
    return CascadeStack(
        base=init_gaussian_policy(in_dim, env.action_dim, rng, hidden_sizes),
        base_specs=specs,
        value_net=init_value_net(in_dim, rng, hidden_sizes),
        action_bound=env.action_bound,
    )


def base_policy_actor(stack: CascadeStack) -> PolicyActor:
    """Trainable actor over the stack's base policy (module-free stacks only)"""
    if stack.modules:
        raise ConfigurationError("the base policy can only be trained on a stack without modules")
    if stack.value_net is None:
        raise ConfigurationError("stack has no value network to train")
    return PolicyActor(stack.base, stack.value_net, stack.base_specs, stack.action_bound)


def stack_from_policy_actor(actor: PolicyActor) -> CascadeStack:
    """Module-free stack around a trained base actor"""
    return CascadeStack(
        base=actor.head,
        base_specs=actor.specs,
        value_net=actor.value_net,
        action_bound=actor.action_bound,
    )


@dataclass(frozen=True)
class CascadeActor:
    """
    Acting policy while one attribute module trains

    The frozen prefix stack acts in mean mode; only the tail module's head
    samples. Value inputs are the base projection followed by S_i.
    """
    prefix: CascadeStack
    module: AttributeModule
    value_net: MlpParams

    @property
    def head(self) -> GaussianPolicyParams:
        return self.module.head

    def value_input(self, world: WorldState) -> np.ndarray:
        return np.concatenate([project_many(world, self.prefix.base_specs), project_state(world, self.module.spec)])

    def act(self, world: WorldState, rng: np.random.Generator, deterministic: bool = False) -> ActorStep:
        a_prev, _ = stack_act(self.prefix, world, MEAN)
        x = _module_input(self.module, project_state(world, self.module.spec), a_prev)
        a_c = gaussian_mean(self.module.head, x) if deterministic else gaussian_sample(self.module.head, x, rng)
        value_input = self.value_input(world)
        return ActorStep(
            env_action=blend(a_prev, a_c, self.module.alpha, self.prefix.action_bound),
            head_input=x,
            head_sample=a_c,
            log_prob=gaussian_log_prob(self.module.head, x, a_c),
            value=float(mlp_forward(self.value_net, value_input)[0]),
            value_input=value_input,
            penalty=comp_penalty(a_c, self.module.penalty_coef),
            compensations=(a_c,),
        )

    def value(self, world: WorldState) -> float:
        return float(mlp_forward(self.value_net, self.value_input(world))[0])

    def trainable_tensors(self) -> Tensors:
        tensors = policy_to_tensors(self.module.head, "policy")
        tensors.update(mlp_to_tensors(self.value_net, "value"))
        return tensors

    def with_tensors(self, tensors: Tensors) -> "CascadeActor":
        return replace(
            self,
            module=replace(self.module, head=policy_from_tensors(tensors, "policy")),
            value_net=mlp_from_tensors(tensors, "value"),
        )

    def for_iteration(self, iteration: int, total_iterations: int) -> "CascadeActor":
        return replace(self, module=replace(self.module, alpha=alpha_at(self.module.schedule, iteration, total_iterations)))

    def as_stack(self) -> CascadeStack:
        return replace(self.prefix, modules=self.prefix.modules + (self.module,), value_net=self.value_net)


def init_attribute_module(
    stack: CascadeStack,
    spec: AttributeSpec,
    env: EnvInstance,
    rng: np.random.Generator,
    schedule: Optional[AlphaSchedule] = None,
    penalty_coef: float = CASCADE_DEFAULTS["penalty_coef"],
    hidden_sizes: Sequence[int] = HIDDEN_SIZES
) -> Tuple[AttributeModule, MlpParams]:
    """
    New module with a near-zero compensate head plus its value net

    Returns:
        Tuple[AttributeModule, MlpParams]: Module (alpha at the schedule start) and value net
    """
    schedule = schedule or AlphaSchedule()
    s_dim = env.feature_dim(spec)
    head = init_gaussian_policy(
        s_dim + env.action_dim, env.action_dim, rng, hidden_sizes, INITIAL_LOG_STD, OUTPUT_LAYER_SCALE
    )
    value_dim = sum(env.feature_dim(s) for s in stack.base_specs) + s_dim
    module = AttributeModule(
        spec=spec,
        head=head,
        alpha=schedule.start,
        penalty_coef=penalty_coef,
        base_fingerprint=base_fingerprint(stack.base),
        schedule=schedule,
    )
    return module, init_value_net(value_dim, rng, hidden_sizes)


def train_attribute_module(
    base_stack: CascadeStack,
    spec: AttributeSpec,
    env: EnvInstance,
    config: RlConfig,
    curriculum: Optional[CurriculumState] = None,
    schedule: Optional[AlphaSchedule] = None,
    penalty_coef: float = CASCADE_DEFAULTS["penalty_coef"],
    hooks: Sequence[IterationHook] = ()
) -> Tuple[AttributeModule, TrainingResult]:
    """
    Train a new module behind a frozen stack

    The stack may already carry modules; they stay frozen as well. The
    environment must contain the reaching attribute and `spec`; the reward
    stream is R_0 + R_i plus the compensative penalty.

    Args:
        base_stack: Trained stack to extend (not modified)
        spec: Attribute the new module handles
        env: Environment with the base and this attribute
        config: PPO settings
        curriculum: Initial curriculum state
        schedule: Blend weight ramp
        penalty_coef: Compensative penalty coefficient
        hooks: Per-iteration callbacks

    Returns:
        Tuple[AttributeModule, TrainingResult]: Trained module and the run's log
    """
    env.attribute(spec.name)
    rng = parameter_rng(config.seed)
    module, value_net = init_attribute_module(base_stack, spec, env, rng, schedule, penalty_coef)
    logger.info(
        f"Training attribute module '{spec.name}' ({spec.kind.value}) behind "
        f"{len(base_stack.modules)} frozen module(s), base {module.base_fingerprint}"
    )

    result = train(lambda: env, CascadeActor(base_stack, module, value_net), config, curriculum, hooks)
    trained = replace(result.actor.module, trained=config.iterations > 0)
    return trained, result


def assemble(
    base,
    modules: Sequence[AttributeModule],
    strict_fingerprint: bool = CASCADE_DEFAULTS["strict_fingerprint"]
) -> CascadeStack:
    """
    Connect trained modules behind a base for zero-shot use (alpha = 1 everywhere)

    Args:
        base: Module-free CascadeStack holding the base policy
        modules: Modules in evaluation order
        strict_fingerprint: Raise instead of warn when a module was trained on another base

    Returns:
        CascadeStack: Assembled stack; nothing is retrained

    Raises:
        ConfigurationError: Action dimensions differ
        FingerprintMismatchError: Base mismatch with strict_fingerprint set
    """
    if base.modules:
        raise ConfigurationError("assemble expects a base stack without modules")
    fingerprint = base_fingerprint(base.base)
    ready = []
    for module in modules:
        if module.action_dim != base.action_dim:
            raise ConfigurationError(
                f"module '{module.spec.name}' action dimension {module.action_dim} "
                f"does not match base action dimension {base.action_dim}"
            )
        if module.base_fingerprint and module.base_fingerprint != fingerprint:
            message = (
                f"module '{module.spec.name}' was trained on base {module.base_fingerprint}, "
                f"assembling onto base {fingerprint}"
            )
            if strict_fingerprint:
                raise FingerprintMismatchError(message)
            logger.warning(message)
        ready.append(replace(module, alpha=1.0))
    return replace(base, modules=tuple(ready))
