"""
Policy-gradient training core
Rollout collection, discounted returns, GAE, the vanilla / KL-penalized /
clipped surrogate objectives and the PPO trainer (clip loss by default)
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from config.settings import LOSS_VARIANTS, MAX_RESAMPLE_TRIES, RL_DEFAULTS
from src.curriculum import CurriculumState, curriculum_update, sample_initial, terminal_reached
from src.envs import EnvInstance, EpisodeLayout, WorldState, project_many
from src.errors import (
    ConfigurationError,
    EnvironmentConfigurationError,
    EnvironmentFault,
    ResampleRequest,
    TrainingError,
)
from src.nncore import (
    GaussianPolicyParams,
    MlpParams,
    Tensors,
    adam_init,
    adam_step,
    clip_by_global_norm,
    diag_gaussian_log_prob,
    gaussian_backward,
    gaussian_entropy,
    gaussian_kl,
    gaussian_log_prob,
    gaussian_log_prob_partials,
    gaussian_mean,
    gaussian_sample,
    mlp_backward,
    mlp_forward,
    mlp_from_tensors,
    mlp_to_tensors,
    policy_from_tensors,
    policy_to_tensors,
)

logger = logging.getLogger(__name__)

EPISODE_FIELDS = (
    "episode_returns", "episode_base", "episode_attr",
    "episode_penalty", "episode_lengths", "episode_successes",
)


@dataclass(frozen=True)
class RlConfig:
    """PPO / GAE hyperparameters"""
    gamma: float = RL_DEFAULTS["gamma"]
    gae_lambda: float = RL_DEFAULTS["gae_lambda"]
    clip_epsilon: float = RL_DEFAULTS["clip_epsilon"]
    kl_beta: float = RL_DEFAULTS["kl_beta"]
    loss_variant: str = RL_DEFAULTS["loss_variant"]
    epochs: int = RL_DEFAULTS["epochs"]
    minibatch_size: int = RL_DEFAULTS["minibatch_size"]
    horizon: int = RL_DEFAULTS["horizon"]
    iterations: int = RL_DEFAULTS["iterations"]
    value_coef: float = RL_DEFAULTS["value_coef"]
    entropy_coef: float = RL_DEFAULTS["entropy_coef"]
    learning_rate: float = RL_DEFAULTS["learning_rate"]
    max_grad_norm: float = RL_DEFAULTS["max_grad_norm"]
    normalize_advantages: bool = RL_DEFAULTS["normalize_advantages"]
    workers: int = RL_DEFAULTS["workers"]
    seed: int = RL_DEFAULTS["seed"]
    curriculum_patience: int = RL_DEFAULTS["curriculum_patience"]
    stop_at_terminal: bool = RL_DEFAULTS["stop_at_terminal"]

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("rl.gamma must lie in [0, 1)")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ConfigurationError("rl.gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ConfigurationError("rl.clip_epsilon must be positive")
        if self.kl_beta < 0:
            raise ConfigurationError("rl.kl_beta must be non-negative")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ConfigurationError(f"rl.loss_variant must be one of {LOSS_VARIANTS}")
        if self.horizon < 1:
            raise ConfigurationError("rl.horizon must be at least 1")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ConfigurationError("rl.epochs and rl.minibatch_size must be at least 1")
        if self.iterations < 0:
            raise ConfigurationError("rl.iterations must be non-negative")
        if self.workers < 1:
            raise ConfigurationError("rl.workers must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("rl.learning_rate must be positive")


@dataclass
class RolloutBatch:
    """
    Per-step arrays of one rollout (or a concatenation of rollouts)

    `states` / `actions` are the trainable Gaussian head's input and sampled
    output; `env_actions` is what the environment received.
    """
    states: np.ndarray
    actions: np.ndarray
    env_actions: np.ndarray
    value_states: np.ndarray
    rewards_base: np.ndarray
    rewards_attr: np.ndarray
    rewards_penalty: np.ndarray
    values: np.ndarray
    log_probs_old: np.ndarray
    dones: np.ndarray
    bootstrap_value: float = 0.0
    returns: Optional[np.ndarray] = None
    advantages: Optional[np.ndarray] = None
    episode_returns: List[float] = field(default_factory=list)
    episode_base: List[float] = field(default_factory=list)
    episode_attr: List[float] = field(default_factory=list)
    episode_penalty: List[float] = field(default_factory=list)
    episode_lengths: List[int] = field(default_factory=list)
    episode_successes: List[bool] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rewards_base)

    @property
    def rewards(self) -> np.ndarray:
        return self.rewards_base + self.rewards_attr + self.rewards_penalty

    def subset(self, index: np.ndarray) -> "RolloutBatch":
        """Minibatch view (episode statistics are not carried)"""
        return RolloutBatch(
            states=self.states[index],
            actions=self.actions[index],
            env_actions=self.env_actions[index],
            value_states=self.value_states[index],
            rewards_base=self.rewards_base[index],
            rewards_attr=self.rewards_attr[index],
            rewards_penalty=self.rewards_penalty[index],
            values=self.values[index],
            log_probs_old=self.log_probs_old[index],
            dones=self.dones[index],
            returns=None if self.returns is None else self.returns[index],
            advantages=None if self.advantages is None else self.advantages[index],
        )


@dataclass(frozen=True)
class ActorStep:
    """Everything an actor produces for one environment step"""
    env_action: np.ndarray
    head_input: np.ndarray
    head_sample: np.ndarray
    log_prob: float
    value: float
    value_input: np.ndarray
    penalty: float = 0.0
    compensations: Tuple[np.ndarray, ...] = ()


class Actor(Protocol):
    """
    What the trainer needs from a bare policy or a cascade stack

    The trainable part is one Gaussian head plus one value network;
    anything else the actor holds stays frozen.
    """
    head: GaussianPolicyParams
    value_net: MlpParams

    def act(self, world: WorldState, rng: np.random.Generator, deterministic: bool = False) -> ActorStep: ...

    def value(self, world: WorldState) -> float: ...

    def trainable_tensors(self) -> Tensors: ...

    def with_tensors(self, tensors: Tensors) -> "Actor": ...

    def for_iteration(self, iteration: int, total_iterations: int) -> "Actor": ...


@dataclass(frozen=True)
class PolicyActor:
    """
    A bare Gaussian policy over the concatenated projections of `specs`

    Used for the base attribute (specs = reaching only) and for baselines
    trained from scratch on the full state.
    """
    head: GaussianPolicyParams
    value_net: MlpParams
    specs: Tuple = ()
    action_bound: float = math.inf

    def observe(self, world: WorldState) -> np.ndarray:
        return project_many(world, self.specs)

    def act(self, world: WorldState, rng: np.random.Generator, deterministic: bool = False) -> ActorStep:
        observation = self.observe(world)
        sample = gaussian_mean(self.head, observation) if deterministic else gaussian_sample(self.head, observation, rng)
        return ActorStep(
            env_action=np.clip(sample, -self.action_bound, self.action_bound),
            head_input=observation,
            head_sample=sample,
            log_prob=gaussian_log_prob(self.head, observation, sample),
            value=float(mlp_forward(self.value_net, observation)[0]),
            value_input=observation,
        )

    def value(self, world: WorldState) -> float:
        return float(mlp_forward(self.value_net, self.observe(world))[0])

    def trainable_tensors(self) -> Tensors:
        tensors = policy_to_tensors(self.head, "policy")
        tensors.update(mlp_to_tensors(self.value_net, "value"))
        return tensors

    def with_tensors(self, tensors: Tensors) -> "PolicyActor":
        return replace(
            self,
            head=policy_from_tensors(tensors, "policy"),
            value_net=mlp_from_tensors(tensors, "value"),
        )

    def for_iteration(self, iteration: int, total_iterations: int) -> "PolicyActor":
        return self


# Initial-position sampler: (rng, layout) -> position, or None for the start point
InitialSampler = Callable[[np.random.Generator, EpisodeLayout], Optional[np.ndarray]]


def curriculum_sampler(state: Optional[CurriculumState], env: EnvInstance) -> InitialSampler:
    """Sampler bound to a curriculum snapshot (fixed start point when None)"""
    if state is None:
        return lambda rng, layout: None
    return lambda rng, layout: sample_initial(state, env, rng, layout)


def start_episode(env: EnvInstance, sampler: InitialSampler, rng: np.random.Generator) -> WorldState:
    """Draw a layout and an initial position, retrying rejected positions"""
    layout = env.sample_layout(rng)
    for _ in range(MAX_RESAMPLE_TRIES):
        try:
            return env.reset(sampler(rng, layout), rng, layout)
        except ResampleRequest:
            continue
    raise EnvironmentConfigurationError(
        f"environment rejected {MAX_RESAMPLE_TRIES} consecutive initial positions"
    )


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def collect_rollouts(
    env: EnvInstance,
    actor: Actor,
    horizon: int,
    rng: np.random.Generator,
    sampler: Optional[InitialSampler] = None
) -> RolloutBatch:
    """
    Run the actor for exactly `horizon` transitions

    Episodes that end are reset in place. Log-probabilities and value
    predictions come from the acting snapshot.

    Args:
        env: Environment (anything with sample_layout/reset/step/reached)
        actor: Acting policy snapshot
        horizon: Number of transitions
        rng: Generator for layouts, initial states and action noise
        sampler: Initial-position sampler (start point when None)

    Returns:
        RolloutBatch: Transitions with bootstrap value for a truncated tail
    """
    if horizon < 1:
        raise ConfigurationError("rollout horizon must be at least 1")
    sampler = sampler or (lambda rng_, layout: None)

    columns: Dict[str, list] = {key: [] for key in (
        "states", "actions", "env_actions", "value_states", "rewards_base",
        "rewards_attr", "rewards_penalty", "values", "log_probs_old", "dones",
    )}
    episodes: Dict[str, list] = {key: [] for key in EPISODE_FIELDS}
    episode = np.zeros(3)  # base, attr, penalty
    episode_length = 0

    world = start_episode(env, sampler, rng)
    for step_index in range(horizon):
        out = actor.act(world, rng)
        next_world, rewards, done = env.step(world, out.env_action)
        rewards = np.asarray(rewards, dtype=np.float64)
        if not np.all(np.isfinite(rewards)):
            raise EnvironmentFault("non-finite reward", step=step_index)

        base = float(rewards[0])
        attr = float(np.sum(rewards[1:]))
        columns["states"].append(out.head_input)
        columns["actions"].append(out.head_sample)
        columns["env_actions"].append(out.env_action)
        columns["value_states"].append(out.value_input)
        columns["rewards_base"].append(base)
        columns["rewards_attr"].append(attr)
        columns["rewards_penalty"].append(out.penalty)
        columns["values"].append(out.value)
        columns["log_probs_old"].append(out.log_prob)
        columns["dones"].append(bool(done))
        episode += (base, attr, out.penalty)
        episode_length += 1

        if done:
            episodes["episode_returns"].append(float(episode[0] + episode[1]))
            episodes["episode_base"].append(float(episode[0]))
            episodes["episode_attr"].append(float(episode[1]))
            episodes["episode_penalty"].append(float(episode[2]))
            episodes["episode_lengths"].append(episode_length)
            episodes["episode_successes"].append(bool(env.reached(next_world)))
            episode[:] = 0.0
            episode_length = 0
            world = start_episode(env, sampler, rng)
        else:
            world = next_world

    arrays = {key: np.asarray(values, dtype=bool if key == "dones" else np.float64)
              for key, values in columns.items()}
    return RolloutBatch(
        **arrays,
        bootstrap_value=0.0 if arrays["dones"][-1] else float(actor.value(world)),
        **episodes,
    )


def concatenate_batches(batches: Sequence[RolloutBatch]) -> RolloutBatch:
    """Join finalized worker batches in order"""
    def cat(name):
        parts = [getattr(b, name) for b in batches]
        return None if any(p is None for p in parts) else np.concatenate(parts)

    return RolloutBatch(
        states=cat("states"),
        actions=cat("actions"),
        env_actions=cat("env_actions"),
        value_states=cat("value_states"),
        rewards_base=cat("rewards_base"),
        rewards_attr=cat("rewards_attr"),
        rewards_penalty=cat("rewards_penalty"),
        values=cat("values"),
        log_probs_old=cat("log_probs_old"),
        dones=cat("dones"),
        bootstrap_value=batches[-1].bootstrap_value,
        returns=cat("returns"),
        advantages=cat("advantages"),
        **{key: [x for b in batches for x in getattr(b, key)] for key in EPISODE_FIELDS},
    )


# ---------------------------------------------------------------------------
# Returns and advantages
# ---------------------------------------------------------------------------

def discounted_returns(rewards, dones, gamma: float, bootstrap_value: float = 0.0) -> np.ndarray:
    """
    R_t = r_t + gamma * R_{t+1}, restarted after every done flag

    A non-terminal tail is bootstrapped with `bootstrap_value`.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if rewards.shape != dones.shape:
        raise ConfigurationError("rewards and dones must have equal length")

    returns = np.zeros_like(rewards)
    running = bootstrap_value
    for t in reversed(range(len(rewards))):
        if dones[t]:
            running = 0.0
        running = rewards[t] + gamma * running
        returns[t] = running
    return returns


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, gae_lambda: float) -> np.ndarray:
    """
    Generalized advantage estimate

    delta_t = r_t + gamma * V_{t+1} - V_t and A_t = sum_l (gamma * lambda)^l delta_{t+l},
    with both chains cut at done flags and V after the last step taken
    from `bootstrap_value`.

    Returns:
        np.ndarray: Advantages (value targets are advantages + values)
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ConfigurationError("rewards, values and dones must have equal length")

    advantages = np.zeros_like(rewards)
    last = 0.0
    for t in reversed(range(len(rewards))):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = bootstrap_value if t == len(rewards) - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * gae_lambda * nonterminal * last
        advantages[t] = last
    return advantages


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    if len(advantages) < 2:
        return advantages - advantages.mean() if len(advantages) else advantages
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def finalize_batch(batch: RolloutBatch, config: RlConfig) -> RolloutBatch:
    """Attach GAE advantages and value targets"""
    advantages = compute_gae(
        batch.rewards, batch.values, batch.dones, batch.bootstrap_value, config.gamma, config.gae_lambda
    )
    batch.advantages = advantages
    batch.returns = advantages + batch.values
    return batch


# ---------------------------------------------------------------------------
# Objectives (all returned as quantities to ascend)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossResult:
    """Objective value, gradients w.r.t. the Gaussian head, diagnostics"""
    value: float
    grads: Tensors
    info: Dict[str, float] = field(default_factory=dict)


def _head_terms(batch: RolloutBatch, policy: GaussianPolicyParams):
    mean = gaussian_mean(policy, batch.states)
    log_prob = diag_gaussian_log_prob(mean, policy.log_std, batch.actions)
    d_mean, d_log_std = gaussian_log_prob_partials(mean, policy.log_std, batch.actions)
    return mean, log_prob, d_mean, d_log_std


def _policy_grads(policy, states, d_mean, d_log_std_total) -> Tensors:
    return policy_to_tensors(gaussian_backward(policy, states, d_mean, d_log_std_total), "policy")


def pg_loss(batch: RolloutBatch, policy: GaussianPolicyParams) -> LossResult:
    """
    Vanilla policy-gradient objective L = mean[log pi(a|s) * A]

    Gradients ascend L; the optimizer minimizes -L.
    """
    n = len(batch)
    _, log_prob, d_mean, d_log_std = _head_terms(batch, policy)
    adv = batch.advantages[:, None]
    value = float(np.mean(log_prob * batch.advantages))
    grads = _policy_grads(policy, batch.states, adv * d_mean / n, np.sum(adv * d_log_std, axis=0) / n)
    return LossResult(value, grads)


def kl_penalty_loss(
    batch: RolloutBatch,
    policy: GaussianPolicyParams,
    policy_old: GaussianPolicyParams,
    beta: float
) -> LossResult:
    """
    KL-penalized importance-weighted objective
    L = mean[ratio * A] - beta * mean[KL(pi_old || pi)]
    """
    n = len(batch)
    mean, log_prob, d_mean, d_log_std = _head_terms(batch, policy)
    ratio = np.exp(log_prob - batch.log_probs_old)
    adv = batch.advantages

    mean_old = gaussian_mean(policy_old, batch.states)
    kl = gaussian_kl(mean_old, policy_old.log_std, mean, policy.log_std)
    value = float(np.mean(ratio * adv) - beta * np.mean(kl))

    weight = (ratio * adv)[:, None]
    var = np.exp(2.0 * policy.log_std)
    var_old = np.exp(2.0 * policy_old.log_std)
    d_kl_mean = (mean - mean_old) / var
    d_kl_log_std = 1.0 - (var_old + (mean_old - mean) ** 2) / var

    g_mean = (weight * d_mean - beta * d_kl_mean) / n
    g_log_std = np.sum(weight * d_log_std - beta * d_kl_log_std, axis=0) / n
    grads = _policy_grads(policy, batch.states, g_mean, g_log_std)
    return LossResult(value, grads, {"kl": float(np.mean(kl))})


def clipped_surrogate(ratio, advantages, epsilon: float) -> np.ndarray:
    """Per-sample min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)"""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    return np.minimum(ratio * advantages, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantages)


def ppo_clip_loss(
    batch: RolloutBatch,
    policy: GaussianPolicyParams,
    policy_old: GaussianPolicyParams,
    epsilon: float
) -> LossResult:
    """
    Clipped surrogate objective L = mean[min(ratio * A, clip(ratio) * A)]

    Samples where the clipped branch binds contribute no gradient.
    """
    n = len(batch)
    _, log_prob, d_mean, d_log_std = _head_terms(batch, policy)
    ratio = np.exp(log_prob - batch.log_probs_old)
    adv = batch.advantages
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv
    value = float(np.mean(np.minimum(unclipped, clipped)))

    active = (unclipped <= clipped).astype(np.float64)
    weight = (active * ratio * adv)[:, None]
    grads = _policy_grads(policy, batch.states, weight * d_mean / n, np.sum(weight * d_log_std, axis=0) / n)
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > epsilon))
    return LossResult(value, grads, {"clip_fraction": clip_fraction})


def value_loss(batch: RolloutBatch, value_net: MlpParams) -> LossResult:
    """
    Mean squared error between V(s) and the value targets (advantages + values)

    Unlike the policy objectives this is a quantity to minimize.
    """
    n = len(batch)
    prediction = mlp_forward(value_net, batch.value_states)[:, 0]
    residual = prediction - batch.returns
    grads, _ = mlp_backward(value_net, batch.value_states, (2.0 * residual / n)[:, None])
    return LossResult(float(np.mean(residual ** 2)), mlp_to_tensors(grads, "value"))


# ---------------------------------------------------------------------------
# Training log
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingLogRow:
    iteration: int
    mean_episode_reward: float
    mean_reward_base: float
    mean_reward_attr: float
    mean_penalty: float
    random_level: float
    loss: float
    kl_estimate: float


@dataclass
class TrainingLog:
    rows: List[TrainingLogRow] = field(default_factory=list)

    def append(self, row: TrainingLogRow):
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)


@dataclass
class TrainingResult:
    actor: Actor
    log: TrainingLog
    curriculum: Optional[CurriculumState]
    env_steps: int
    terminal_iteration: Optional[int] = None


IterationHook = Callable[[TrainingLogRow], None]


def parameter_rng(seed: int) -> np.random.Generator:
    """
    Generator for fresh network parameters

    Drawn from the root of the seed sequence; PPOTrainer's update and
    worker generators are its spawned children, so the streams never overlap.
    """
    return np.random.default_rng(np.random.SeedSequence(seed))


class PPOTrainer:
    """
    Collect / estimate / update loop for one trainable Gaussian head and value net

    Rollouts run on `config.workers` environment instances, each worker with
    its own generator spawned from the seed and a read-only actor snapshot.
    Updates happen in this object only.
    """

    def __init__(
        self,
        env_factory: Callable[[], EnvInstance],
        actor: Actor,
        config: RlConfig,
        curriculum: Optional[CurriculumState] = None,
        hooks: Sequence[IterationHook] = ()
    ):
        self.config = config
        self.actor = actor
        self.curriculum = curriculum
        self.hooks = list(hooks)
        self.envs = [env_factory() for _ in range(config.workers)]

        seeds = np.random.SeedSequence(config.seed).spawn(config.workers + 1)
        self.update_rng = np.random.default_rng(seeds[0])
        self.worker_rngs = [np.random.default_rng(s) for s in seeds[1:]]
        self.optimizer = adam_init(actor.trainable_tensors(), config.learning_rate)
        self.log = TrainingLog()
        self.env_steps = 0
        self.terminal_iteration: Optional[int] = None
        self._since_increase = 0
        self._stall_warned = False

    def _worker_horizons(self) -> List[int]:
        base, extra = divmod(self.config.horizon, self.config.workers)
        return [base + (1 if k < extra else 0) for k in range(self.config.workers)]

    def collect(self, actor: Actor) -> RolloutBatch:
        """Gather one iteration of experience from every worker"""
        horizons = self._worker_horizons()
        jobs = [
            (env, h, rng, curriculum_sampler(self.curriculum, env))
            for env, h, rng in zip(self.envs, horizons, self.worker_rngs)
            if h > 0
        ]

        def run(job):
            env, horizon, rng, sampler = job
            return finalize_batch(collect_rollouts(env, actor, horizon, rng, sampler), self.config)

        if len(jobs) == 1:
            batches = [run(jobs[0])]
        else:
            with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
                batches = list(pool.map(run, jobs))
        batch = concatenate_batches(batches)
        self.env_steps += len(batch)
        return batch

    def _objective(self, minibatch: RolloutBatch, actor: Actor, head_old: GaussianPolicyParams) -> Tuple[float, Tensors]:
        """Loss to minimize and its gradient w.r.t. the trainable tensors"""
        config = self.config
        if config.loss_variant == "pg":
            policy_part = pg_loss(minibatch, actor.head)
        elif config.loss_variant == "kl":
            policy_part = kl_penalty_loss(minibatch, actor.head, head_old, config.kl_beta)
        else:
            policy_part = ppo_clip_loss(minibatch, actor.head, head_old, config.clip_epsilon)
        value_part = value_loss(minibatch, actor.value_net)

        loss = -policy_part.value + config.value_coef * value_part.value
        grads = {name: -g for name, g in policy_part.grads.items()}
        if config.entropy_coef:
            loss -= config.entropy_coef * gaussian_entropy(actor.head)
            grads["policy.log_std"] = grads["policy.log_std"] - config.entropy_coef
        for name, g in value_part.grads.items():
            grads[name] = config.value_coef * g
        return loss, grads

    def update(self, batch: RolloutBatch, iteration: int) -> Tuple[float, float]:
        """
        Several epochs of minibatch updates on one batch

        Returns:
            Tuple[float, float]: Mean loss of the last epoch and the KL estimate
        """
        config = self.config
        if config.normalize_advantages:
            batch.advantages = normalize_advantages(batch.advantages)
        head_old = self.actor.head
        n = len(batch)

        epoch_losses: List[float] = []
        for _ in range(config.epochs):
            epoch_losses = []
            order = self.update_rng.permutation(n)
            for start in range(0, n, config.minibatch_size):
                minibatch = batch.subset(order[start:start + config.minibatch_size])
                loss, grads = self._objective(minibatch, self.actor, head_old)
                if not math.isfinite(loss):
                    raise TrainingError("non-finite loss", iteration=iteration)
                grads, _ = clip_by_global_norm(grads, config.max_grad_norm)
                try:
                    tensors, self.optimizer = adam_step(self.actor.trainable_tensors(), grads, self.optimizer)
                except TrainingError as exc:
                    raise TrainingError(str(exc), iteration=iteration) from exc
                self.actor = self.actor.with_tensors(tensors)
                epoch_losses.append(loss)

        new_log_prob = gaussian_log_prob(self.actor.head, batch.states, batch.actions)
        kl_estimate = float(np.mean(batch.log_probs_old - new_log_prob))
        return float(np.mean(epoch_losses)), kl_estimate

    def _advance_curriculum(self, batch: RolloutBatch, iteration: int):
        if self.curriculum is None:
            return
        before = self.curriculum.level_increases
        self.curriculum = curriculum_update(self.curriculum, batch.episode_returns)
        if terminal_reached(self.curriculum):
            if self.terminal_iteration is None:
                self.terminal_iteration = iteration
            return
        if self.curriculum.level_increases > before:
            self._since_increase = 0
            self._stall_warned = False
            return
        self._since_increase += 1
        if self._since_increase >= self.config.curriculum_patience and not self._stall_warned:
            logger.warning(
                f"Curriculum stalled at random level {self.curriculum.random_level:.4g} "
                f"for {self._since_increase} iterations (iteration {iteration})"
            )
            self._stall_warned = True

    def train(self) -> TrainingResult:
        """
        Run the configured number of iterations

        Returns:
            TrainingResult: Trained actor, per-iteration log and final curriculum
        """
        config = self.config
        for iteration in range(config.iterations):
            acting = self.actor.for_iteration(iteration, config.iterations)
            self.actor = acting
            batch = self.collect(acting)
            loss, kl_estimate = self.update(batch, iteration)
            self._advance_curriculum(batch, iteration)

            row = TrainingLogRow(
                iteration=iteration,
                mean_episode_reward=_mean_or_nan(batch.episode_returns),
                mean_reward_base=_mean_or_nan(batch.episode_base),
                mean_reward_attr=_mean_or_nan(batch.episode_attr),
                mean_penalty=_mean_or_nan(batch.episode_penalty),
                random_level=self.curriculum.random_level if self.curriculum is not None else 0.0,
                loss=loss,
                kl_estimate=kl_estimate,
            )
            self.log.append(row)
            logger.info(
                f"iteration {iteration}: reward {row.mean_episode_reward:.4g}, "
                f"level {row.random_level:.4g}, loss {loss:.4g}, kl {kl_estimate:.3g}"
            )
            for hook in self.hooks:
                hook(row)
            if config.stop_at_terminal and self.terminal_iteration is not None:
                logger.info(f"Terminal random level reached at iteration {iteration}; stopping")
                break

        return TrainingResult(
            actor=self.actor,
            log=self.log,
            curriculum=self.curriculum,
            env_steps=self.env_steps,
            terminal_iteration=self.terminal_iteration,
        )


def _mean_or_nan(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def train(
    env_factory: Callable[[], EnvInstance],
    actor_template: Actor,
    config: RlConfig,
    curriculum: Optional[CurriculumState] = None,
    hooks: Sequence[IterationHook] = ()
) -> TrainingResult:
    """Functional entry point around PPOTrainer"""
    return PPOTrainer(env_factory, actor_template, config, curriculum, hooks).train()
