"""
Dense neural-network core for policy and value functions
Fully connected tanh networks with hand-derived backpropagation,
a diagonal Gaussian policy head and the Adam optimizer
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config.settings import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    HIDDEN_SIZES,
    INITIAL_LOG_STD,
    OUTPUT_LAYER_SCALE,
)
from src.errors import ConfigurationError, TrainingError

logger = logging.getLogger(__name__)

Tensors = Dict[str, np.ndarray]

LOG_2PI = math.log(2.0 * math.pi)


def _frozen(array) -> np.ndarray:
    """Copy into a read-only float64 array"""
    out = np.array(array, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class MlpParams:
    """
    Weights and biases of a fully connected network

    Weight k has shape (out, in). Hidden layers use tanh, the output layer
    is linear. Instances are immutable snapshots: arrays are copied and
    marked read-only, so they can be shared with rollout workers.
    """
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    activation: str = "tanh"

    def __post_init__(self):
        if not self.weights or len(self.weights) != len(self.biases):
            raise ConfigurationError("MLP needs at least one layer and one bias per weight matrix")
        if self.activation != "tanh":
            raise ConfigurationError(f"unsupported activation '{self.activation}'")

        weights = tuple(_frozen(w) for w in self.weights)
        biases = tuple(_frozen(b) for b in self.biases)
        for k, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(
                    f"layer {k}: weight shape {w.shape} does not match bias shape {b.shape}"
                )
            if k > 0 and w.shape[1] != weights[k - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {k}: input dimension {w.shape[1]} does not chain "
                    f"with previous output dimension {weights[k - 1].shape[0]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError(f"layer {k}: non-finite parameters")

        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "biases", biases)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.in_dim] + [w.shape[0] for w in self.weights]


class MlpGradients(NamedTuple):
    """Gradients shaped like an MlpParams"""
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]


@dataclass(frozen=True)
class GaussianPolicyParams:
    """
    Gaussian policy with a state-dependent mean and a state-independent log std
    """
    mean_net: MlpParams
    log_std: np.ndarray

    def __post_init__(self):
        log_std = _frozen(self.log_std)
        if log_std.shape != (self.mean_net.out_dim,):
            raise ConfigurationError(
                f"log_std shape {log_std.shape} does not match action dimension {self.mean_net.out_dim}"
            )
        if not np.all(np.isfinite(log_std)):
            raise ConfigurationError("log_std must be finite")
        object.__setattr__(self, "log_std", log_std)

    @property
    def in_dim(self) -> int:
        return self.mean_net.in_dim

    @property
    def action_dim(self) -> int:
        return self.mean_net.out_dim

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)


class GaussianGradients(NamedTuple):
    """Gradients shaped like a GaussianPolicyParams"""
    mean_net: MlpGradients
    log_std: np.ndarray


@dataclass(frozen=True)
class AdamState:
    """First/second moments keyed by tensor name, plus the step counter"""
    first_moment: Dict[str, np.ndarray]
    second_moment: Dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 3e-4
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    output_scale: float = 1.0
) -> MlpParams:
    """
    Create an MLP with Glorot-uniform weights and zero biases

    Args:
        sizes: Layer widths including input and output, e.g. [6, 64, 64, 2]
        rng: Random generator
        output_scale: Multiplier applied to the final layer weights

    Returns:
        MlpParams: Freshly initialized network
    """
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ConfigurationError(f"invalid layer sizes {list(sizes)}")

    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if k == len(sizes) - 2:
            w = w * output_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases))


def init_gaussian_policy(
    in_dim: int,
    action_dim: int,
    rng: np.random.Generator,
    hidden_sizes: Sequence[int] = HIDDEN_SIZES,
    log_std: float = INITIAL_LOG_STD,
    output_scale: float = OUTPUT_LAYER_SCALE
) -> GaussianPolicyParams:
    """Gaussian policy whose initial mean output is close to zero"""
    mean_net = init_mlp([in_dim, *hidden_sizes, action_dim], rng, output_scale)
    return GaussianPolicyParams(mean_net, np.full(action_dim, log_std))


def init_value_net(
    in_dim: int,
    rng: np.random.Generator,
    hidden_sizes: Sequence[int] = HIDDEN_SIZES
) -> MlpParams:
    """Scalar value network"""
    return init_mlp([in_dim, *hidden_sizes, 1], rng)


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

def _as_batch(params: MlpParams, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.in_dim:
        raise ConfigurationError(
            f"input dimension {x.shape[-1] if x.ndim else 0} does not match network input {params.in_dim}"
        )
    return batch, single


def _forward_trace(params: MlpParams, batch: np.ndarray) -> List[np.ndarray]:
    activations = [batch]
    h = batch
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        h = np.tanh(z) if k < last else z
        activations.append(h)
    return activations


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """
    Evaluate the network on one input vector or a batch of row vectors

    Args:
        params: Network parameters
        x: Input of shape (in_dim,) or (batch, in_dim)

    Returns:
        np.ndarray: Output of shape (out_dim,) or (batch, out_dim)
    """
    batch, single = _as_batch(params, x)
    out = _forward_trace(params, batch)[-1]
    return out[0] if single else out


def mlp_backward(params: MlpParams, x, upstream_grad) -> Tuple[MlpGradients, np.ndarray]:
    """
    Gradients of sum(upstream_grad * output) w.r.t. every parameter and the input

    For a batch the parameter gradients are summed over rows; the input
    gradient keeps one row per sample.

    Args:
        params: Network parameters
        x: Input of shape (in_dim,) or (batch, in_dim)
        upstream_grad: Array shaped like the network output

    Returns:
        Tuple[MlpGradients, np.ndarray]: Parameter gradients and input gradient
    """
    batch, single = _as_batch(params, x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    g = g[None, :] if single and g.ndim == 1 else g
    if g.shape != (batch.shape[0], params.out_dim):
        raise ConfigurationError(
            f"upstream gradient shape {np.shape(upstream_grad)} does not match output shape"
        )

    activations = _forward_trace(params, batch)
    n_layers = len(params.weights)
    grad_w: List[Optional[np.ndarray]] = [None] * n_layers
    grad_b: List[Optional[np.ndarray]] = [None] * n_layers
    for k in reversed(range(n_layers)):
        if k < n_layers - 1:
            g = g * (1.0 - activations[k + 1] ** 2)
        grad_w[k] = g.T @ activations[k]
        grad_b[k] = g.sum(axis=0)
        g = g @ params.weights[k]

    input_grad = g[0] if single else g
    return MlpGradients(tuple(grad_w), tuple(grad_b)), input_grad


# ---------------------------------------------------------------------------
# Gaussian policy head
# ---------------------------------------------------------------------------

def gaussian_mean(policy: GaussianPolicyParams, state) -> np.ndarray:
    """
    Mean action of the policy (the deterministic action)

    Args:
        policy: Gaussian head
        state: One state or a batch of states

    Returns:
        np.ndarray: Mean action(s)
    """
    return mlp_forward(policy.mean_net, state)


def diag_gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, action: np.ndarray) -> np.ndarray:
    """Sum over the last axis of the per-dimension normal log density"""
    var = np.exp(2.0 * log_std)
    return np.sum(-((action - mean) ** 2) / (2.0 * var) - log_std - 0.5 * LOG_2PI, axis=-1)


def gaussian_log_prob(policy: GaussianPolicyParams, state, action):
    """
    log pi(action | state) for one sample or a batch

    Returns:
        float or np.ndarray: Log density (one entry per row for batches)
    """
    action = np.asarray(action, dtype=np.float64)
    if action.shape[-1] != policy.action_dim:
        raise ConfigurationError(
            f"action dimension {action.shape[-1]} does not match policy action dimension {policy.action_dim}"
        )
    mean = mlp_forward(policy.mean_net, state)
    log_prob = diag_gaussian_log_prob(mean, policy.log_std, action)
    return float(log_prob) if np.ndim(log_prob) == 0 else log_prob


def gaussian_log_prob_partials(
    mean: np.ndarray,
    log_std: np.ndarray,
    action: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Per-sample d log pi / d mean and d log pi / d log_std"""
    var = np.exp(2.0 * log_std)
    residual = action - mean
    d_mean = residual / var
    d_log_std = residual ** 2 / var - 1.0
    return d_mean, d_log_std


def gaussian_backward(
    policy: GaussianPolicyParams,
    states: np.ndarray,
    d_mean: np.ndarray,
    d_log_std: np.ndarray
) -> GaussianGradients:
    """Chain per-sample mean gradients through the mean network"""
    mean_grads, _ = mlp_backward(policy.mean_net, states, d_mean)
    return GaussianGradients(mean_grads, np.asarray(d_log_std, dtype=np.float64))


def gaussian_sample(policy: GaussianPolicyParams, state, rng: np.random.Generator) -> np.ndarray:
    """a = mu(state) + sigma * z with z standard normal"""
    mean = mlp_forward(policy.mean_net, state)
    return mean + policy.std * rng.standard_normal(mean.shape)


def gaussian_entropy(policy: GaussianPolicyParams) -> float:
    return float(np.sum(policy.log_std + 0.5 * (1.0 + LOG_2PI)))


def gaussian_kl(
    mean_p: np.ndarray,
    log_std_p: np.ndarray,
    mean_q: np.ndarray,
    log_std_q: np.ndarray
) -> np.ndarray:
    """KL(p || q) between diagonal Gaussians, summed over the last axis"""
    var_p = np.exp(2.0 * log_std_p)
    var_q = np.exp(2.0 * log_std_q)
    return np.sum(
        log_std_q - log_std_p + (var_p + (mean_p - mean_q) ** 2) / (2.0 * var_q) - 0.5,
        axis=-1,
    )


# ---------------------------------------------------------------------------
# Named tensors
# ---------------------------------------------------------------------------

def mlp_to_tensors(params, prefix: str) -> Tensors:
    """Flatten an MlpParams (or MlpGradients) into named tensors"""
    tensors: Tensors = {}
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        tensors[f"{prefix}.{k}.weight"] = w
        tensors[f"{prefix}.{k}.bias"] = b
    return tensors


def mlp_from_tensors(tensors: Tensors, prefix: str) -> MlpParams:
    """
    Rebuild an MLP from `<prefix>.<k>.weight` / `<prefix>.<k>.bias` tensors

    Args:
        tensors: Named tensors
        prefix: Network name

    Returns:
        MlpParams: The network

    Raises:
        ConfigurationError: No layer carries the prefix
    """
    weights, biases = [], []
    k = 0
    while f"{prefix}.{k}.weight" in tensors:
        weights.append(tensors[f"{prefix}.{k}.weight"])
        biases.append(tensors[f"{prefix}.{k}.bias"])
        k += 1
    if not weights:
        raise ConfigurationError(f"no tensors found for network '{prefix}'")
    return MlpParams(tuple(weights), tuple(biases))


def policy_to_tensors(policy, prefix: str) -> Tensors:
    """Flatten a GaussianPolicyParams (or GaussianGradients) into named tensors"""
    tensors = mlp_to_tensors(policy.mean_net, f"{prefix}.mean")
    tensors[f"{prefix}.log_std"] = policy.log_std
    return tensors


def policy_from_tensors(tensors: Tensors, prefix: str) -> GaussianPolicyParams:
    """Inverse of policy_to_tensors"""
    key = f"{prefix}.log_std"
    if key not in tensors:
        raise ConfigurationError(f"missing tensor '{key}'")
    return GaussianPolicyParams(mlp_from_tensors(tensors, f"{prefix}.mean"), tensors[key])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adam_init(params: Tensors, learning_rate: float = 3e-4) -> AdamState:
    """
    Fresh optimizer state with zero moments

    Args:
        params: Named tensors the optimizer will update
        learning_rate: Step size

    Returns:
        AdamState: State at step 0
    """
    return AdamState(
        first_moment={name: np.zeros_like(t) for name, t in params.items()},
        second_moment={name: np.zeros_like(t) for name, t in params.items()},
        step=0,
        learning_rate=learning_rate,
    )


def clip_by_global_norm(grads: Tensors, max_norm: Optional[float]) -> Tuple[Tensors, float]:
    """Rescale gradients so their joint L2 norm does not exceed max_norm"""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or max_norm <= 0 or norm <= max_norm or not math.isfinite(norm):
        return grads, norm
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}, norm


def adam_step(params: Tensors, grads: Tensors, state: AdamState) -> Tuple[Tensors, AdamState]:
    """
    One bias-corrected Adam update (minimizes the function whose gradient is given)

    Args:
        params: Named parameter tensors
        grads: Named gradients, same names and shapes as params
        state: Optimizer state from the previous step

    Returns:
        Tuple[Tensors, AdamState]: New parameters and new state
    """
    if set(params) != set(grads) or set(params) != set(state.first_moment):
        raise ConfigurationError("parameter, gradient and optimizer tensor names differ")

    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    new_params: Tensors = {}
    first: Tensors = {}
    second: Tensors = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient shape {g.shape} does not match parameter '{name}' {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for '{name}' at optimizer step {step}")
        m = state.beta1 * state.first_moment[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.second_moment[name] + (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        first[name] = m
        second[name] = v

    new_state = AdamState(
        first_moment=first,
        second_moment=second,
        step=step,
        learning_rate=state.learning_rate,
        beta1=state.beta1,
        beta2=state.beta2,
        epsilon=state.epsilon,
    )
    return new_params, new_state
