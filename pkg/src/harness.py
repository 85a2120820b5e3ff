"""
Experiment harness
Evaluation of cascade stacks, the four experiment kinds, the CALNet vs
baseline comparison and checkpoint inspection
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config.settings import (
    CURRICULUM_DEFAULTS,
    EXIT_CONFIG_ERROR,
    EXIT_IO_ERROR,
    EXIT_OK,
    EXIT_TRAINING_FAULT,
)
from src.cascade import (
    CascadeStack,
    assemble,
    base_policy_actor,
    init_base_stack,
    stack_act,
    stack_from_policy_actor,
    train_attribute_module,
)
from src.checkpoint import load_modules, load_stack, read_checkpoint, save_checkpoint
from src.curriculum import CurriculumMode, CurriculumState
from src.envs import AttributeKind, EnvInstance
from src.errors import (
    CalnetError,
    CheckpointError,
    ConfigurationError,
    EnvironmentFault,
    TrainingError,
)
from src.experiment_config import ExperimentConfig, load_experiment
from src.reporting import ResultsProcessor
from src.rlcore import TrainingLogRow, curriculum_sampler, parameter_rng, start_episode, train

logger = logging.getLogger(__name__)

TRAINING_LOG_FILE = "training_log.csv"
EVAL_REPORT_FILE = "eval_report.csv"
COMPARISON_FILE = "comparison.csv"
COMPARISON_SUMMARY_FILE = "comparison_summary.csv"
BASE_CHECKPOINT_FILE = "base.ckpt"


@dataclass
class EvalReport:
    """Aggregated evaluation episodes of one stack on one environment"""
    episodes: int = 0
    successes: int = 0
    mean_return: float = 0.0
    mean_episode_length: float = 0.0
    mean_components: Dict[str, float] = field(default_factory=dict)
    mean_compensation_norms: Dict[str, float] = field(default_factory=dict)
    violations: Dict[str, int] = field(default_factory=dict)

    @property
    def success_rate_defined(self) -> bool:
        return self.episodes > 0

    @property
    def success_rate(self) -> float:
        return self.successes / self.episodes if self.episodes else 0.0


def exit_code_for(exc: BaseException) -> int:
    """Map an error to the CLI exit code"""
    if isinstance(exc, (CheckpointError, OSError)):
        return EXIT_IO_ERROR
    if isinstance(exc, ConfigurationError):
        return EXIT_CONFIG_ERROR
    return EXIT_TRAINING_FAULT


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _evaluation_sampler(env: EnvInstance, random_level: float, mode: str):
    if random_level <= 0:
        return curriculum_sampler(None, env)
    level_state = CurriculumState(initial_level=random_level, terminal_level=random_level, mode=mode)
    return curriculum_sampler(level_state, env)


def evaluate(
    stack: CascadeStack,
    env: EnvInstance,
    episodes: int,
    seed: int,
    random_level: Optional[float] = None,
    mode: str = CurriculumMode.FORWARD.value,
    terminal_level: float = CURRICULUM_DEFAULTS["terminal_level"]
) -> EvalReport:
    """
    Run deterministic evaluation episodes

    Every module acts with alpha = 1 and mean-mode outputs. Initial
    positions are sampled at the given random level (the configured
    terminal level by default).

    Args:
        stack: Stack to evaluate
        env: Environment holding every attribute the stack reads
        episodes: Number of episodes
        seed: Seed for layouts and initial positions
        random_level: Sampling radius around the anchor (0 = fixed start)
        mode: Curriculum anchor mode ("forward" or "reverse")
        terminal_level: Level used when random_level is None

    Returns:
        EvalReport: Aggregated results
    """
    for name in stack.attribute_names:
        env.attribute(name)
    stack = replace(stack, modules=tuple(replace(m, alpha=1.0) for m in stack.modules))
    level = terminal_level if random_level is None else random_level
    sampler = _evaluation_sampler(env, level, mode)
    rng = np.random.default_rng(seed)

    names = [spec.name for spec in env.attributes]
    module_names = [m.spec.name for m in stack.modules]
    component_sums = np.zeros(len(names))
    violations = np.zeros(len(names), dtype=int)
    comp_norm_sums = np.zeros(len(module_names))
    total_steps = 0
    returns: List[float] = []
    lengths: List[int] = []
    successes = 0

    for _ in range(episodes):
        world = start_episode(env, sampler, rng)
        episode_return = 0.0
        for t in range(env.horizon):
            action, compensations = stack_act(stack, world, "mean")
            world, rewards, done = env.step(world, action)
            component_sums += rewards
            violations += rewards < 0.0
            episode_return += float(np.sum(rewards))
            comp_norm_sums += [float(np.linalg.norm(a_c)) for a_c in compensations]
            total_steps += 1
            if done:
                break
        successes += int(env.reached(world))
        returns.append(episode_return)
        lengths.append(t + 1)

    violations[0] = 0  # the reaching step cost is not a violation
    report = EvalReport(
        episodes=episodes,
        successes=successes,
        mean_return=float(np.mean(returns)) if returns else 0.0,
        mean_episode_length=float(np.mean(lengths)) if lengths else 0.0,
        mean_components={n: (float(s) / episodes if episodes else 0.0) for n, s in zip(names, component_sums)},
        mean_compensation_norms={
            n: (float(s) / total_steps if total_steps else 0.0) for n, s in zip(module_names, comp_norm_sums)
        },
        violations={n: int(v) for n, v in zip(names[1:], violations[1:])},
    )
    logger.info(
        f"Evaluated {episodes} episodes at level {level:.3g}: success rate {report.success_rate:.3f}, "
        f"mean return {report.mean_return:.3f}"
    )
    return report


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

class ExperimentRunner:
    """
    Runs one validated experiment and writes its artifacts
    Orchestrates training, persistence and reporting
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.processor = ResultsProcessor()
        self.output = config.paths.output
        self.rows: List[TrainingLogRow] = []

    @property
    def terminal_level(self) -> float:
        return self.config.curriculum.terminal_level

    def eval_level(self) -> float:
        level = self.config.evaluation.random_level
        return self.terminal_level if level == "terminal" else float(level)

    def write_training_log(self, rows=None, path: Optional[Path] = None):
        self.processor.write_csv(
            self.processor.training_log_frame(self.rows if rows is None else rows),
            path or self.output / TRAINING_LOG_FILE,
        )

    def evaluate_and_report(self, stack: CascadeStack, env: EnvInstance) -> Optional[EvalReport]:
        if self.config.evaluation.episodes == 0:
            return None
        report = evaluate(stack, env, self.config.evaluation.episodes, self.config.eval_seed, self.eval_level())
        self.processor.write_csv(self.processor.eval_report_frame(report), self.output / EVAL_REPORT_FILE)
        return report

    def run(self) -> str:
        """Dispatch to the experiment kind; returns the one-line summary"""
        handler: Callable[[], str] = {
            "train_base": self.train_base,
            "train_attribute": self.train_attribute,
            "assemble_eval": self.assemble_eval,
            "compare_baseline": self.compare,
        }[self.config.kind]
        try:
            return handler()
        except (TrainingError, EnvironmentFault):
            if self.rows:
                self.write_training_log()
                logger.error(f"Training aborted; kept {len(self.rows)} log rows")
            raise

    def train_base(self) -> str:
        config = self.config
        env = config.env.with_attributes([config.env.base])
        stack = init_base_stack(env, parameter_rng(config.seed))
        result = train(
            lambda: env,
            base_policy_actor(stack),
            config.rl,
            config.curriculum.initial_state(),
            hooks=[self.rows.append],
        )
        trained = stack_from_policy_actor(result.actor)
        save_checkpoint(trained, self.output / BASE_CHECKPOINT_FILE)
        self.write_training_log()
        report = self.evaluate_and_report(trained, env)
        return _summary("train_base", len(self.rows), result.curriculum, report)

    def _prefix(self) -> CascadeStack:
        base = load_stack(self.config.paths.base_checkpoint)
        modules = load_modules(self.config.paths.module_checkpoints, base, self.config.cascade.strict_fingerprint)
        return assemble(base, modules, self.config.cascade.strict_fingerprint)

    def _attribute_env(self, prefix: CascadeStack) -> EnvInstance:
        config = self.config
        names = [m.spec.name for m in prefix.modules] + [config.cascade.attribute]
        return config.env.with_attributes([config.env.base] + [config.env.attribute(n) for n in names])

    def train_attribute(self) -> str:
        config = self.config
        prefix = self._prefix()
        env = self._attribute_env(prefix)
        spec = env.attribute(config.cascade.attribute)
        module, result = train_attribute_module(
            prefix,
            spec,
            env,
            config.rl,
            config.curriculum.initial_state(),
            config.cascade.schedule,
            config.cascade.penalty_coef,
            hooks=[self.rows.append],
        )
        save_checkpoint(module, self.output / f"module_{spec.name}.ckpt")
        self.write_training_log()
        stack = replace(prefix, modules=prefix.modules + (module,), value_net=result.actor.value_net)
        report = self.evaluate_and_report(stack, env)
        return _summary(f"train_attribute[{spec.name}]", len(self.rows), result.curriculum, report)

    def assemble_eval(self) -> str:
        stack = self._prefix()
        save_checkpoint(stack, self.output / "assembled.ckpt")
        report = self.evaluate_and_report(stack, self.config.env)
        return _summary(f"assemble_eval[{len(stack.modules)} module(s)]", 0, None, report)

    def compare(self) -> str:
        summary = compare_baseline(self.config)
        cells = ", ".join(
            f"{row.arm}: terminal at {row.terminal_iteration:g}" for row in summary.itertuples()
        )
        return f"compare_baseline: {cells}"


def _summary(label: str, iterations: int, curriculum: Optional[CurriculumState], report: Optional[EvalReport]) -> str:
    parts = [label, f"{iterations} iteration(s)"]
    if curriculum is not None:
        parts.append(f"random level {curriculum.random_level:.4g}")
    if report is not None:
        parts.append(f"success rate {report.success_rate:.3f} over {report.episodes} episode(s)")
    return ", ".join(parts)


# ---------------------------------------------------------------------------
# Baseline comparison
# ---------------------------------------------------------------------------

def _run_arm(arm: str, config: ExperimentConfig, base: CascadeStack) -> Tuple[pd.DataFrame, int, Any]:
    """Train one arm; returns its log frame, environment steps and trained object"""
    processor = ResultsProcessor()
    env = config.env.with_attributes([config.env.base, config.env.attribute(config.cascade.attribute)])
    spec = env.attribute(config.cascade.attribute)
    rl = replace(config.rl, stop_at_terminal=False)

    if arm == "calnet_cl":
        module, result = train_attribute_module(
            base, spec, env, rl,
            config.curriculum.initial_state(CurriculumMode.FORWARD.value),
            config.cascade.schedule,
            config.cascade.penalty_coef,
        )
        trained = module
    else:
        mode = CurriculumMode.REVERSE.value if arm == "baseline_rcl" else CurriculumMode.FORWARD.value
        stack = init_base_stack(env, parameter_rng(config.seed), specs=env.attributes)
        result = train(lambda: env, base_policy_actor(stack), rl, config.curriculum.initial_state(mode))
        trained = stack_from_policy_actor(result.actor)
    return processor.training_log_frame(result.log), result.env_steps, trained


def compare_baseline(config: ExperimentConfig) -> pd.DataFrame:
    """
    Train the comparison arms on base + attribute with identical seeds and budgets

    Arms: CALNet module behind the pretrained base with forward CL, PPO from
    scratch with forward CL, PPO from scratch with reverse CL. A failing arm
    is logged and reported without stopping the others.

    Args:
        config: compare_baseline experiment

    Returns:
        pd.DataFrame: Per-arm summary (also written to comparison_summary.csv)
    """
    if config.env.attribute(config.cascade.attribute).kind is AttributeKind.REACHING:
        raise ConfigurationError("cascade.attribute: the comparison needs a non-reaching attribute")
    processor = ResultsProcessor()
    output = config.paths.output / "compare"
    base = load_stack(config.paths.base_checkpoint)
    arms = list(config.compare.arms)

    def attempt(arm: str):
        try:
            return _run_arm(arm, config, base), "ok"
        except CalnetError as exc:
            logger.warning(f"Comparison arm '{arm}' failed: {exc}")
            return None, f"failed: {exc}"

    if config.compare.parallel and len(arms) > 1:
        with ThreadPoolExecutor(max_workers=len(arms)) as pool:
            outcomes = list(pool.map(attempt, arms))
    else:
        outcomes = [attempt(arm) for arm in arms]

    logs: Dict[str, pd.DataFrame] = {}
    steps: Dict[str, int] = {}
    statuses: Dict[str, str] = {}
    for arm, (outcome, status) in zip(arms, outcomes):
        statuses[arm] = status
        if outcome is None:
            logs[arm] = processor.training_log_frame([])
            steps[arm] = 0
            continue
        log_df, env_steps, trained = outcome
        logs[arm] = log_df
        steps[arm] = env_steps
        save_checkpoint(trained, output / f"{arm}.ckpt")

    processor.write_csv(processor.comparison_frame(logs), output / COMPARISON_FILE)
    summary = processor.comparison_summary(logs, steps, statuses, config.curriculum.terminal_level)
    processor.write_csv(summary, output / COMPARISON_SUMMARY_FILE)
    return summary


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def run(config_path, expected_kind: Optional[str] = None) -> int:
    """
    Load an experiment file, run it and map failures to exit codes

    Args:
        config_path: YAML experiment file
        expected_kind: Reject files of any other experiment kind

    Returns:
        int: 0 success, 2 configuration error, 3 training fault, 4 I/O error
    """
    try:
        config = load_experiment(config_path)
        if expected_kind is not None and config.kind != expected_kind:
            raise ConfigurationError(f"experiment: expected '{expected_kind}', got '{config.kind}'")
        summary = ExperimentRunner(config).run()
    except (CalnetError, OSError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return exit_code_for(exc)
    print(summary)
    return EXIT_OK


def run_evaluation(
    checkpoints: List[str],
    env: EnvInstance,
    episodes: int,
    seed: int,
    out: Optional[str] = None,
    random_level: Optional[float] = None,
    strict_fingerprint: bool = False,
    terminal_level: float = CURRICULUM_DEFAULTS["terminal_level"]
) -> EvalReport:
    """Assemble a stack from checkpoint files (stack first, then modules) and evaluate it"""
    if not checkpoints:
        raise ConfigurationError("--stack: at least one checkpoint is required")
    base = load_stack(checkpoints[0])
    if base.modules and len(checkpoints) > 1:
        raise ConfigurationError("--stack: extra modules can only follow a module-free base stack")
    stack = assemble(base, load_modules(checkpoints[1:], base, strict_fingerprint), strict_fingerprint) \
        if not base.modules else base
    report = evaluate(stack, env, episodes, seed, random_level, terminal_level=terminal_level)
    if out:
        processor = ResultsProcessor()
        processor.write_csv(processor.eval_report_frame(report), out)
    return report


def inspect_checkpoint(path) -> Dict[str, Any]:
    """Checkpoint metadata plus the name and shape of every tensor"""
    metadata, tensors = read_checkpoint(path)
    return {
        "metadata": metadata,
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in sorted(tensors.items())],
    }
