"""
Experiment configuration loading
YAML experiment files parsed into frozen dataclasses; unknown keys and
ill-typed values are reported by their dotted path
"""
import logging
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from config.settings import (
    CASCADE_DEFAULTS,
    COMPARISON_ARMS,
    CURRICULUM_DEFAULTS,
    CURRICULUM_MODES,
    EVAL_EPISODES,
    EXPERIMENT_KINDS,
    OUTPUT_DIR_ENV_VAR,
    SEED_ENV_VAR,
)
from src.cascade import AlphaSchedule
from src.curriculum import CurriculumState
from src.envs import AttributeSpec, EnvInstance
from src.errors import ConfigurationError
from src.rlcore import RlConfig

logger = logging.getLogger(__name__)

TOP_LEVEL_KEYS = ("experiment", "seed", "environment", "rl", "curriculum", "cascade", "evaluation", "paths", "compare")
ENVIRONMENT_KEYS = (
    "agent", "attributes", "dt", "mass", "force_bound", "velocity_bound", "agent_radius",
    "reach_radius", "workspace_half_extent", "horizon", "start", "target", "link_lengths",
)
ATTRIBUTE_ENTRY_KEYS = ("kind", "name", "params")


@dataclass(frozen=True)
class CurriculumConfig:
    enabled: bool = True
    mode: str = CURRICULUM_DEFAULTS["mode"]
    initial_level: float = CURRICULUM_DEFAULTS["initial_level"]
    terminal_level: float = CURRICULUM_DEFAULTS["terminal_level"]
    increase_rate: float = CURRICULUM_DEFAULTS["increase_rate"]
    threshold: float = CURRICULUM_DEFAULTS["threshold"]
    capacity: int = CURRICULUM_DEFAULTS["capacity"]

    def __post_init__(self):
        if self.mode not in CURRICULUM_MODES:
            raise ConfigurationError(f"curriculum.mode: must be one of {CURRICULUM_MODES}")
        if self.increase_rate <= 0:
            raise ConfigurationError("curriculum.increase_rate: must be positive")

    def initial_state(self, mode: Optional[str] = None) -> Optional[CurriculumState]:
        """Fresh curriculum state, or None when the curriculum is disabled"""
        if not self.enabled:
            return None
        return CurriculumState(
            initial_level=self.initial_level,
            terminal_level=self.terminal_level,
            growth=1.0 + self.increase_rate,
            threshold=self.threshold,
            capacity=self.capacity,
            mode=mode or self.mode,
        )


@dataclass(frozen=True)
class CascadeConfig:
    alpha_start: float = CASCADE_DEFAULTS["alpha_start"]
    ramp_fraction: float = CASCADE_DEFAULTS["ramp_fraction"]
    penalty_coef: float = CASCADE_DEFAULTS["penalty_coef"]
    strict_fingerprint: bool = CASCADE_DEFAULTS["strict_fingerprint"]
    finetune: bool = CASCADE_DEFAULTS["finetune"]
    attribute: Optional[str] = None

    def __post_init__(self):
        if self.penalty_coef < 0:
            raise ConfigurationError("cascade.penalty_coef: must be non-negative")
        AlphaSchedule(self.alpha_start, self.ramp_fraction)

    @property
    def schedule(self) -> AlphaSchedule:
        return AlphaSchedule(self.alpha_start, self.ramp_fraction)


@dataclass(frozen=True)
class EvaluationConfig:
    episodes: int = EVAL_EPISODES
    seed: Optional[int] = None
    random_level: Union[str, float] = "terminal"

    def __post_init__(self):
        if self.episodes < 0:
            raise ConfigurationError("evaluation.episodes: must be non-negative")
        if isinstance(self.random_level, str) and self.random_level != "terminal":
            raise ConfigurationError("evaluation.random_level: must be a number or 'terminal'")


@dataclass(frozen=True)
class PathsConfig:
    output_dir: str = "results"
    base_checkpoint: Optional[str] = None
    module_checkpoints: Tuple[str, ...] = ()

    @property
    def output(self) -> Path:
        return Path(self.output_dir)


@dataclass(frozen=True)
class CompareConfig:
    arms: Tuple[str, ...] = tuple(COMPARISON_ARMS)
    parallel: bool = False

    def __post_init__(self):
        unknown = sorted(set(self.arms) - set(COMPARISON_ARMS))
        if unknown:
            raise ConfigurationError(f"compare.arms: unknown arm(s) {unknown}")


@dataclass(frozen=True)
class ExperimentConfig:
    """A fully validated experiment"""
    kind: str
    seed: int
    env: EnvInstance
    rl: RlConfig
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    cascade: CascadeConfig = field(default_factory=CascadeConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    @property
    def eval_seed(self) -> int:
        return self.evaluation.seed if self.evaluation.seed is not None else self.seed


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def _check_keys(raw: Any, path: str, allowed) -> Dict[str, Any]:
    if raw is None:
        return {}
    if not isinstance(raw, Mapping):
        raise ConfigurationError(f"{path}: expected a mapping, got {type(raw).__name__}")
    for key in raw:
        if key not in allowed:
            raise ConfigurationError(f"{path}.{key}: unknown key" if path else f"{key}: unknown key")
    return dict(raw)


def _coerce(path: str, value: Any, default: Any) -> Any:
    """Check a scalar against the type of its default"""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, raw: Any, path: str, untyped: Tuple[str, ...] = (), **overrides):
    """Instantiate a config dataclass from a mapping, typed by its defaults"""
    allowed = [f.name for f in fields(cls)]
    values = _check_keys(raw, path, allowed)
    defaults = cls()
    kwargs = {
        key: value if key in untyped else _coerce(f"{path}.{key}", value, getattr(defaults, key))
        for key, value in values.items()
    }
    kwargs.update(overrides)
    try:
        return cls(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def environment_from_dict(raw: Any, path: str = "environment") -> EnvInstance:
    """
    Build an EnvInstance from the `environment` section

    Args:
        raw: Mapping with agent, attributes and optional physics overrides
        path: Dotted prefix for error messages

    Returns:
        EnvInstance: Validated environment
    """
    values = _check_keys(raw, path, ENVIRONMENT_KEYS)
    defaults = EnvInstance()
    attributes = []
    for k, entry in enumerate(values.pop("attributes", None) or [{"kind": "reaching"}]):
        entry = _check_keys(entry, f"{path}.attributes[{k}]", ATTRIBUTE_ENTRY_KEYS)
        if "kind" not in entry:
            raise ConfigurationError(f"{path}.attributes[{k}].kind: missing")
        try:
            attributes.append(AttributeSpec(entry["kind"], entry.get("name", ""), entry.get("params") or {}))
        except ConfigurationError as exc:
            raise ConfigurationError(f"{path}.attributes[{k}]: {exc}") from exc

    kwargs = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        kwargs[key] = value if key == "agent" else _coerce(f"{path}.{key}", value, default)
    try:
        return EnvInstance(attributes=tuple(attributes), **kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def _seed_override(seed: int) -> int:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None or raw == "":
        return seed
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{SEED_ENV_VAR}: expected an integer, got {raw!r}")
    logger.info(f"Seed overridden by {SEED_ENV_VAR}={value}")
    return value


def parse_experiment(raw: Any) -> ExperimentConfig:
    """Validate a loaded YAML document"""
    values = _check_keys(raw, "", TOP_LEVEL_KEYS)
    kind = values.get("experiment")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigurationError(f"experiment: must be one of {EXPERIMENT_KINDS}, got {kind!r}")
    seed = _seed_override(_coerce("seed", values.get("seed", 0), 0))

    paths = _build(PathsConfig, values.get("paths"), "paths")
    output_dir = os.environ.get(OUTPUT_DIR_ENV_VAR)
    if output_dir:
        paths = PathsConfig(output_dir, paths.base_checkpoint, paths.module_checkpoints)

    config = ExperimentConfig(
        kind=kind,
        seed=seed,
        env=environment_from_dict(values.get("environment")),
        rl=_build(RlConfig, values.get("rl"), "rl", seed=seed),
        curriculum=_build(CurriculumConfig, values.get("curriculum"), "curriculum"),
        cascade=_build(CascadeConfig, values.get("cascade"), "cascade"),
        evaluation=_build(EvaluationConfig, values.get("evaluation"), "evaluation", untyped=("random_level",)),
        paths=paths,
        compare=_build(CompareConfig, values.get("compare"), "compare"),
    )
    _check_references(config)
    return config


def _check_references(config: ExperimentConfig):
    needs_base = config.kind in ("train_attribute", "assemble_eval", "compare_baseline")
    if needs_base and not config.paths.base_checkpoint:
        raise ConfigurationError(f"paths.base_checkpoint: required for experiment '{config.kind}'")
    referenced = ([config.paths.base_checkpoint] if needs_base else []) + (
        list(config.paths.module_checkpoints) if config.kind in ("train_attribute", "assemble_eval") else []
    )
    for ref in referenced:
        if not Path(ref).is_file():
            raise ConfigurationError(f"paths: checkpoint '{ref}' does not exist")
    if config.kind in ("train_attribute", "compare_baseline"):
        if not config.cascade.attribute:
            raise ConfigurationError(f"cascade.attribute: required for experiment '{config.kind}'")
        config.env.attribute(config.cascade.attribute)
    if config.cascade.finetune:
        raise ConfigurationError("cascade.finetune: fine-tuning assembled stacks is not implemented")


def load_experiment(path) -> ExperimentConfig:
    """
    Read and validate an experiment file

    Args:
        path: YAML file

    Returns:
        ExperimentConfig: Validated configuration

    Raises:
        ConfigurationError: Unreadable file, YAML syntax error or invalid field
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc
    config = parse_experiment(raw)
    logger.info(f"Loaded '{config.kind}' experiment from {path} (seed {config.seed})")
    return config


def _read_document(path) -> Any:
    try:
        return yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML ({exc})") from exc


def load_environment(path) -> EnvInstance:
    """The environment section of an experiment file (for `calnet eval --env`)"""
    raw = _read_document(path)
    if isinstance(raw, Mapping) and "environment" in raw:
        raw = raw["environment"]
    return environment_from_dict(raw)


def load_terminal_level(path) -> float:
    """
    The curriculum terminal level an experiment file trains towards

    Args:
        path: Experiment file or bare environment file

    Returns:
        float: `curriculum.terminal_level`, or the default when the file has no curriculum section
    """
    raw = _read_document(path)
    if not isinstance(raw, Mapping) or "environment" not in raw:
        return CURRICULUM_DEFAULTS["terminal_level"]
    return _build(CurriculumConfig, raw.get("curriculum"), "curriculum").terminal_level
