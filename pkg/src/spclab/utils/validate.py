"""Experiment configuration parsing and input validation"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Type, Union

from spclab.core.bandit import UpdateRule
from spclab.core.envs import EnvConfig
from spclab.core.imitation import ImitationConfig
from spclab.core.student import StudentConfig
from spclab.core.teacher import ENV_FAMILIES, TaskSpec, TeacherMode
from spclab.core.trainer import TrainConfig
from spclab.utils.errors import ConfigError, SpcError


@dataclass(frozen=True)
class TaskSpaceConfig:
    """Training populations and the target task

    Attributes:
        env_family: 'simple_spread' or 'push_ball'
        populations: Training population sizes, one teacher arm each
        max_steps: Episode cap
        target_population: Population of the evaluation task
    """
    env_family: str = "simple_spread"
    populations: Tuple[int, ...] = (2, 4, 8, 16)
    max_steps: int = 25
    target_population: int = 4

    @property
    def target_in_task_set(self) -> bool:
        return self.target_population in self.populations

    @property
    def target_task_id(self):
        if not self.target_in_task_set:
            return None
        return self.populations.index(self.target_population)

    def target_spec(self) -> TaskSpec:
        return TaskSpec(self.env_family, self.target_population, self.max_steps,
                        task_id=self.target_task_id if self.target_in_task_set else -1)

    def allowed_populations(self) -> List[int]:
        return sorted(set(self.populations) | {self.target_population})


@dataclass(frozen=True)
class TeacherConfig:
    """Teacher bandit, clustering and round granularity

    Attributes:
        mode: spc, bandit, uniform or none
        alpha: Exp3 mixing rate
        update_rule: paper_literal or importance_weighted
        max_clusters: Cap on published clusters
        branching_factor: CF tree branching factor
        merge_threshold: Max leaf radius in standardised units
        rebuild_every: Insertions between global rebuilds
        buffer_capacity: Contexts kept by the teacher
        train_episodes: Training episodes per round
        eval_episodes: Target-task evaluation episodes per round
    """
    mode: str = "spc"
    alpha: float = 0.1
    update_rule: str = "paper_literal"
    max_clusters: int = 4
    branching_factor: int = 8
    merge_threshold: float = 0.5
    rebuild_every: int = 50
    buffer_capacity: int = 512
    train_episodes: int = 10
    eval_episodes: int = 5


@dataclass(frozen=True)
class RunConfig:
    """Run length, seeding and outputs

    Attributes:
        rounds: Teacher rounds
        seed: Master seed
        output: Run directory
        checkpoint_every: Rounds between checkpoints (0 writes only the final one)
        workers: Rollout processes
        dump_trajectories: Write trajectories.jsonl
    """
    rounds: int = 50
    seed: int = 0
    output: str = "runs/default"
    checkpoint_every: int = 10
    workers: int = 1
    dump_trajectories: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    """Every block of one experiment"""
    task_space: TaskSpaceConfig = field(default_factory=TaskSpaceConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    imitation: ImitationConfig = field(default_factory=ImitationConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["task_space"]["populations"] = list(self.task_space.populations)
        return data

    def with_run(self, **changes) -> "ExperimentConfig":
        """Copy with run-block values replaced (None values are ignored)"""
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, run=replace(self.run, **changes))


BLOCKS: Dict[str, Type] = {
    "task_space": TaskSpaceConfig,
    "env": EnvConfig,
    "teacher": TeacherConfig,
    "imitation": ImitationConfig,
    "student": StudentConfig,
    "trainer": TrainConfig,
    "run": RunConfig,
}


def validate_block_keys(name: str, block: Any, cls: Type) -> Dict[str, Any]:
    """Check a config block is an object whose keys all exist on its dataclass

    Raises:
        ConfigError: On a non-object block or an unknown key
    """
    if not isinstance(block, dict):
        raise ConfigError(f"Config block '{name}' must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(block) - known)
    if unknown:
        raise ConfigError(
            f"Unknown key(s) in block '{name}': {', '.join(unknown)}. "
            f"Allowed: {', '.join(sorted(known))}"
        )
    return block


def validate_populations(populations: Sequence[int]) -> Tuple[int, ...]:
    """Validate the training population list

    Raises:
        ConfigError: If the list is empty, repeats a value or holds non-positive sizes
    """
    if not isinstance(populations, (list, tuple)) or not populations:
        raise ConfigError("task_space.populations must be a non-empty list")
    if any(not isinstance(n, int) or isinstance(n, bool) or n < 1 for n in populations):
        raise ConfigError(f"populations must be positive integers, got {list(populations)}")
    if len(set(populations)) != len(populations):
        raise ConfigError(f"populations must be distinct, got {list(populations)}")
    return tuple(populations)


def validate_task_space(block: Dict[str, Any]) -> TaskSpaceConfig:
    """Build the task-space block and check the target against the populations

    Raises:
        ConfigError: On an unknown family or a target below the largest training size
            that is not itself a training size
    """
    block = dict(block)
    if "populations" in block:
        block["populations"] = validate_populations(block["populations"])
    cfg = TaskSpaceConfig(**block)
    if cfg.env_family not in ENV_FAMILIES:
        raise ConfigError(
            f"Unknown env_family '{cfg.env_family}'. Supported: {', '.join(ENV_FAMILIES)}"
        )
    if cfg.max_steps < 1:
        raise ConfigError(f"max_steps must be >= 1, got {cfg.max_steps}")
    if not cfg.target_in_task_set and cfg.target_population <= max(cfg.populations):
        raise ConfigError(
            f"target_population {cfg.target_population} must appear in the training "
            f"populations {list(cfg.populations)} or exceed all of them"
        )
    return cfg


def validate_teacher(block: Dict[str, Any], task_space: TaskSpaceConfig) -> TeacherConfig:
    """Build the teacher block

    Raises:
        ConfigError: On unknown mode or rule, out-of-range alpha, or mode 'none'
            without the target in the task set
    """
    cfg = TeacherConfig(**block)
    try:
        mode = TeacherMode(cfg.mode)
        UpdateRule(cfg.update_rule)
    except ValueError as e:
        raise ConfigError(str(e))
    if not 0.0 < cfg.alpha <= 1.0:
        raise ConfigError(f"teacher.alpha must lie in (0, 1], got {cfg.alpha}")
    if cfg.max_clusters < 1 or cfg.branching_factor < 2:
        raise ConfigError("teacher.max_clusters must be >= 1 and branching_factor >= 2")
    if cfg.merge_threshold <= 0.0:
        raise ConfigError(f"teacher.merge_threshold must be > 0, got {cfg.merge_threshold}")
    if cfg.train_episodes < 1 or cfg.eval_episodes < 1:
        raise ConfigError("teacher.train_episodes and eval_episodes must be >= 1")
    if mode is TeacherMode.NONE and not task_space.target_in_task_set:
        raise ConfigError("teacher mode 'none' needs the target population in the task set")
    return cfg


def validate_run(block: Dict[str, Any]) -> RunConfig:
    cfg = RunConfig(**block)
    if cfg.rounds < 1:
        raise ConfigError(f"run.rounds must be >= 1, got {cfg.rounds}")
    if cfg.workers < 1:
        raise ConfigError(f"run.workers must be >= 1, got {cfg.workers}")
    if cfg.checkpoint_every < 0:
        raise ConfigError(f"run.checkpoint_every must be >= 0, got {cfg.checkpoint_every}")
    return cfg


def parse_experiment_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a decoded config document

    Raises:
        ConfigError: On missing blocks, unknown keys or invalid values
    """
    if not isinstance(data, dict):
        raise ConfigError("Experiment config must be a JSON object")
    unknown = sorted(set(data) - set(BLOCKS))
    if unknown:
        raise ConfigError(f"Unknown config block(s): {', '.join(unknown)}")
    missing = [name for name in BLOCKS if name not in data]
    if missing:
        raise ConfigError(f"Missing config block(s): {', '.join(missing)}")
    for name, cls in BLOCKS.items():
        validate_block_keys(name, data[name], cls)

    try:
        task_space = validate_task_space(data["task_space"])
        return ExperimentConfig(
            task_space=task_space,
            env=EnvConfig(**data["env"]),
            teacher=validate_teacher(data["teacher"], task_space),
            imitation=ImitationConfig(**data["imitation"]),
            student=StudentConfig(**data["student"]),
            trainer=TrainConfig(**data["trainer"]),
            run=validate_run(data["run"]),
        )
    except ConfigError:
        raise
    except (SpcError, TypeError, ValueError) as e:
        raise ConfigError(f"Invalid experiment config: {e}")


def load_experiment_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON experiment config

    Raises:
        ConfigError: If the file is missing, not JSON, or invalid
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}")
    return parse_experiment_config(data)


def parse_int_list(text: str, name: str) -> List[int]:
    """Parse a comma-separated list of positive integers such as '2500,10000'

    Raises:
        ConfigError: If any entry is not a positive integer
    """
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"{name} must be comma-separated integers, got '{text}'")
    if not values or any(v < 1 for v in values):
        raise ConfigError(f"{name} must hold positive integers, got '{text}'")
    return values


def validate_regret_inputs(arms: int, lipschitz: float, horizons: Sequence[int], seeds: int) -> None:
    """Check regret-bench arguments

    Raises:
        ConfigError: On invalid counts or a non-positive Lipschitz constant
    """
    if arms < 1:
        raise ConfigError(f"arms must be >= 1, got {arms}")
    if lipschitz <= 0:
        raise ConfigError(f"lipschitz must be > 0, got {lipschitz}")
    if len(horizons) < 2 or any(t < 2 for t in horizons):
        raise ConfigError("regret-bench needs at least two horizons, each >= 2")
    if seeds < 1:
        raise ConfigError(f"seeds must be >= 1, got {seeds}")
