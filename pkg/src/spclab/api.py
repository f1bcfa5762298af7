"""Main API for spclab: training runs, evaluation, regret studies and plots"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from spclab.core.bandit import UpdateRule
from spclab.core.envs import EnvConfig
from spclab.core.orchestrator import EvaluationResult, RoundRecord, SPCRunner, evaluate_target
from spclab.core.regret import LipschitzBanditInstance, scaling_study
from spclab.core.student import NearestLandmarkController, RandomController
from spclab.core.teacher import ENV_FAMILIES, TaskSpec
from spclab.utils import export
from spclab.utils.checkpoint import latest_checkpoint, load_checkpoint
from spclab.utils.errors import ConfigError
from spclab.utils.validate import (
    ExperimentConfig,
    load_experiment_config,
    validate_regret_inputs,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
POLICIES = ("checkpoint", "random", "nearest")


def train(
    config: Union[PathLike, ExperimentConfig],
    seed: Optional[int] = None,
    rounds: Optional[int] = None,
    output: Optional[PathLike] = None,
    workers: Optional[int] = None,
    progress: bool = False,
    callback: Optional[Callable[[RoundRecord], None]] = None,
) -> pd.DataFrame:
    """Run a full curriculum experiment

    Coordinates the teacher rounds:
    1. Load and validate the experiment config
    2. Apply run-block overrides
    3. Run the teacher rounds, writing logs and checkpoints

    Args:
        config: Path to a JSON config or an ExperimentConfig
        seed: Override of run.seed
        rounds: Override of run.rounds
        output: Override of run.output (the run directory)
        workers: Override of run.workers
        progress: Show a progress bar over rounds
        callback: Called with each completed RoundRecord

    Returns:
        pandas DataFrame with one row per teacher round

    Raises:
        ConfigError: If the config is malformed or an override is invalid
        RoundAbortedError: If a round fails

    Examples:
        >>> frame = train("configs/mpe_spread.json", seed=7, rounds=5, output="runs/s7")
        >>> frame[["round", "task_id", "target_coverage"]]
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_experiment_config(config)
    cfg = cfg.with_run(seed=seed, rounds=rounds,
                       output=str(output) if output is not None else None, workers=workers)
    if cfg.run.rounds < 1 or cfg.run.workers < 1:
        raise ConfigError("rounds and workers must be >= 1")

    runner = SPCRunner(cfg, output_dir=Path(cfg.run.output), progress=progress)
    records = runner.run(callback=callback)
    columns = export.run_columns(len(runner.task_set))
    return pd.DataFrame([r.to_row() for r in records], columns=columns)


def evaluate(
    checkpoint: Optional[PathLike] = None,
    policy: str = "checkpoint",
    env_family: Optional[str] = None,
    population: Optional[int] = None,
    max_steps: Optional[int] = None,
    episodes: int = 5,
    gamma: Optional[float] = None,
    seed: int = 0,
) -> Tuple[EvaluationResult, TaskSpec]:
    """Evaluate a trained student or a scripted baseline on one task

    Task fields left as None default to the checkpoint's target task, or to
    Simple-Spread with 4 agents and 25 steps for scripted policies.

    Args:
        checkpoint: Checkpoint directory or run directory (latest checkpoint)
        policy: 'checkpoint', 'random' or 'nearest'
        env_family: 'simple_spread' or 'push_ball'
        population: Number of agents
        max_steps: Episode cap
        episodes: Evaluation episodes
        gamma: Discount (checkpoint's training discount by default, else 0.99)
        seed: Evaluation seed

    Returns:
        (EvaluationResult, evaluated TaskSpec)

    Raises:
        ConfigError: On an unknown policy or family, or a missing checkpoint path
        CheckpointError: If the checkpoint cannot be loaded

    Examples:
        >>> result, task = evaluate("runs/s7", population=8, episodes=20)
        >>> result.mean_coverage
    """
    if policy not in POLICIES:
        raise ConfigError(f"Unknown policy '{policy}'. Supported: {', '.join(POLICIES)}")
    if episodes < 1:
        raise ConfigError(f"episodes must be >= 1, got {episodes}")

    target: Dict = {"env_family": "simple_spread", "population": 4, "max_steps": 25}
    env_config = EnvConfig()
    discount = 0.99
    if policy == "checkpoint":
        if checkpoint is None:
            raise ConfigError("--checkpoint is required for policy 'checkpoint'")
        restored = load_checkpoint(latest_checkpoint(checkpoint))
        meta = restored.manifest.get("metadata", {})
        target.update(meta.get("target", {}))
        if "env" in meta:
            env_config = EnvConfig(**meta["env"])
        discount = meta.get("gamma", discount)
        controller = restored.policy
    elif policy == "random":
        controller = RandomController()
    else:
        controller = NearestLandmarkController()

    family = env_family or target["env_family"]
    if family not in ENV_FAMILIES:
        raise ConfigError(f"Unknown env_family '{family}'. Supported: {', '.join(ENV_FAMILIES)}")
    task = TaskSpec(
        family,
        population if population is not None else int(target["population"]),
        max_steps if max_steps is not None else int(target["max_steps"]),
    )
    result = evaluate_target(
        controller, task, episodes, gamma if gamma is not None else discount,
        seed=seed, env_config=env_config,
    )
    logger.info("Evaluated %s on %s: return %.4f, coverage %.3f",
                policy, task.label, result.mean_return, result.mean_coverage)
    return result, task


def regret_bench(
    arms: int = 4,
    lipschitz: float = 1.0,
    horizons: Sequence[int] = (2500, 10000, 40000),
    seeds: int = 20,
    rules: Sequence[str] = tuple(r.value for r in UpdateRule),
    workers: int = 1,
    instance_seed: int = 0,
    output: Optional[PathLike] = None,
    progress: bool = False,
) -> Tuple[pd.DataFrame, Dict]:
    """Regret scaling study of mesh-discretised Exp3 on a Lipschitz family

    Args:
        arms: Number of arms K
        lipschitz: Lipschitz constant L of the family
        horizons: At least two horizons
        seeds: Runs per horizon and rule
        rules: Exp3 update rules to compare; every rule by default
        workers: Process pool size
        instance_seed: Seed of the random anchor placement
        output: Directory for regret.csv and summary.json (nothing written when None)
        progress: Show a progress bar

    Returns:
        (per-run DataFrame with a rule column, summary dict with one fitted
        log-log slope per rule)

    Raises:
        ConfigError: On invalid arguments

    Examples:
        >>> frame, summary = regret_bench(arms=4, horizons=[2500, 10000], seeds=5)
        >>> summary["rules"]["importance_weighted"]["slope"]
    """
    validate_regret_inputs(arms, lipschitz, horizons, seeds)
    if isinstance(rules, str):
        rules = [rules]
    try:
        rules = [UpdateRule(r) for r in rules]
    except ValueError as e:
        raise ConfigError(str(e))
    if not rules:
        raise ConfigError("regret_bench needs at least one update rule")
    instance = LipschitzBanditInstance.random(arms, lipschitz, instance_seed)
    frame, summary = scaling_study(instance, horizons, seeds, rules=rules,
                                   workers=max(1, workers), progress=progress)
    summary["instance_seed"] = instance_seed
    summary["anchors"] = np.asarray(instance.anchors).round(12).tolist()
    if output is not None:
        output = Path(output)
        export.write_csv(frame, output / "regret.csv")
        export.write_json(summary, output / "summary.json")
    return frame, summary


def plot_run(run_dir: PathLike, csv_only: bool = False) -> List[str]:
    """Render the task distribution and learning curves of a finished run

    Args:
        run_dir: Directory holding run.csv
        csv_only: Write task_distribution.csv and coverage.csv instead of images

    Returns:
        Paths of the written files

    Raises:
        SpcError: If the run has no log
    """
    run_dir = Path(run_dir)
    frame = export.read_run_log(run_dir)
    frame = frame[frame["status"] == "ok"] if "status" in frame.columns else frame
    if csv_only:
        return [
            export.write_csv(export.task_distribution_frame(frame), run_dir / "task_distribution.csv"),
            export.write_csv(export.coverage_frame(frame), run_dir / "coverage.csv"),
        ]
    return [
        export.plot_task_distribution(frame, run_dir / "task_distribution.png"),
        export.plot_coverage(frame, run_dir / "coverage.png"),
        export.plot_returns(frame, run_dir / "returns.png"),
    ]
