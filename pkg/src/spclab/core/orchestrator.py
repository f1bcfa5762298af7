"""Teacher rounds: context, task choice, training, evaluation, feedback

One round of the curriculum loop:

1. refresh the imitation model on recent student data and extract a context
2. teacher.observe_context
3. teacher.sample_task (the distribution is logged)
4. training episodes on the sampled task, then one PPO update of both levels
5. greedy evaluation episodes on the target task
6. teacher.report_return with the target-task discounted return

Every episode draws its seeds from (run seed, round, phase, episode), so a run
is reproducible for a given config and seed whatever the worker count.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from spclab.core.envs import EnvConfig, make_task
from spclab.core.imitation import (
    ImitationBuffer,
    ImitationModel,
    extract_context,
    train_imitation,
)
from spclab.core.student import (
    HierarchicalPolicy,
    PolicySnapshot,
    RolloutResult,
    hierarchical_rollout,
    run_episode,
)
from spclab.core.teacher import Teacher, TaskSpec, TeacherMode, build_task_set
from spclab.core.trainer import PPOTrainer, concat_batches
from spclab.utils import export
from spclab.utils.checkpoint import save_checkpoint
from spclab.utils.errors import ContractViolationError, RoundAbortedError
from spclab.utils.validate import ExperimentConfig

logger = logging.getLogger(__name__)

PHASE_BOOTSTRAP = 0
PHASE_TRAIN = 1
PHASE_EVAL = 2
SUPPORT_TOLERANCE = 0.0
RUN_LOGS = ("run.csv", "contexts.csv", "updates.csv", "trajectories.jsonl")


def episode_seeds(seed: int, round_index: int, phase: int, episode: int) -> Tuple[int, int]:
    """(environment seed, sampling seed) of one episode"""
    state = np.random.SeedSequence([seed, round_index, phase, episode]).generate_state(2)
    return int(state[0]), int(state[1])


@dataclass
class RoundRecord:
    """One row of run.csv"""
    round: int
    cluster_id: int
    task_id: int
    probabilities: np.ndarray
    raw_return: float
    norm_reward: float
    target_return: float
    target_coverage: float
    J_hat: float
    status: str = "ok"

    def to_row(self) -> Dict:
        row = {"round": self.round, "cluster_id": self.cluster_id, "task_id": self.task_id}
        row.update({f"p_{k}": float(p) for k, p in enumerate(self.probabilities)})
        row.update({
            "raw_return": self.raw_return,
            "norm_reward": self.norm_reward,
            "target_return": self.target_return,
            "target_coverage": self.target_coverage,
            "J_hat": self.J_hat,
            "status": self.status,
        })
        return row


@dataclass
class EvaluationResult:
    """Per-episode discounted returns and final coverages on one task"""
    returns: np.ndarray
    coverages: np.ndarray

    @property
    def mean_return(self) -> float:
        return float(np.mean(self.returns))

    @property
    def mean_coverage(self) -> float:
        return float(np.mean(self.coverages))

    @property
    def standard_error(self) -> float:
        if self.returns.size < 2:
            return 0.0
        return float(np.std(self.returns, ddof=1) / np.sqrt(self.returns.size))

    def __iter__(self):
        yield self.mean_return
        yield self.mean_coverage


def estimate_objective(q: np.ndarray, p: np.ndarray, values: np.ndarray) -> float:
    """Importance-weighted objective sum_phi q * (p / q) * V

    Tasks with p > 0 but q == 0 are reported as a support violation and
    contribute their direct term p * V instead.

    Raises:
        ContractViolationError: If q or p is not a distribution or values are not finite
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if q.shape != p.shape or p.shape != values.shape:
        raise ContractViolationError(
            f"q, p and values must share a shape, got {q.shape}, {p.shape}, {values.shape}"
        )
    for name, dist in (("q", q), ("p", p)):
        if np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-9:
            raise ContractViolationError(f"{name} is not a probability distribution")
    if not np.all(np.isfinite(values)):
        raise ContractViolationError("value estimates must be finite")

    supported = q > SUPPORT_TOLERANCE
    violated = (~supported) & (p > 0)
    if np.any(violated):
        logger.warning("Support violation: q = 0 where p > 0 for tasks %s",
                       np.flatnonzero(violated).tolist())
    weights = np.where(supported, p / np.where(supported, q, 1.0), 0.0)
    total = float(np.sum(q * weights * values))
    return total + float(np.sum(np.where(violated, p * values, 0.0)))


def _rollout_job(args) -> RolloutResult:
    snapshot, spec, env_config, task_space, seeds, greedy, gamma, record = args
    policy = HierarchicalPolicy.from_snapshot(snapshot)
    env = make_task(spec, seeds[0], env_config, task_space)
    return hierarchical_rollout(
        env, policy, spec.max_steps, np.random.default_rng(seeds[1]),
        greedy=greedy, gamma=gamma, record=record,
    )


def evaluate_target(
    policy,
    target: TaskSpec,
    episodes: int,
    gamma: float,
    seed: int = 0,
    env_config: Optional[EnvConfig] = None,
    task_space: Optional[Sequence[int]] = None,
    round_index: int = 0,
    env_factory: Optional[Callable[[int], object]] = None,
) -> EvaluationResult:
    """Greedy evaluation on fresh seeded instances of the target task

    Args:
        policy: HierarchicalPolicy (greedy rollout) or a scripted controller
        target: Task to evaluate on
        episodes: Number of episodes, at least 1
        gamma: Discount of the reported returns
        seed: Run seed
        env_config: Physics constants
        task_space: Populations make_task accepts (defaults to the target's)
        round_index: Round the evaluation belongs to (seed derivation)
        env_factory: Builds the environment from an episode seed instead of make_task

    Returns:
        EvaluationResult with per-episode returns and coverages
    """
    if episodes < 1:
        raise ContractViolationError(f"episodes must be >= 1, got {episodes}")
    space = task_space if task_space is not None else [target.population]
    returns, coverages = [], []
    for ep in range(episodes):
        env_seed, rng_seed = episode_seeds(seed, round_index, PHASE_EVAL, ep)
        env = env_factory(env_seed) if env_factory else make_task(target, env_seed, env_config, space)
        rng = np.random.default_rng(rng_seed)
        if isinstance(policy, HierarchicalPolicy):
            result = hierarchical_rollout(env, policy, target.max_steps, rng, greedy=True, gamma=gamma)
        else:
            result = run_episode(env, policy, gamma, rng, cap=target.max_steps)
        returns.append(result.discounted_return)
        coverages.append(result.coverage)
    return EvaluationResult(np.array(returns), np.array(coverages))


@dataclass
class RunState:
    """Mutable state a run carries between rounds"""
    values: Dict[int, float] = field(default_factory=dict)
    records: List[RoundRecord] = field(default_factory=list)
    update_rows: List[Dict] = field(default_factory=list)


class SPCRunner:
    """Drives teacher rounds for one experiment config

    Args:
        config: Validated experiment config
        output_dir: Run directory; nothing is written when None
        progress: Show a tqdm bar over rounds
    """

    def __init__(self, config: ExperimentConfig, output_dir: Optional[Path] = None,
                 progress: bool = False):
        self.config = config
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.progress = progress
        ts, run = config.task_space, config.run
        self.task_set = build_task_set(ts.env_family, ts.populations, ts.max_steps)
        self.target = ts.target_spec()
        self.task_space = ts.allowed_populations()
        obs_dim = config.env.observation_dim

        self.policy = HierarchicalPolicy(obs_dim, config.student, seed=run.seed)
        self.imitation = ImitationModel(obs_dim, config.imitation.hidden_dim, seed=run.seed)
        self.buffer = ImitationBuffer(config.imitation.buffer_transitions)
        tc = config.teacher
        self.teacher = Teacher(
            self.task_set,
            context_dim=config.imitation.hidden_dim,
            alpha=tc.alpha,
            update_rule=tc.update_rule,
            mode=TeacherMode(tc.mode),
            max_clusters=tc.max_clusters,
            branching_factor=tc.branching_factor,
            merge_threshold=tc.merge_threshold,
            rebuild_every=tc.rebuild_every,
            buffer_capacity=tc.buffer_capacity,
            target_task_id=ts.target_task_id,
            rng=np.random.default_rng(np.random.SeedSequence([run.seed, 1])),
        )
        self.trainer = PPOTrainer(
            self.policy, config.trainer, rng=np.random.default_rng(np.random.SeedSequence([run.seed, 2]))
        )
        self.imitation_rng = np.random.default_rng(np.random.SeedSequence([run.seed, 3]))
        self.state = RunState()
        self._pool: Optional[ProcessPoolExecutor] = None

    # ------------------------------------------------------------ rollouts

    def _rollouts(self, spec: TaskSpec, round_index: int, phase: int, episodes: int,
                  greedy: bool = False, record: bool = False) -> List[RolloutResult]:
        snapshot: PolicySnapshot = self.policy.snapshot()
        jobs = [
            (snapshot, spec, self.config.env, self.task_space,
             episode_seeds(self.config.run.seed, round_index, phase, ep), greedy,
             self.config.trainer.gamma, record)
            for ep in range(episodes)
        ]
        if self._pool is not None:
            return list(self._pool.map(_rollout_job, jobs))
        return [_rollout_job(job) for job in jobs]

    def _bootstrap(self) -> None:
        """Fill the imitation buffer from sampling-mode episodes on the target task"""
        results = self._rollouts(self.target, 0, PHASE_BOOTSTRAP,
                                 self.config.teacher.train_episodes)
        for result in results:
            self.buffer.add_batch(result.low)
        logger.info("Bootstrapped imitation buffer with %d sequences", len(self.buffer))

    def _context(self) -> np.ndarray:
        ic = self.config.imitation
        train_imitation(
            self.imitation, self.buffer.dataset(), ic.epochs, ic.learning_rate,
            batch_size=ic.batch_size, optimizer=ic.optimizer, rng=self.imitation_rng,
        )
        return extract_context(self.imitation, self.buffer.recent(ic.context_trajectories))

    def _objective(self, q: np.ndarray, target_return: float) -> float:
        k = len(self.task_set)
        target_id = self.config.task_space.target_task_id
        if target_id is None:
            logger.warning("Target population %d lies outside the task set; "
                           "J_hat falls back to the direct target return",
                           self.target.population)
            return target_return
        p = np.zeros(k)
        p[target_id] = 1.0
        values = np.array([self.state.values.get(i, 0.0) for i in range(k)])
        return estimate_objective(q, p, values)

    # ------------------------------------------------------------ one round

    def spc_round(self, round_index: int) -> RoundRecord:
        """Run one teacher round and return its record

        Raises:
            RoundAbortedError: If any component fails; the partial record is kept
        """
        k = len(self.task_set)
        record = RoundRecord(round_index, -1, -1, np.full(k, np.nan), np.nan, np.nan,
                             np.nan, np.nan, np.nan, status="aborted")
        phase = "context"
        try:
            if len(self.buffer) == 0:
                self._bootstrap()
            context = self._context()
            self._write_context(round_index, context)

            phase = "observe"
            record.cluster_id = self.teacher.observe_context(context)
            phase = "sample"
            task, dist = self.teacher.sample_task()
            record.task_id = task.task_id
            record.probabilities = dist.probabilities.copy()

            phase = "train"
            results = self._rollouts(task, round_index, PHASE_TRAIN,
                                     self.config.teacher.train_episodes,
                                     record=self.config.run.dump_trajectories)
            batches = {
                "high": concat_batches([r.high for r in results]),
                "low": concat_batches([r.low for r in results]),
            }
            updates = self.trainer.update(batches)
            for row in updates:
                row["round"] = round_index
            self.state.update_rows.extend(updates)
            for result in results:
                self.buffer.add_batch(result.low)
            self.state.values[task.task_id] = float(np.mean([r.discounted_return for r in results]))
            self._write_updates(updates)
            self._write_trajectories(round_index, results)

            phase = "evaluate"
            evaluation = evaluate_target(
                self.policy, self.target, self.config.teacher.eval_episodes,
                self.config.trainer.gamma, seed=self.config.run.seed,
                env_config=self.config.env, task_space=self.task_space,
                round_index=round_index,
            )
            record.target_return = evaluation.mean_return
            record.target_coverage = evaluation.mean_coverage
            if self.target.task_id >= 0:
                self.state.values[self.target.task_id] = evaluation.mean_return

            phase = "report"
            record.raw_return = evaluation.mean_return
            record.norm_reward = self.teacher.report_return(evaluation.mean_return)
            record.J_hat = self._objective(record.probabilities, evaluation.mean_return)
            record.status = "ok"
        except Exception as e:
            logger.error("Round %d aborted during %s: %s", round_index, phase, e)
            self.state.records.append(record)
            self._write_record(record)
            raise RoundAbortedError(round_index, phase, e) from e

        self.state.records.append(record)
        self._write_record(record)
        return record

    # ------------------------------------------------------------ outputs

    def _path(self, name: str) -> Optional[Path]:
        return self.output_dir / name if self.output_dir is not None else None

    def _write_record(self, record: RoundRecord) -> None:
        path = self._path("run.csv")
        if path is not None:
            export.append_csv([record.to_row()], export.run_columns(len(self.task_set)), path)

    def _write_context(self, round_index: int, context: np.ndarray) -> None:
        path = self._path("contexts.csv")
        if path is not None:
            row = {"round": round_index, **{f"ctx_{i}": float(v) for i, v in enumerate(context)}}
            export.append_csv([row], export.context_columns(context.size), path)

    def _write_updates(self, rows: List[Dict]) -> None:
        path = self._path("updates.csv")
        if path is not None:
            export.append_csv(rows, export.UPDATE_COLUMNS, path)

    def _write_trajectories(self, round_index: int, results: List[RolloutResult]) -> None:
        path = self._path("trajectories.jsonl")
        if path is None or not self.config.run.dump_trajectories:
            return
        export.append_jsonl(
            ({"round": round_index, "episode": ep, **rec}
             for ep, result in enumerate(results) for rec in result.records),
            path,
        )

    def checkpoint(self, round_index: int) -> Optional[str]:
        path = self._path(f"checkpoints/round_{round_index}")
        if path is None:
            return None
        return save_checkpoint(
            path, self.policy, self.imitation, self.teacher,
            metadata={
                "round": round_index,
                "seed": self.config.run.seed,
                "target": {"env_family": self.target.env_family,
                           "population": self.target.population,
                           "max_steps": self.target.max_steps},
                "task_space": self.task_space,
                "env": asdict(self.config.env),
                "gamma": self.config.trainer.gamma,
            },
        )

    # ------------------------------------------------------------ full run

    def run(self, rounds: Optional[int] = None,
            callback: Optional[Callable[[RoundRecord], None]] = None) -> List[RoundRecord]:
        """Run the configured number of rounds, writing logs and checkpoints"""
        rounds = rounds if rounds is not None else self.config.run.rounds
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            for name in RUN_LOGS:
                stale = self.output_dir / name
                if stale.exists():
                    logger.warning("Replacing existing %s", stale)
                    stale.unlink()
            export.write_json(self.config.to_dict(), self.output_dir / "config.json")
        every = self.config.run.checkpoint_every
        workers = self.config.run.workers

        pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
        self._pool = pool
        try:
            for k in tqdm(range(rounds), disable=not self.progress, desc="rounds"):
                record = self.spc_round(k)
                if callback is not None:
                    callback(record)
                if every and (k + 1) % every == 0 and k + 1 < rounds:
                    self.checkpoint(k)
            self.checkpoint(rounds - 1)
        finally:
            self._pool = None
            if pool is not None:
                pool.shutdown()
        return self.state.records
