"""Contextual Exp3 teacher over a finite task set

One teacher round follows a strict protocol:

    observe_context(x) -> sample_task() -> report_return(raw)

The context is standardised, clustered, and the cluster's own Exp3 instance
chooses the next training task. Raw student returns are squashed to [0, 1]
with a running min/max before they reach the bandit.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np

from spclab.core.bandit import (
    ArmDistribution,
    Exp3Instance,
    OVERFLOW_GUARD,
    UpdateRule,
    exp3_probabilities,
    exp3_update,
    sample_arm,
)
from spclab.core.clustering import CFTree, RunningStandardizer, assign, cf_insert
from spclab.utils.errors import ContractViolationError, ProtocolOrderError

logger = logging.getLogger(__name__)

ENV_FAMILIES = ("simple_spread", "push_ball")
DEFAULT_POPULATIONS = (2, 4, 8, 16)


@dataclass(frozen=True)
class TaskSpec:
    """One point of the task space: the teacher's arm

    Attributes:
        env_family: 'simple_spread' or 'push_ball'
        population: Number of agents (and landmarks, balls)
        max_steps: Episode cap
        task_id: Index into the teacher's task set, -1 for tasks outside it
    """
    env_family: str
    population: int
    max_steps: int = 25
    task_id: int = -1

    def __post_init__(self):
        if self.env_family not in ENV_FAMILIES:
            raise ContractViolationError(
                f"Unknown env family '{self.env_family}'. Supported: {', '.join(ENV_FAMILIES)}"
            )
        if self.population < 1:
            raise ContractViolationError(f"population must be >= 1, got {self.population}")
        if self.max_steps <= 0:
            raise ContractViolationError(f"max_steps must be > 0, got {self.max_steps}")

    @property
    def label(self) -> str:
        return f"{self.env_family}_n{self.population}"


def build_task_set(
    env_family: str, populations: Sequence[int], max_steps: int
) -> List[TaskSpec]:
    """Create the ordered arm list, one task per population size"""
    return [
        TaskSpec(env_family, int(n), max_steps, task_id=i)
        for i, n in enumerate(populations)
    ]


class TeacherMode(str, Enum):
    """Task-sampling strategies; everything but SPC is an ablation"""

    SPC = "spc"
    BANDIT = "bandit"
    UNIFORM = "uniform"
    NONE = "none"


@dataclass
class ReturnNormalizer:
    """Running min/max squash of raw returns into [0, 1]

    The incoming value takes part in the min/max it is squashed with; a
    degenerate range maps to 0.5.
    """
    low: Optional[float] = None
    high: Optional[float] = None

    def normalize(self, raw: float) -> float:
        lo = raw if self.low is None else min(self.low, raw)
        hi = raw if self.high is None else max(self.high, raw)
        if hi - lo <= 0.0:
            return 0.5
        return float(min(1.0, max(0.0, (raw - lo) / (hi - lo))))

    def update(self, raw: float) -> None:
        self.low = raw if self.low is None else min(self.low, raw)
        self.high = raw if self.high is None else max(self.high, raw)


@dataclass
class TeacherState:
    """Everything the teacher owns between rounds

    Attributes:
        task_set: The K arms
        tree: Clustering of standardised contexts
        instances: One Exp3 instance per published cluster id
        context_buffer: Most recent raw contexts
        return_normalizer: Running min/max of raw returns
        active_cluster: Cluster chosen by the last observe_context
    """
    task_set: List[TaskSpec]
    tree: CFTree
    standardizer: RunningStandardizer
    alpha: float = 0.1
    update_rule: UpdateRule = UpdateRule.PAPER_LITERAL
    overflow_guard: float = OVERFLOW_GUARD
    mode: TeacherMode = TeacherMode.SPC
    target_task_id: Optional[int] = None
    instances: Dict[int, Exp3Instance] = field(default_factory=dict)
    context_buffer: Deque[np.ndarray] = field(default_factory=lambda: deque(maxlen=512))
    return_normalizer: ReturnNormalizer = field(default_factory=ReturnNormalizer)
    active_cluster: Optional[int] = None
    phase: str = "observe"
    last_arm: Optional[int] = None
    last_distribution: Optional[ArmDistribution] = None

    @property
    def arm_count(self) -> int:
        return len(self.task_set)


class Teacher:
    """Clustered contextual Exp3 teacher

    Args:
        task_set: Ordered list of candidate training tasks
        context_dim: Width of the context vectors
        alpha: Exp3 mixing rate
        update_rule: Exp3 update variant
        mode: spc, bandit, uniform or none
        max_clusters: Cap on published clusters
        branching_factor: CF tree branching factor
        merge_threshold: Max leaf radius in standardised units
        rebuild_every: Insertions between global rebuilds
        buffer_capacity: Number of contexts kept
        target_task_id: Arm used by the 'none' mode
        rng: Random stream for task sampling
    """

    def __init__(
        self,
        task_set: Sequence[TaskSpec],
        context_dim: int,
        alpha: float = 0.1,
        update_rule: UpdateRule = UpdateRule.PAPER_LITERAL,
        mode: TeacherMode = TeacherMode.SPC,
        max_clusters: int = 4,
        branching_factor: int = 8,
        merge_threshold: float = 0.5,
        rebuild_every: int = 50,
        buffer_capacity: int = 512,
        target_task_id: Optional[int] = None,
        overflow_guard: float = OVERFLOW_GUARD,
        rng: Optional[np.random.Generator] = None,
    ):
        if not task_set:
            raise ContractViolationError("teacher needs at least one task")
        mode = TeacherMode(mode)
        if mode is TeacherMode.NONE and target_task_id is None:
            raise ContractViolationError("mode 'none' needs the target task inside the task set")
        if mode is TeacherMode.UNIFORM:
            alpha = 1.0
        self.state = TeacherState(
            task_set=list(task_set),
            tree=CFTree(
                dim=context_dim,
                branching_factor=branching_factor,
                merge_threshold=merge_threshold,
                max_clusters=max_clusters if mode is TeacherMode.SPC else 1,
                rebuild_every=rebuild_every,
            ),
            standardizer=RunningStandardizer(context_dim),
            alpha=alpha,
            update_rule=UpdateRule(update_rule),
            overflow_guard=overflow_guard,
            mode=mode,
            target_task_id=target_task_id,
            context_buffer=deque(maxlen=buffer_capacity),
        )
        self.rng = rng if rng is not None else np.random.default_rng()

    @property
    def task_set(self) -> List[TaskSpec]:
        return self.state.task_set

    def _new_instance(self) -> Exp3Instance:
        s = self.state
        return Exp3Instance.uniform(s.arm_count, s.alpha, s.update_rule, s.overflow_guard)

    def _sync_instances(self) -> None:
        """Keep exactly one Exp3 instance per published cluster id"""
        s = self.state
        published = set(s.tree.centers)
        for cid in list(s.instances):
            if cid not in published:
                del s.instances[cid]
        for cid in sorted(published):
            if cid not in s.instances:
                s.instances[cid] = self._new_instance()
                logger.debug("Spawned Exp3 instance for cluster %d", cid)

    def _distribution(self, cluster_id: int) -> ArmDistribution:
        s = self.state
        if s.mode is TeacherMode.NONE:
            p = np.zeros(s.arm_count)
            p[s.target_task_id] = 1.0
            return ArmDistribution(p)
        return exp3_probabilities(s.instances[cluster_id])

    def observe_context(self, x: np.ndarray) -> int:
        """Record a context, cluster it and activate that cluster's Exp3 instance

        Raises:
            ProtocolOrderError: If the previous round was not completed
            ContractViolationError: On wrong width or non-finite context
        """
        s = self.state
        if s.phase != "observe":
            raise ProtocolOrderError(f"observe_context called while the round awaits '{s.phase}'")
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (s.tree.dim,) or not np.all(np.isfinite(x)):
            raise ContractViolationError(
                f"context must be a finite vector of width {s.tree.dim}, got shape {x.shape}"
            )
        s.context_buffer.append(x.copy())
        s.standardizer.update(x)
        assignment = cf_insert(s.tree, s.standardizer.transform(x))
        self._sync_instances()
        s.active_cluster = assignment.cluster_id
        s.phase = "sample"
        return assignment.cluster_id

    def sample_task(self) -> Tuple[TaskSpec, ArmDistribution]:
        """Draw the next training task from the active cluster's distribution

        Raises:
            ProtocolOrderError: If no context was observed this round
        """
        s = self.state
        if s.phase != "sample" or s.active_cluster is None:
            raise ProtocolOrderError("sample_task requires observe_context first")
        dist = self._distribution(s.active_cluster)
        arm = sample_arm(dist, self.rng)
        s.last_arm = arm
        s.last_distribution = dist
        s.phase = "report"
        return s.task_set[arm], dist

    def report_return(self, raw_return: float) -> float:
        """Normalise the student's return and update the active Exp3 instance

        Returns:
            The normalised reward in [0, 1]

        Raises:
            ProtocolOrderError: If no task was sampled this round
        """
        s = self.state
        if s.phase != "report" or s.last_arm is None:
            raise ProtocolOrderError("report_return requires sample_task first")
        reward = s.return_normalizer.normalize(float(raw_return))
        if s.mode is not TeacherMode.NONE:
            exp3_update(
                s.instances[s.active_cluster],
                s.last_arm,
                reward,
                s.last_distribution[s.last_arm],
            )
        s.return_normalizer.update(float(raw_return))
        s.phase = "observe"
        return reward

    def distribution_for(self, x: np.ndarray) -> Tuple[int, ArmDistribution]:
        """Distribution the teacher would sample from for context x, without mutation"""
        s = self.state
        z = s.standardizer.transform(np.asarray(x, dtype=np.float64))
        cid = assign(s.tree, z).cluster_id
        return cid, self._distribution(cid)

    def to_dict(self) -> dict:
        s = self.state
        return {
            "mode": s.mode.value,
            "alpha": s.alpha,
            "update_rule": s.update_rule.value,
            "overflow_guard": s.overflow_guard,
            "target_task_id": s.target_task_id,
            "task_set": [
                {"env_family": t.env_family, "population": t.population,
                 "max_steps": t.max_steps, "task_id": t.task_id}
                for t in s.task_set
            ],
            "tree": s.tree.to_dict(),
            "standardizer": s.standardizer.to_dict(),
            "instances": {str(k): v.to_dict() for k, v in s.instances.items()},
            "context_buffer": [c.tolist() for c in s.context_buffer],
            "buffer_capacity": s.context_buffer.maxlen,
            "normalizer": {"low": s.return_normalizer.low, "high": s.return_normalizer.high},
            "active_cluster": s.active_cluster,
            "phase": s.phase,
        }

    @classmethod
    def from_dict(cls, data: dict, rng: Optional[np.random.Generator] = None) -> "Teacher":
        tasks = [TaskSpec(**t) for t in data["task_set"]]
        tree = CFTree.from_dict(data["tree"])
        overflow_guard = float(data.get("overflow_guard", OVERFLOW_GUARD))
        teacher = cls(
            tasks,
            context_dim=tree.dim,
            alpha=data["alpha"],
            update_rule=data["update_rule"],
            mode=data["mode"],
            target_task_id=data["target_task_id"],
            buffer_capacity=data["buffer_capacity"],
            overflow_guard=overflow_guard,
            rng=rng,
        )
        s = teacher.state
        s.tree = tree
        s.standardizer = RunningStandardizer.from_dict(data["standardizer"])
        s.instances = {int(k): Exp3Instance.from_dict(v, overflow_guard)
                       for k, v in data["instances"].items()}
        s.context_buffer.extend(np.asarray(c) for c in data["context_buffer"])
        s.return_normalizer = ReturnNormalizer(**data["normalizer"])
        s.active_cluster = data["active_cluster"]
        # checkpoints are written between rounds only
        s.phase = "observe"
        return teacher
