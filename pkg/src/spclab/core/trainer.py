"""On-policy optimisation for both hierarchy levels

Advantages come from generalized advantage estimation computed backwards along
each agent stream. The per-minibatch loss is

    -min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)
    + kl_coefficient * KL(old || new)
    + value_coefficient * clipped value loss
    - entropy_coefficient * H

A batch may be used for exactly one update; a second call raises.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from spclab.core import numerics as nx
from spclab.core.numerics import Tensor
from spclab.utils.errors import (
    ContractViolationError,
    NumericFailureError,
    OnPolicyViolationError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """PPO hyper-parameters shared by both levels

    Attributes:
        gamma: Discount factor
        gae_lambda: GAE trace decay
        kl_coefficient: Weight of the KL(old || new) penalty
        sgd_iterations: Passes over the batch per update
        learning_rate: Step size
        entropy_coefficient: Entropy bonus weight
        clip: Ratio clip epsilon
        value_clip: Max deviation of the new value from the old one
        value_coefficient: Weight of the value loss
        optimizer: 'sgd' or 'adam'
        minibatch_fraction: Share of the batch per minibatch
        min_minibatch: Floor on the minibatch size
        normalize_advantages: Standardise advantages per update batch
    """
    gamma: float = 0.99
    gae_lambda: float = 1.0
    kl_coefficient: float = 0.5
    sgd_iterations: int = 10
    learning_rate: float = 1e-4
    entropy_coefficient: float = 0.0
    clip: float = 0.3
    value_clip: float = 10.0
    value_coefficient: float = 1.0
    optimizer: str = "sgd"
    minibatch_fraction: float = 0.25
    min_minibatch: int = 32
    normalize_advantages: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractViolationError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ContractViolationError(f"gae_lambda must lie in [0, 1], got {self.gae_lambda}")
        if self.clip <= 0.0:
            raise ContractViolationError(f"clip must be > 0, got {self.clip}")
        if self.learning_rate <= 0.0:
            raise ContractViolationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.sgd_iterations < 1:
            raise ContractViolationError("sgd_iterations must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractViolationError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer}")


@dataclass
class TrajectoryBatch:
    """Aligned per-row arrays for one hierarchy level

    Rows of one stream (one agent in one episode) appear in time order. High
    level rows additionally belong to a decision group: all agents' rows that
    share one pass through the message channel.

    Attributes:
        observations: (N, d_o)
        aux: (N, d_aux) messages (high level) or skill values (low level)
        actions: (N,) ints, or (N, d_skill) pre-squash draws for continuous skills
        rewards: (N,)
        values: (N,) value estimates at collection time
        log_probs: (N,) log-probabilities at collection time
        dones: (N,) True on a stream's final row
        stream_ids: (N,) stream of each row
        group_index: (N,) decision group of each row, -1 if ungrouped
        group_observations: (G, n, d_o) observations of every decision group
    """
    observations: np.ndarray
    aux: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    stream_ids: np.ndarray
    group_index: Optional[np.ndarray] = None
    group_observations: Optional[np.ndarray] = None
    level: str = "low"
    policy_version: int = 0
    consumed: bool = False

    def __post_init__(self):
        self.dones = np.asarray(self.dones, dtype=bool)
        self.stream_ids = np.asarray(self.stream_ids, dtype=int)
        if self.group_index is None:
            self.group_index = np.full(len(self.rewards), -1, dtype=int)
        n = len(self.rewards)
        for f in ("observations", "aux", "actions", "values", "log_probs", "dones",
                  "stream_ids", "group_index"):
            if len(getattr(self, f)) != n:
                raise ContractViolationError(
                    f"TrajectoryBatch field '{f}' has length {len(getattr(self, f))}, expected {n}"
                )

    def __len__(self) -> int:
        return int(len(self.rewards))

    @property
    def grouped(self) -> bool:
        return self.group_observations is not None and bool(np.all(self.group_index >= 0))

    def units(self) -> List[np.ndarray]:
        """Row sets that must stay together in a minibatch"""
        if self.grouped:
            order = np.argsort(self.group_index, kind="stable")
            splits = np.flatnonzero(np.diff(self.group_index[order])) + 1
            return np.split(order, splits)
        return [np.array([i]) for i in range(len(self))]

    def episode_count(self) -> int:
        return int(np.unique(self.stream_ids).size)

    @classmethod
    def empty(cls, obs_dim: int, aux_dim: int, level: str = "low") -> "TrajectoryBatch":
        return cls(
            observations=np.zeros((0, obs_dim)),
            aux=np.zeros((0, aux_dim)),
            actions=np.zeros(0, dtype=int),
            rewards=np.zeros(0),
            values=np.zeros(0),
            log_probs=np.zeros(0),
            dones=np.zeros(0, dtype=bool),
            stream_ids=np.zeros(0, dtype=int),
            level=level,
        )


def concat_batches(batches: Sequence[TrajectoryBatch]) -> TrajectoryBatch:
    """Join batches, renumbering streams and decision groups so they stay disjoint

    Raises:
        ContractViolationError: On mixed levels or policy versions
    """
    if not batches:
        raise ContractViolationError("nothing to concatenate")
    levels = {b.level for b in batches}
    versions = {b.policy_version for b in batches}
    if len(levels) > 1 or len(versions) > 1:
        raise ContractViolationError(f"cannot mix levels {levels} or policy versions {versions}")

    stream_offset = 0
    group_offset = 0
    streams, groups, group_obs = [], [], []
    for b in batches:
        streams.append(b.stream_ids + stream_offset)
        stream_offset += int(b.stream_ids.max()) + 1 if len(b) else 0
        if b.group_observations is not None:
            groups.append(np.where(b.group_index >= 0, b.group_index + group_offset, -1))
            group_obs.append(b.group_observations)
            group_offset += b.group_observations.shape[0]
        else:
            groups.append(b.group_index)

    grouped = all(b.group_observations is not None for b in batches)
    if grouped and len({g.shape[1:] for g in group_obs}) > 1:
        raise ContractViolationError("decision groups of different populations cannot be mixed")
    return TrajectoryBatch(
        observations=np.concatenate([b.observations for b in batches]),
        aux=np.concatenate([b.aux for b in batches]),
        actions=np.concatenate([b.actions for b in batches]),
        rewards=np.concatenate([b.rewards for b in batches]),
        values=np.concatenate([b.values for b in batches]),
        log_probs=np.concatenate([b.log_probs for b in batches]),
        dones=np.concatenate([b.dones for b in batches]),
        stream_ids=np.concatenate(streams),
        group_index=np.concatenate(groups),
        group_observations=np.concatenate(group_obs) if grouped else None,
        level=batches[0].level,
        policy_version=batches[0].policy_version,
    )


def compute_returns_and_advantages(
    batch: TrajectoryBatch,
    gamma: float,
    gae_lambda: float,
    normalize: bool = True,
) -> Tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation with a zero bootstrap at episode ends

    Returns are raw advantages plus values; only the returned advantages are
    normalised.

    Returns:
        (returns, advantages), each of shape (N,)
    """
    n = len(batch)
    advantages = np.zeros(n)
    next_value: Dict[int, float] = {}
    next_advantage: Dict[int, float] = {}
    for t in range(n - 1, -1, -1):
        stream = int(batch.stream_ids[t])
        if batch.dones[t] or stream not in next_value:
            v_next, a_next = 0.0, 0.0
        else:
            v_next, a_next = next_value[stream], next_advantage[stream]
        delta = batch.rewards[t] + gamma * v_next - batch.values[t]
        advantages[t] = delta + gamma * gae_lambda * a_next
        next_value[stream] = float(batch.values[t])
        next_advantage[stream] = float(advantages[t])

    returns = advantages + batch.values
    if normalize and n > 1:
        std = advantages.std()
        advantages = (advantages - advantages.mean()) / (std if std > 1e-8 else 1.0)
    return returns, advantages


def clipped_surrogate(ratio: Tensor, advantages: np.ndarray, clip: float) -> Tensor:
    """Mean of min(rho * A, clip(rho) * A); the caller negates it for a loss"""
    unclipped = nx.mul(ratio, advantages)
    clipped = nx.mul(nx.clip(ratio, 1.0 - clip, 1.0 + clip), advantages)
    return nx.mean(nx.minimum(unclipped, clipped))


class LevelModel(Protocol):
    """What the trainer needs from one hierarchy level"""

    def parameters(self) -> List[Tensor]:
        ...

    def evaluate(self, batch: TrajectoryBatch, rows: np.ndarray) -> Tuple[Tensor, Tensor, Tensor]:
        """(log-probs, values, entropies) of the batch rows under current parameters"""
        ...


def ppo_losses(
    model: LevelModel,
    batch: TrajectoryBatch,
    rows: np.ndarray,
    returns: np.ndarray,
    advantages: np.ndarray,
    config: TrainConfig,
) -> Dict[str, Tensor]:
    """Loss terms for one minibatch; 'total' is what gets differentiated"""
    log_probs, values, entropy = model.evaluate(batch, rows)
    old_log_probs = batch.log_probs[rows]
    old_values = batch.values[rows]
    adv = advantages[rows]
    ret = returns[rows]

    log_ratio = nx.sub(log_probs, old_log_probs)
    ratio = nx.exp(log_ratio)
    surrogate = nx.neg(clipped_surrogate(ratio, adv, config.clip))
    kl = nx.mean(nx.sub(nx.sub(ratio, 1.0), log_ratio))

    clipped_values = nx.add(
        old_values, nx.clip(nx.sub(values, old_values), -config.value_clip, config.value_clip)
    )
    value_loss = nx.mul(0.5, nx.mean(nx.maximum(
        nx.square(nx.sub(values, ret)), nx.square(nx.sub(clipped_values, ret))
    )))
    mean_entropy = nx.mean(entropy)

    total = nx.add(surrogate, nx.mul(config.kl_coefficient, kl))
    total = nx.add(total, nx.mul(config.value_coefficient, value_loss))
    total = nx.sub(total, nx.mul(config.entropy_coefficient, mean_entropy))
    return {
        "total": total,
        "surrogate": surrogate,
        "kl": kl,
        "value_loss": value_loss,
        "entropy": mean_entropy,
        "ratio": ratio,
    }


def minibatch_size(units: int, config: TrainConfig) -> int:
    return min(units, max(config.min_minibatch, int(units * config.minibatch_fraction)))


def ppo_update(
    model: LevelModel,
    batch: TrajectoryBatch,
    config: TrainConfig,
    rng: np.random.Generator,
    optimizer=None,
) -> Dict[str, float]:
    """Run sgd_iterations passes of shuffled minibatch updates on one batch

    Args:
        model: The level being optimised
        batch: Fresh on-policy batch for this level
        config: Hyper-parameters
        rng: Minibatch shuffling stream
        optimizer: Reused optimiser (a fresh one from config when omitted)

    Returns:
        Mean surrogate, kl, value_loss, entropy and clip_fraction over all
        minibatches, plus the batch's mean_return

    Raises:
        OnPolicyViolationError: If the batch was already used for an update
        NumericFailureError: If a loss turns non-finite
    """
    if batch.consumed:
        raise OnPolicyViolationError(
            f"{batch.level}-level batch of policy version {batch.policy_version} was already used"
        )
    if len(batch) == 0:
        raise ContractViolationError("cannot update on an empty batch")
    batch.consumed = True

    params = model.parameters()
    if optimizer is None:
        optimizer = nx.make_optimizer(config.optimizer, params, config.learning_rate)
    returns, advantages = compute_returns_and_advantages(
        batch, config.gamma, config.gae_lambda, normalize=config.normalize_advantages
    )
    units = batch.units()
    size = minibatch_size(len(units), config)

    totals = {"surrogate": 0.0, "kl": 0.0, "value_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    steps = 0
    for _ in range(config.sgd_iterations):
        order = rng.permutation(len(units))
        for start in range(0, len(units), size):
            rows = np.concatenate([units[i] for i in order[start:start + size]])
            rows.sort()
            losses = ppo_losses(model, batch, rows, returns, advantages, config)
            if not np.isfinite(losses["total"].item()):
                raise NumericFailureError(
                    f"non-finite {batch.level}-level loss: "
                    + ", ".join(f"{k}={v.item():.4g}" for k, v in losses.items() if k != "ratio"),
                    op="ppo_loss",
                )
            for p in params:
                p.grad[...] = 0.0
            nx.backward(losses["total"])
            optimizer.step()

            for key in ("surrogate", "kl", "value_loss", "entropy"):
                totals[key] += losses[key].item()
            totals["clip_fraction"] += float(
                np.mean(np.abs(losses["ratio"].data - 1.0) > config.clip)
            )
            steps += 1

    metrics = {k: v / steps for k, v in totals.items()}
    metrics["mean_return"] = float(np.sum(batch.rewards) / max(1, batch.episode_count()))
    logger.debug("%s-level update: %s", batch.level, metrics)
    return metrics


class PPOTrainer:
    """Updates a policy's two levels from one round of fresh batches

    Args:
        policy: Object with `version` and `level(name)` returning a LevelModel
        config: Hyper-parameters shared by both levels
        rng: Minibatch shuffling stream
    """

    LEVELS = ("high", "low")

    def __init__(self, policy, config: TrainConfig, rng: Optional[np.random.Generator] = None):
        self.policy = policy
        self.config = config
        self.rng = rng if rng is not None else np.random.default_rng()
        self.optimizers = {
            name: nx.make_optimizer(
                config.optimizer, policy.level(name).parameters(), config.learning_rate
            )
            for name in self.LEVELS
        }
        self.update_index = 0

    def update(self, batches: Dict[str, TrajectoryBatch]) -> List[Dict[str, float]]:
        """Update both levels, then bump the policy version once

        Raises:
            OnPolicyViolationError: If a batch was collected under another version
        """
        for name in self.LEVELS:
            b = batches[name]
            if b.policy_version != self.policy.version:
                raise OnPolicyViolationError(
                    f"{name}-level batch is from policy version {b.policy_version}, "
                    f"current version is {self.policy.version}"
                )
        rows = []
        for name in self.LEVELS:
            metrics = ppo_update(
                self.policy.level(name), batches[name], self.config, self.rng,
                optimizer=self.optimizers[name],
            )
            rows.append({"update_index": self.update_index, "level": name, **metrics})
        self.policy.version += 1
        self.update_index += 1
        return rows

