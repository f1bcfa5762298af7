"""Exp3 mechanics, the per-context Exp3 router and epsilon-mesh discretisation

All bandit mathematics used by the teacher and by the regret harness lives here.
Rewards handed to the update rules must already be normalised to [0, 1].
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Hashable, Optional, Tuple

import numpy as np

from spclab.utils.errors import ContractViolationError, InvalidStateError

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.1
OVERFLOW_GUARD = 1e100
PROBABILITY_TOLERANCE = 1e-12


class UpdateRule(str, Enum):
    """Exp3 weight update variants"""

    PAPER_LITERAL = "paper_literal"
    IMPORTANCE_WEIGHTED = "importance_weighted"


@dataclass
class Exp3Instance:
    """One arm-weight table with its mixing rate

    Attributes:
        weights: Positive finite weight per arm
        alpha: Exploration/mixing rate in (0, 1]
        update_rule: Which exponential update to apply
        overflow_guard: Max weight that triggers renormalisation
    """
    weights: np.ndarray
    alpha: float = DEFAULT_ALPHA
    update_rule: UpdateRule = UpdateRule.PAPER_LITERAL
    overflow_guard: float = OVERFLOW_GUARD

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).copy()
        self.update_rule = UpdateRule(self.update_rule)
        if self.weights.ndim != 1 or self.weights.size == 0:
            raise ContractViolationError("Exp3Instance needs a non-empty 1-D weight vector")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolationError(f"alpha must lie in [0, 1], got {self.alpha}")
        self._arm_count = self.weights.size

    @classmethod
    def uniform(
        cls,
        arm_count: int,
        alpha: float = DEFAULT_ALPHA,
        update_rule: UpdateRule = UpdateRule.PAPER_LITERAL,
        overflow_guard: float = OVERFLOW_GUARD,
    ) -> "Exp3Instance":
        """Create an instance with all weights equal to 1.0"""
        if arm_count < 1:
            raise ContractViolationError(f"arm_count must be >= 1, got {arm_count}")
        return cls(np.ones(arm_count), alpha, update_rule, overflow_guard)

    @property
    def arm_count(self) -> int:
        return self._arm_count

    def check(self) -> None:
        """Raise InvalidStateError if the weight invariants are broken"""
        if self.weights.size != self._arm_count:
            raise InvalidStateError("arm count changed after construction")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0.0):
            raise InvalidStateError(
                f"Exp3 weights must be positive and finite, got {self.weights.tolist()}"
            )

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "alpha": self.alpha,
            "arm_count": self.arm_count,
            "update_rule": self.update_rule.value,
        }

    @classmethod
    def from_dict(cls, data: dict, overflow_guard: float = OVERFLOW_GUARD) -> "Exp3Instance":
        instance = cls(data["weights"], data["alpha"], data["update_rule"], overflow_guard)
        if instance.arm_count != data["arm_count"]:
            raise InvalidStateError("serialised arm_count disagrees with weight length")
        return instance


@dataclass(frozen=True)
class ArmDistribution:
    """Sampling distribution over the K arms

    Attributes:
        probabilities: One probability per arm, summing to 1
        floor: Lower bound every entry respects (alpha / K for Exp3 output)
    """
    probabilities: np.ndarray
    floor: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        object.__setattr__(self, "probabilities", p)
        if p.ndim != 1 or p.size == 0 or not np.all(np.isfinite(p)):
            raise InvalidStateError("arm distribution must be a finite non-empty vector")
        if np.any(p < self.floor - PROBABILITY_TOLERANCE) or np.any(p > 1.0 + PROBABILITY_TOLERANCE):
            raise InvalidStateError(f"probabilities outside [{self.floor}, 1]: {p.tolist()}")
        if abs(p.sum() - 1.0) > PROBABILITY_TOLERANCE:
            raise InvalidStateError(f"probabilities sum to {p.sum()!r}, expected 1")

    def __len__(self) -> int:
        return self.probabilities.size

    def __getitem__(self, k: int) -> float:
        return float(self.probabilities[k])


def default_alpha(arm_count: int, horizon: Optional[float] = None) -> float:
    """Classical Exp3 mixing rate, or 0.1 when no horizon estimate exists

    Args:
        arm_count: Number of arms K
        horizon: Expected number of rounds this instance will play

    Returns:
        min(1, sqrt(K ln K / ((e - 1) T))), 1.0 for a single arm
    """
    if arm_count <= 1:
        return 1.0
    if horizon is None or horizon <= 0:
        return DEFAULT_ALPHA
    value = math.sqrt(arm_count * math.log(arm_count) / ((math.e - 1.0) * horizon))
    return min(1.0, value)


def exp3_probabilities(instance: Exp3Instance) -> ArmDistribution:
    """Mix the normalised weights with the uniform exploration floor

    p_k = (1 - alpha) * w_k / sum(w) + alpha / K

    Raises:
        InvalidStateError: If any weight is non-positive or non-finite
    """
    instance.check()
    k = instance.arm_count
    w = instance.weights
    p = (1.0 - instance.alpha) * w / w.sum() + instance.alpha / k
    return ArmDistribution(p, floor=instance.alpha / k)


def exp3_update(
    instance: Exp3Instance,
    arm: int,
    reward: float,
    chosen_prob: Optional[float] = None,
) -> Exp3Instance:
    """Apply the exponential weight update for the pulled arm

    Args:
        instance: Instance to update (mutated in place)
        arm: Index of the arm that was pulled
        reward: Normalised reward in [0, 1]
        chosen_prob: Probability the arm was sampled with (importance-weighted rule only)

    Returns:
        The same instance, for chaining

    Raises:
        ContractViolationError: On out-of-range reward, arm or probability
    """
    if not 0.0 <= reward <= 1.0:
        raise ContractViolationError(f"reward must be normalised to [0, 1], got {reward}")
    if not 0 <= arm < instance.arm_count:
        raise ContractViolationError(f"arm {arm} out of range for K={instance.arm_count}")

    k = instance.arm_count
    if instance.update_rule is UpdateRule.IMPORTANCE_WEIGHTED:
        if chosen_prob is None or not chosen_prob > 0.0:
            raise ContractViolationError(
                f"importance-weighted update needs chosen_prob > 0, got {chosen_prob}"
            )
        estimate = reward / chosen_prob
    else:
        estimate = reward

    instance.weights[arm] *= math.exp(instance.alpha * estimate / k)

    top = instance.weights.max()
    if top > instance.overflow_guard:
        instance.weights /= top
        np.maximum(instance.weights, np.finfo(np.float64).tiny, out=instance.weights)
        logger.debug("Renormalised Exp3 weights (max was %.3e)", top)
    return instance


def sample_arm(dist: ArmDistribution, rng: np.random.Generator) -> int:
    """Draw an arm index by inverting the cumulative distribution

    Returns the first index whose cumulative probability strictly exceeds a
    uniform draw.
    """
    u = rng.random()
    cumulative = np.cumsum(dist.probabilities)
    index = int(np.searchsorted(cumulative, u, side="right"))
    if index >= len(dist):
        # rounding left the last cumulative entry just below u
        index = int(np.flatnonzero(dist.probabilities > 0)[-1])
    return index


@dataclass
class ContextualRouter:
    """Per-context Exp3: one independent instance per context key

    Instances are created lazily with uniform weights the first time a key is seen.
    """
    arm_count: int
    alpha: float = DEFAULT_ALPHA
    update_rule: UpdateRule = UpdateRule.PAPER_LITERAL
    overflow_guard: float = OVERFLOW_GUARD
    instances: Dict[Hashable, Exp3Instance] = field(default_factory=dict)

    def instance(self, key: Hashable) -> Exp3Instance:
        if key not in self.instances:
            self.instances[key] = Exp3Instance.uniform(
                self.arm_count, self.alpha, self.update_rule, self.overflow_guard
            )
        return self.instances[key]

    def act(self, key: Hashable, rng: np.random.Generator) -> Tuple[ArmDistribution, int]:
        dist = exp3_probabilities(self.instance(key))
        return dist, sample_arm(dist, rng)

    def update(self, key: Hashable, arm: int, reward: float, chosen_prob: Optional[float]) -> None:
        exp3_update(self.instance(key), arm, reward, chosen_prob)

    def to_dict(self) -> dict:
        """JSON-ready state; keys must themselves be JSON values"""
        return {
            "arm_count": self.arm_count,
            "alpha": self.alpha,
            "update_rule": self.update_rule.value,
            "instances": [[key, inst.to_dict()] for key, inst in self.instances.items()],
        }

    @classmethod
    def from_dict(cls, data: dict, overflow_guard: float = OVERFLOW_GUARD) -> "ContextualRouter":
        router = cls(data["arm_count"], data["alpha"], UpdateRule(data["update_rule"]),
                     overflow_guard)
        for key, inst in data["instances"]:
            key = tuple(key) if isinstance(key, list) else key
            router.instances[key] = Exp3Instance.from_dict(inst, overflow_guard)
        return router


def contextual_router_act(
    router: ContextualRouter, key: Hashable, rng: np.random.Generator
) -> Tuple[ArmDistribution, int]:
    """Route a context key to its own Exp3 instance and sample an arm"""
    return router.act(key, rng)


@dataclass(frozen=True)
class MeshGrid:
    """Uniform epsilon-mesh on [0, 1]

    Points are min(k * epsilon, 1) for k = 0..ceil(1/epsilon), so the first point
    is 0, the last is 1 and consecutive gaps never exceed epsilon.
    """
    epsilon: float
    points: np.ndarray

    @property
    def point_count(self) -> int:
        return int(self.points.size)


def make_mesh(epsilon: float) -> MeshGrid:
    """Build the epsilon-uniform mesh on [0, 1]"""
    if not 0.0 < epsilon <= 1.0:
        raise ContractViolationError(f"epsilon must lie in (0, 1], got {epsilon}")
    steps = max(1, math.ceil(1.0 / epsilon - 1e-9))
    points = np.minimum(np.arange(steps + 1, dtype=np.float64) * epsilon, 1.0)
    points[-1] = 1.0
    return MeshGrid(epsilon=epsilon, points=points)


def mesh_index(x: float, grid: MeshGrid) -> int:
    """Index of the closest mesh point; exact ties go to the smaller point

    Raises:
        ContractViolationError: If x lies outside [0, 1]
    """
    if not 0.0 <= x <= 1.0:
        raise ContractViolationError(f"context must lie in [0, 1], got {x}")
    points = grid.points
    i = int(np.searchsorted(points, x, side="left"))
    if i == 0:
        return 0
    if i >= points.size:
        return points.size - 1
    if x - points[i - 1] <= points[i] - x:
        return i - 1
    return i


def epsilon_star(arm_count: int, horizon: int, lipschitz: float) -> float:
    """Mesh step balancing estimation and discretisation error

    epsilon = (K ln T / (T L^2)) ** (1/3), clamped into (0, 1].
    """
    if arm_count < 1 or horizon < 2 or lipschitz <= 0:
        raise ContractViolationError(
            f"epsilon_star needs K >= 1, T >= 2, L > 0 (got {arm_count}, {horizon}, {lipschitz})"
        )
    value = (arm_count * math.log(horizon) / (horizon * lipschitz ** 2)) ** (1.0 / 3.0)
    return float(min(1.0, max(value, np.finfo(np.float64).tiny)))
