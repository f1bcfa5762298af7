"""Synthetic Lipschitz contextual-bandit harness

Measures how mesh-discretised Exp3 behaves on reward families whose Lipschitz
constant is known exactly: regret against the discretised best response,
discretisation error, and how total regret scales with the horizon.
All regret columns are computed from true means, never from noisy draws.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import stats
from tqdm import tqdm

from spclab.core.bandit import (
    ContextualRouter,
    MeshGrid,
    UpdateRule,
    default_alpha,
    epsilon_star,
    make_mesh,
    mesh_index,
)
from spclab.utils.errors import ContractViolationError

logger = logging.getLogger(__name__)

LIPSCHITZ_CHECK_POINTS = 10_001


@dataclass(frozen=True)
class LipschitzBanditInstance:
    """Tent-function rewards r_k(x) = max(0, 1 - L |x - c_k|)

    Attributes:
        anchors: Peak location c_k of each arm in [0, 1]
        lipschitz_constant: L
    """
    anchors: np.ndarray
    lipschitz_constant: float

    def __post_init__(self):
        anchors = np.asarray(self.anchors, dtype=np.float64)
        object.__setattr__(self, "anchors", anchors)
        if anchors.ndim != 1 or anchors.size == 0:
            raise ContractViolationError("need at least one arm anchor")
        if self.lipschitz_constant <= 0:
            raise ContractViolationError("Lipschitz constant must be positive")
        if not check_lipschitz(self):
            raise ContractViolationError("reward family violates its Lipschitz constant")

    @classmethod
    def random(cls, arm_count: int, lipschitz: float, seed: int) -> "LipschitzBanditInstance":
        rng = np.random.default_rng(seed)
        return cls(rng.random(arm_count), lipschitz)

    @classmethod
    def evenly_spaced(cls, arm_count: int, lipschitz: float) -> "LipschitzBanditInstance":
        return cls((np.arange(arm_count) + 0.5) / arm_count, lipschitz)

    @property
    def arm_count(self) -> int:
        return int(self.anchors.size)

    def mean_rewards(self, x: float) -> np.ndarray:
        """Mean reward of every arm at context x"""
        return np.maximum(0.0, 1.0 - self.lipschitz_constant * np.abs(x - self.anchors))

    def mean_reward(self, arm: int, x: float) -> float:
        return max(0.0, 1.0 - self.lipschitz_constant * abs(x - self.anchors[arm]))


def check_lipschitz(instance: LipschitzBanditInstance, points: int = LIPSCHITZ_CHECK_POINTS) -> bool:
    """Verify |r(x) - r(x')| <= L |x - x'| between neighbouring grid contexts"""
    grid = np.linspace(0.0, 1.0, points)
    values = np.maximum(
        0.0, 1.0 - instance.lipschitz_constant * np.abs(grid[:, None] - instance.anchors[None, :])
    )
    slopes = np.abs(np.diff(values, axis=0)) / np.diff(grid)[:, None]
    return bool(np.all(slopes <= instance.lipschitz_constant * (1 + 1e-9)))


@dataclass
class RegretTrace:
    """Per-round mean rewards of the learner and the two benchmarks"""
    realized_rewards: np.ndarray
    best_response_rewards: np.ndarray
    discretized_best_rewards: np.ndarray
    epsilon: float

    @property
    def horizon(self) -> int:
        return int(self.realized_rewards.size)


def discretized_best_response(
    instance: LipschitzBanditInstance, grid: MeshGrid
) -> Callable[[float], int]:
    """Policy playing, at x, the arm that is optimal at x's nearest mesh point

    Ties between arms go to the lowest arm index.
    """
    best_at_point = np.array(
        [int(np.argmax(instance.mean_rewards(p))) for p in grid.points], dtype=int
    )

    def policy(x: float) -> int:
        return int(best_at_point[mesh_index(x, grid)])

    return policy


def run_mesh_exp3(
    instance: LipschitzBanditInstance,
    horizon: int,
    epsilon: Optional[float] = None,
    rule: UpdateRule = UpdateRule.PAPER_LITERAL,
    seed: int = 0,
    alpha: Optional[float] = None,
) -> RegretTrace:
    """Exp3 over mesh points: contexts are replaced by their nearest mesh point

    Args:
        instance: Reward family
        horizon: Number of rounds T
        epsilon: Mesh step; epsilon_star(K, T, L) when omitted
        rule: Exp3 update variant
        seed: Seed of the context, sampling and reward-noise stream
        alpha: Mixing rate; tuned to the expected rounds per mesh point when omitted

    Returns:
        RegretTrace with the three per-round mean-reward columns
    """
    k = instance.arm_count
    if epsilon is None:
        epsilon = epsilon_star(k, horizon, instance.lipschitz_constant)
    grid = make_mesh(epsilon)
    if alpha is None:
        alpha = default_alpha(k, horizon / grid.point_count)
    router = ContextualRouter(k, alpha=alpha, update_rule=rule)
    benchmark = discretized_best_response(instance, grid)
    rng = np.random.default_rng(seed)

    realized = np.empty(horizon)
    best = np.empty(horizon)
    discretized = np.empty(horizon)
    for t in range(horizon):
        x = rng.random()
        key = mesh_index(x, grid)
        dist, arm = router.act(key, rng)
        means = instance.mean_rewards(x)
        observed = 1.0 if rng.random() < means[arm] else 0.0
        router.update(key, arm, observed, dist[arm])
        realized[t] = means[arm]
        best[t] = means.max()
        discretized[t] = means[benchmark(x)]
    return RegretTrace(realized, best, discretized, epsilon)


def regret_and_de(trace: RegretTrace) -> Tuple[float, float, float]:
    """Split total regret into estimation regret and discretisation error

    Returns:
        (R_S, DE, R) with R = R_S + DE
    """
    r_s = float(np.sum(trace.discretized_best_rewards - trace.realized_rewards))
    de = float(np.sum(trace.best_response_rewards - trace.discretized_best_rewards))
    return r_s, de, r_s + de


def _scaling_job(args) -> dict:
    instance, horizon, seed, rule = args
    trace = run_mesh_exp3(instance, horizon, rule=rule, seed=seed)
    r_s, de, r = regret_and_de(trace)
    return {"rule": rule.value, "horizon": horizon, "seed": seed, "R_S": r_s, "DE": de,
            "R": r, "epsilon": trace.epsilon}


def _fit_scaling(runs: pd.DataFrame, horizons: List[int]) -> dict:
    grouped = runs.groupby("horizon")["R"]
    means = grouped.mean().reindex(horizons)
    sds = grouped.std(ddof=1).reindex(horizons).fillna(0.0)
    fit = stats.linregress(np.log(horizons), np.log(np.maximum(means.to_numpy(), 1e-12)))
    ratios = [
        float(means.iloc[i + 1] / means.iloc[i]) if means.iloc[i] > 0 else float("nan")
        for i in range(len(horizons) - 1)
    ]
    return {
        "mean_regret": [float(v) for v in means],
        "sd_regret": [float(v) for v in sds],
        "slope": float(fit.slope),
        "slope_stderr": float(fit.stderr),
        "ratios": ratios,
    }


def scaling_study(
    instance: LipschitzBanditInstance,
    horizons: Sequence[int],
    seeds: int,
    rules: Sequence[UpdateRule] = (UpdateRule.PAPER_LITERAL, UpdateRule.IMPORTANCE_WEIGHTED),
    workers: int = 1,
    base_seed: int = 0,
    progress: bool = False,
) -> Tuple[pd.DataFrame, dict]:
    """Regret of mesh Exp3 across horizons, each with its own epsilon_star

    Every update rule sees the same seeds, so the rules are compared on
    identical context and reward streams.

    Args:
        instance: Reward family
        horizons: At least two horizons T
        seeds: Runs per horizon and rule
        rules: Exp3 update variants to run; both by default
        workers: Process pool size (1 runs inline)
        base_seed: Offset of the per-run seeds
        progress: Show a tqdm bar

    Returns:
        (per-run DataFrame with columns rule, horizon, seed, R_S, DE, R, epsilon;
         summary dict whose "rules" entry holds, per rule, the per-horizon
         mean/sd, the fitted log-log slope and the successive ratios)
    """
    horizons = [int(t) for t in horizons]
    if len(horizons) < 2:
        raise ContractViolationError("scaling_study needs at least two horizons")
    rules = list(dict.fromkeys(UpdateRule(r) for r in rules))
    if not rules:
        raise ContractViolationError("scaling_study needs at least one update rule")
    jobs = [(instance, t, base_seed + s, rule)
            for rule in rules for t in horizons for s in range(seeds)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(tqdm(pool.map(_scaling_job, jobs), total=len(jobs),
                             disable=not progress, desc="regret"))
    else:
        rows = [_scaling_job(job) for job in tqdm(jobs, disable=not progress, desc="regret")]

    frame = pd.DataFrame(rows, columns=["rule", "horizon", "seed", "R_S", "DE", "R", "epsilon"])
    per_rule = {}
    for rule in rules:
        per_rule[rule.value] = _fit_scaling(frame[frame["rule"] == rule.value], horizons)
        logger.info("Fitted regret slope %.3f for %s over horizons %s",
                    per_rule[rule.value]["slope"], rule.value, horizons)
    summary = {
        "arms": instance.arm_count,
        "lipschitz": instance.lipschitz_constant,
        "seeds": seeds,
        "horizons": horizons,
        "epsilon": [float(epsilon_star(instance.arm_count, t, instance.lipschitz_constant))
                    for t in horizons],
        "theoretical_slope": 2.0 / 3.0,
        "rules": per_rule,
    }
    return frame, summary


def run_finite_context_exp3(
    means: np.ndarray,
    horizon: int,
    rule: UpdateRule = UpdateRule.IMPORTANCE_WEIGHTED,
    seed: int = 0,
    alpha: Optional[float] = None,
) -> Dict[int, np.ndarray]:
    """Per-context Exp3 over a finite context set with Bernoulli arms

    Args:
        means: Array (contexts, arms) of Bernoulli means
        horizon: Total rounds; contexts are drawn uniformly each round
        rule: Exp3 update variant
        seed: Random stream seed
        alpha: Mixing rate; tuned to horizon / |X| when omitted

    Returns:
        Cumulative mean-reward regret curve for each context, indexed by the
        context's own round count
    """
    means = np.asarray(means, dtype=np.float64)
    n_contexts, k = means.shape
    if alpha is None:
        alpha = default_alpha(k, horizon / n_contexts)
    router = ContextualRouter(k, alpha=alpha, update_rule=rule)
    rng = np.random.default_rng(seed)
    gaps: Dict[int, List[float]] = {c: [] for c in range(n_contexts)}
    best = means.max(axis=1)

    for _ in range(horizon):
        c = int(rng.integers(n_contexts))
        dist, arm = router.act(c, rng)
        observed = 1.0 if rng.random() < means[c, arm] else 0.0
        router.update(c, arm, observed, dist[arm])
        gaps[c].append(best[c] - means[c, arm])
    return {c: np.cumsum(g) for c, g in gaps.items()}


def decile_increments(curve: np.ndarray) -> Tuple[float, float]:
    """Regret accumulated over the first and over the last tenth of a curve

    A context that was never drawn has an empty curve and gives (0.0, 0.0).
    """
    curve = np.asarray(curve, dtype=np.float64)
    n = curve.size
    if n == 0:
        return 0.0, 0.0
    tenth = max(1, n // 10)
    first = float(curve[tenth - 1])
    last = float(curve[-1] - curve[n - tenth - 1]) if n > tenth else float(curve[-1])
    return first, last
