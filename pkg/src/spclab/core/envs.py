"""Particle-world tasks with a variable population

Two families share one arena, one physics model and one observation layout:

- simple_spread: n agents must cover n landmarks
- push_ball: n agents must push n balls onto n landmarks

The team reward is sparse. It pays the success bonus on the step where every
landmark first becomes covered, minus a penalty per colliding agent pair.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from spclab.core.teacher import DEFAULT_POPULATIONS, TaskSpec
from spclab.utils.errors import ContractViolationError

logger = logging.getLogger(__name__)

ACTION_COUNT = 5
ACTION_FORCES = np.array(  # noop, +x, -x, +y, -y
    [[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]], dtype=np.float64
)
ARENA = 1.0
SPAWN_ATTEMPTS = 1000


@dataclass(frozen=True)
class EnvConfig:
    """Physics constants shared by both families

    Attributes:
        dt: Integration step
        damping: Fraction of velocity lost per step
        max_speed: Speed clamp for agents and balls
        accel: Acceleration per unit action
        cover_radius: Landmark counts as covered within this distance
        collision_radius: Agent radius; pairs closer than twice this collide
        contact_radius: Agent-ball distance at which pushing happens
        success_bonus: Team reward on first completion
        collision_penalty: Penalty per colliding agent pair per step
        entity_slots: Nearest-k entities of each kind in an observation
    """
    dt: float = 0.1
    damping: float = 0.25
    max_speed: float = 1.0
    accel: float = 5.0
    cover_radius: float = 0.15
    collision_radius: float = 0.1
    contact_radius: float = 0.2
    success_bonus: float = 5.0
    collision_penalty: float = 0.5
    entity_slots: int = 8

    @property
    def spawn_separation(self) -> float:
        return 2.0 * self.collision_radius

    @property
    def observation_dim(self) -> int:
        return observation_dim(self.entity_slots)


def observation_dim(entity_slots: int) -> int:
    """Self state (4) plus landmark, agent and ball slots of (dx, dy, valid)"""
    return 4 + 9 * entity_slots


@dataclass
class WorldState:
    """Positions and velocities of every entity in one task instance"""
    agent_positions: np.ndarray
    agent_velocities: np.ndarray
    landmark_positions: np.ndarray
    ball_positions: np.ndarray
    ball_velocities: np.ndarray
    step_counter: int = 0

    @property
    def population(self) -> int:
        return int(self.agent_positions.shape[0])

    def copy(self) -> "WorldState":
        return WorldState(
            self.agent_positions.copy(),
            self.agent_velocities.copy(),
            self.landmark_positions.copy(),
            self.ball_positions.copy(),
            self.ball_velocities.copy(),
            self.step_counter,
        )


@dataclass
class StepOutcome:
    """Result of one environment tick

    Attributes:
        observations: Array (n, obs_dim), one row per agent
        shared_reward: Team reward, identical for every agent
        done: Completion or step cap reached
        coverage: Covered fraction of landmarks after the step
        collisions: Number of colliding agent pairs
    """
    observations: np.ndarray
    shared_reward: float
    done: bool
    coverage: float
    collisions: int = 0
    rewards: List[float] = field(default_factory=list)


def coverage_rate(state: WorldState, env_family: str, cover_radius: float) -> float:
    """Fraction of landmarks within cover_radius of an agent (or ball, for push_ball)"""
    coverers = state.ball_positions if env_family == "push_ball" else state.agent_positions
    if state.landmark_positions.shape[0] == 0:
        return 1.0
    diff = state.landmark_positions[:, None, :] - coverers[None, :, :]
    nearest = np.sqrt(np.sum(diff * diff, axis=-1)).min(axis=1)
    return float(np.mean(nearest <= cover_radius))


def count_collisions(positions: np.ndarray, collision_radius: float) -> int:
    """Number of unordered agent pairs closer than twice the collision radius"""
    n = positions.shape[0]
    if n < 2:
        return 0
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    rows, cols = np.triu_indices(n, k=1)
    return int(np.sum(dist[rows, cols] < 2.0 * collision_radius))


def _clamp_to_arena(positions: np.ndarray, velocities: np.ndarray) -> None:
    """Clip positions into the arena and stop outward motion at the walls"""
    over = positions > ARENA
    under = positions < -ARENA
    np.clip(positions, -ARENA, ARENA, out=positions)
    velocities[over & (velocities > 0.0)] = 0.0
    velocities[under & (velocities < 0.0)] = 0.0


def _clamp_speed(velocities: np.ndarray, max_speed: float) -> None:
    speed = np.linalg.norm(velocities, axis=1)
    fast = speed > max_speed
    velocities[fast] *= (max_speed / speed[fast])[:, None]


class ParticleEnv:
    """One seeded task instance

    Args:
        spec: Task family, population and step cap
        seed: Seed of the spawn stream
        config: Physics constants
    """

    def __init__(self, spec: TaskSpec, seed: int, config: Optional[EnvConfig] = None):
        self.spec = spec
        self.seed = seed
        self.config = config if config is not None else EnvConfig()
        self.rng = np.random.default_rng(seed)
        self.completed = False
        self.state = self._spawn()

    @property
    def n_agents(self) -> int:
        return self.spec.population

    @property
    def observation_dim(self) -> int:
        return self.config.observation_dim

    @property
    def has_balls(self) -> bool:
        return self.spec.env_family == "push_ball"

    def _spawn(self) -> WorldState:
        """Sequential rejection sampling of non-overlapping entity positions"""
        n = self.spec.population
        kinds = 3 if self.has_balls else 2
        total = kinds * n
        separation = self.config.spawn_separation

        while True:
            placed: List[np.ndarray] = []
            for _ in range(total):
                for _ in range(SPAWN_ATTEMPTS):
                    candidate = self.rng.uniform(-ARENA, ARENA, size=2)
                    if all(np.linalg.norm(candidate - p) >= separation for p in placed):
                        placed.append(candidate)
                        break
                else:
                    break
            if len(placed) == total:
                break
            logger.debug("Spawn for %s ran out of room, restarting", self.spec.label)

        points = np.array(placed)
        balls = points[2 * n:] if self.has_balls else np.zeros((0, 2))
        return WorldState(
            agent_positions=points[:n].copy(),
            agent_velocities=np.zeros((n, 2)),
            landmark_positions=points[n:2 * n].copy(),
            ball_positions=balls.copy(),
            ball_velocities=np.zeros_like(balls),
        )

    def reset(self) -> np.ndarray:
        """Respawn from the instance's random stream"""
        self.state = self._spawn()
        self.completed = False
        return self.observe()

    def set_state(
        self,
        agent_positions,
        landmark_positions,
        agent_velocities=None,
        ball_positions=None,
        ball_velocities=None,
        step_counter: int = 0,
    ) -> np.ndarray:
        """Overwrite the world with hand-placed entities

        Raises:
            ContractViolationError: If entity counts do not match the population
        """
        n = self.spec.population
        agents = np.array(agent_positions, dtype=np.float64).reshape(-1, 2)
        landmarks = np.array(landmark_positions, dtype=np.float64).reshape(-1, 2)
        if agents.shape[0] != n or landmarks.shape[0] != n:
            raise ContractViolationError(
                f"expected {n} agents and landmarks, got {agents.shape[0]} and {landmarks.shape[0]}"
            )
        if self.has_balls:
            if ball_positions is None:
                raise ContractViolationError("push_ball state needs ball positions")
            balls = np.array(ball_positions, dtype=np.float64).reshape(-1, 2)
            if balls.shape[0] != n:
                raise ContractViolationError(f"expected {n} balls, got {balls.shape[0]}")
        else:
            balls = np.zeros((0, 2))
        self.state = WorldState(
            agent_positions=agents,
            agent_velocities=(
                np.zeros((n, 2)) if agent_velocities is None
                else np.array(agent_velocities, dtype=np.float64).reshape(n, 2)
            ),
            landmark_positions=landmarks,
            ball_positions=balls,
            ball_velocities=(
                np.zeros_like(balls) if ball_velocities is None
                else np.array(ball_velocities, dtype=np.float64).reshape(balls.shape)
            ),
            step_counter=step_counter,
        )
        self.completed = False
        return self.observe()

    def coverage_rate(self) -> float:
        return coverage_rate(self.state, self.spec.env_family, self.config.cover_radius)

    def _slots(self, origin: np.ndarray, others: np.ndarray) -> np.ndarray:
        """(dx, dy, valid) of the nearest entities, zero-padded to the slot count"""
        k = self.config.entity_slots
        slots = np.zeros((k, 3))
        if others.shape[0]:
            rel = others - origin
            order = np.argsort(np.sum(rel * rel, axis=1), kind="stable")[:k]
            slots[: order.size, :2] = rel[order]
            slots[: order.size, 2] = 1.0
        return slots.reshape(-1)

    def observe(self) -> np.ndarray:
        """Per-agent observations, shape (n, observation_dim)"""
        s = self.state
        rows = []
        for i in range(s.population):
            me = s.agent_positions[i]
            others = np.delete(s.agent_positions, i, axis=0)
            rows.append(np.concatenate([
                me,
                s.agent_velocities[i],
                self._slots(me, s.landmark_positions),
                self._slots(me, others),
                self._slots(me, s.ball_positions),
            ]))
        return np.stack(rows)

    def _push_balls(self) -> None:
        """Perfectly inelastic equal-mass push along the agent-ball center line"""
        s = self.state
        radius = self.config.contact_radius
        for i in range(s.population):
            for b in range(s.ball_positions.shape[0]):
                offset = s.ball_positions[b] - s.agent_positions[i]
                dist = float(np.linalg.norm(offset))
                if dist >= radius or dist == 0.0:
                    continue
                u = offset / dist
                va = float(s.agent_velocities[i] @ u)
                vb = float(s.ball_velocities[b] @ u)
                if va <= vb:
                    continue
                common = 0.5 * (va + vb)
                s.agent_velocities[i] += (common - va) * u
                s.ball_velocities[b] += (common - vb) * u

    def step(self, actions: Sequence[int]) -> StepOutcome:
        """Advance one tick with one discrete action per agent

        Raises:
            ContractViolationError: On wrong action count or unknown action
        """
        cfg = self.config
        s = self.state
        actions = np.asarray(actions, dtype=int).reshape(-1)
        if actions.size != s.population:
            raise ContractViolationError(
                f"expected {s.population} actions, got {actions.size}"
            )
        if np.any((actions < 0) | (actions >= ACTION_COUNT)):
            raise ContractViolationError(f"actions must lie in [0, {ACTION_COUNT}), got {actions}")

        s.agent_velocities *= 1.0 - cfg.damping
        s.agent_velocities += cfg.accel * ACTION_FORCES[actions] * cfg.dt
        _clamp_speed(s.agent_velocities, cfg.max_speed)
        if self.has_balls:
            s.ball_velocities *= 1.0 - cfg.damping
            self._push_balls()
            _clamp_speed(s.ball_velocities, cfg.max_speed)
            s.ball_positions += s.ball_velocities * cfg.dt
            _clamp_to_arena(s.ball_positions, s.ball_velocities)
        s.agent_positions += s.agent_velocities * cfg.dt
        _clamp_to_arena(s.agent_positions, s.agent_velocities)
        s.step_counter += 1

        coverage = self.coverage_rate()
        collisions = count_collisions(s.agent_positions, cfg.collision_radius)
        reward = -cfg.collision_penalty * collisions
        finished = coverage >= 1.0
        if finished and not self.completed:
            reward += cfg.success_bonus
            self.completed = True
        done = finished or s.step_counter >= self.spec.max_steps
        return StepOutcome(
            observations=self.observe(),
            shared_reward=float(reward),
            done=bool(done),
            coverage=coverage,
            collisions=collisions,
            rewards=[float(reward)] * s.population,
        )

    def kinetic_energy(self) -> float:
        s = self.state
        return 0.5 * float(np.sum(s.agent_velocities ** 2) + np.sum(s.ball_velocities ** 2))

    def to_record(self) -> dict:
        """JSON-ready snapshot of the world"""
        s = self.state
        return {
            "task": self.spec.label,
            "step": s.step_counter,
            "agents": s.agent_positions.round(6).tolist(),
            "velocities": s.agent_velocities.round(6).tolist(),
            "landmarks": s.landmark_positions.round(6).tolist(),
            "balls": s.ball_positions.round(6).tolist(),
            "coverage": self.coverage_rate(),
        }


def make_task(
    spec: TaskSpec,
    seed: int,
    config: Optional[EnvConfig] = None,
    task_space: Sequence[int] = DEFAULT_POPULATIONS,
) -> ParticleEnv:
    """Create a seeded task instance

    Raises:
        ContractViolationError: If the population is outside the task space
    """
    if spec.population not in set(int(n) for n in task_space):
        raise ContractViolationError(
            f"population {spec.population} is outside the task space {sorted(task_space)}"
        )
    return ParticleEnv(spec, seed, config)

