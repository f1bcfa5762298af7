"""Population-invariant hierarchical multi-agent policy

Each agent encodes its observation into a message; a self-attention channel
mixes the messages of all agents present, so no parameter shape depends on the
number of agents. Every `interval` steps the shared high-level policy picks a
skill per agent from (observation, mixed message); the shared low-level policy
acts from (observation, skill) on every step.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from spclab.core import numerics as nx
from spclab.core.envs import ACTION_COUNT
from spclab.core.numerics import Tensor
from spclab.core.trainer import TrajectoryBatch
from spclab.utils.errors import ContractViolationError, SpcError

logger = logging.getLogger(__name__)

SKILL_MODES = ("discrete", "continuous")
TANH_EPS = 1e-6
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class StudentConfig:
    """Architecture of the hierarchical policy

    Attributes:
        message_dim: Width d_m of messages
        skill_dim: Number of options (discrete) or embedding width (continuous)
        interval: Steps between high-level decisions
        heads: Attention heads in the channel; must divide message_dim
        hidden: Width of the policy trunks
        skill_mode: 'discrete' (one-hot options) or 'continuous'
    """
    message_dim: int = 32
    skill_dim: int = 4
    interval: int = 5
    heads: int = 1
    hidden: int = 64
    skill_mode: str = "discrete"

    def __post_init__(self):
        if self.interval < 1:
            raise ContractViolationError(f"interval must be >= 1, got {self.interval}")
        if self.heads < 1 or self.message_dim % self.heads:
            raise ContractViolationError(
                f"heads ({self.heads}) must divide message_dim ({self.message_dim})"
            )
        if self.skill_mode not in SKILL_MODES:
            raise ContractViolationError(
                f"skill_mode must be one of {SKILL_MODES}, got '{self.skill_mode}'"
            )
        if self.skill_dim < 1 or self.hidden < 1 or self.message_dim < 1:
            raise ContractViolationError("skill_dim, hidden and message_dim must be positive")


@dataclass(frozen=True)
class SkillAction:
    """High-level action of one agent

    Attributes:
        mode: 'discrete' or 'continuous'
        value: One-hot option or squashed embedding, width d_skill
        raw: Option index (discrete) or pre-squash Gaussian draw (continuous)
    """
    mode: str
    value: np.ndarray
    raw: object = None


@dataclass
class CommParams:
    """Message encoder and attention channel weights"""
    encoder: Tensor
    encoder_bias: Tensor
    WQ: Tensor
    WK: Tensor
    WV: Tensor
    heads: int = 1

    @property
    def message_dim(self) -> int:
        return self.WQ.shape[0]


@dataclass
class PolicySnapshot:
    """Frozen parameter values plus what is needed to rebuild the policy"""
    observation_dim: int
    config: StudentConfig
    params: Dict[str, np.ndarray]
    version: int = 0


def _dense_head(store: nx.ParamStore, prefix: str, rng, d_in: int, hidden: int, d_out: int):
    store.add(f"{prefix}.W1", nx.glorot(rng, (d_in, hidden)))
    store.add(f"{prefix}.b1", np.zeros(hidden))
    store.add(f"{prefix}.Wpi", nx.glorot(rng, (hidden, d_out), gain=0.1))
    store.add(f"{prefix}.bpi", np.zeros(d_out))
    store.add(f"{prefix}.Wv", nx.glorot(rng, (hidden, 1)))
    store.add(f"{prefix}.bv", np.zeros(1))


class HierarchicalPolicy:
    """Shared-parameter two-level policy

    Args:
        observation_dim: Per-agent observation width
        config: Architecture
        seed: Initialisation seed
    """

    def __init__(self, observation_dim: int, config: Optional[StudentConfig] = None, seed: int = 0):
        self.config = config if config is not None else StudentConfig()
        self.observation_dim = observation_dim
        self.version = 0
        cfg = self.config
        rng = np.random.default_rng(seed)
        store = nx.ParamStore()
        d_o, d_m, d_s = observation_dim, cfg.message_dim, cfg.skill_dim

        store.add("comm.encoder", nx.glorot(rng, (d_o, d_m)))
        store.add("comm.encoder_bias", np.zeros(d_m))
        for name in ("WQ", "WK", "WV"):
            store.add(f"comm.{name}", nx.glorot(rng, (d_m, d_m)))
        _dense_head(store, "high", rng, d_o + d_m, cfg.hidden, d_s)
        if cfg.skill_mode == "continuous":
            store.add("high.log_std", np.full(d_s, -0.5))
        _dense_head(store, "low", rng, d_o + d_s, cfg.hidden, ACTION_COUNT)
        self.store = store

    @property
    def comm(self) -> CommParams:
        s = self.store
        return CommParams(
            s["comm.encoder"], s["comm.encoder_bias"], s["comm.WQ"], s["comm.WK"], s["comm.WV"],
            heads=self.config.heads,
        )

    def level(self, name: str) -> "PolicyLevel":
        if name == "high":
            return HighLevel(self)
        if name == "low":
            return LowLevel(self)
        raise ContractViolationError(f"unknown level '{name}'")

    def snapshot(self) -> PolicySnapshot:
        return PolicySnapshot(self.observation_dim, self.config, self.store.snapshot(), self.version)

    @classmethod
    def from_snapshot(cls, snapshot: PolicySnapshot) -> "HierarchicalPolicy":
        policy = cls(snapshot.observation_dim, snapshot.config)
        policy.store.load(snapshot.params)
        policy.version = snapshot.version
        return policy


# ---------------------------------------------------------------- communication


def _check_width(observations: np.ndarray, width: int) -> np.ndarray:
    observations = np.asarray(observations, dtype=np.float64)
    if observations.shape[-1] != width:
        raise ContractViolationError(
            f"observation width {observations.shape[-1]} does not match configured width {width}"
        )
    return observations


def encode(comm: CommParams, observations) -> Tensor:
    """Message m = tanh(o W_enc + b) for one observation or a stack of them"""
    obs = _check_width(observations.data if isinstance(observations, Tensor) else observations,
                       comm.encoder.shape[0])
    return nx.tanh(nx.add(nx.matmul(np.atleast_2d(obs) if obs.ndim == 1 else obs, comm.encoder),
                          comm.encoder_bias))


def channel(comm: CommParams, messages) -> Tensor:
    """Self-attention over the agents' messages

    For messages M (n x d_m, optionally with leading batch axes):
    Q = M W_Q, K = M W_K, V = M W_V and the output is
    rowwise_softmax(Q K^T / sqrt(d_head)) V, computed per head on equal column
    blocks and concatenated.
    """
    m = nx.as_tensor(messages)
    if m.data.ndim < 2 or m.shape[-2] < 1:
        raise ContractViolationError(f"channel needs at least one message row, got {m.shape}")
    q = nx.matmul(m, comm.WQ)
    k = nx.matmul(m, comm.WK)
    v = nx.matmul(m, comm.WV)
    d_m = comm.message_dim
    if comm.heads == 1:
        scores = nx.div(nx.matmul(q, nx.transpose(k)), math.sqrt(d_m))
        return nx.matmul(nx.rowwise_softmax(scores), v)

    d_head = d_m // comm.heads
    lead = (slice(None),) * (m.data.ndim - 1)
    outputs = []
    for h in range(comm.heads):
        cols = lead + (slice(h * d_head, (h + 1) * d_head),)
        qh, kh, vh = nx.take(q, cols), nx.take(k, cols), nx.take(v, cols)
        scores = nx.div(nx.matmul(qh, nx.transpose(kh)), math.sqrt(d_head))
        outputs.append(nx.matmul(nx.rowwise_softmax(scores), vh))
    return nx.concat(outputs, axis=-1)


# ---------------------------------------------------------------- policy heads


def _trunk(policy: HierarchicalPolicy, prefix: str, inputs: Tensor) -> Tuple[Tensor, Tensor]:
    s = policy.store
    hidden = nx.tanh(nx.add(nx.matmul(inputs, s[f"{prefix}.W1"]), s[f"{prefix}.b1"]))
    head = nx.add(nx.matmul(hidden, s[f"{prefix}.Wpi"]), s[f"{prefix}.bpi"])
    value = nx.add(nx.matmul(hidden, s[f"{prefix}.Wv"]), s[f"{prefix}.bv"])
    return head, nx.reshape(value, (value.shape[0],))


def high_forward(policy: HierarchicalPolicy, observations, messages) -> Tuple[Tensor, Tensor]:
    """Skill head (logits or Gaussian means) and values, one row per agent"""
    obs = _check_width(observations, policy.observation_dim)
    inputs = nx.concat([nx.as_tensor(np.atleast_2d(obs)), messages], axis=-1)
    return _trunk(policy, "high", inputs)


def low_forward(policy: HierarchicalPolicy, observations, skills) -> Tuple[Tensor, Tensor]:
    """Action logits over the environment actions and values, one row per agent"""
    obs = _check_width(observations, policy.observation_dim)
    skills = nx.as_tensor(np.atleast_2d(skills) if not isinstance(skills, Tensor) else skills)
    inputs = nx.concat([nx.as_tensor(np.atleast_2d(obs)), skills], axis=-1)
    return _trunk(policy, "low", inputs)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sample_rows(probs: np.ndarray, rng: np.random.Generator, greedy: bool) -> np.ndarray:
    if greedy:
        return probs.argmax(axis=-1)
    cumulative = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[0]) * cumulative[:, -1]
    return (cumulative > u[:, None]).argmax(axis=-1)


def gaussian_log_prob(raw: Tensor, mean: Tensor, log_std: Tensor) -> Tensor:
    """Diagonal Gaussian log-density of raw draws with the tanh-squash correction"""
    z = nx.div(nx.sub(raw, mean), nx.exp(log_std))
    per_dim = nx.sub(nx.mul(-0.5, nx.square(z)), nx.add(log_std, 0.5 * LOG_2PI))
    squashed = np.tanh(raw.data)
    correction = np.log(1.0 - squashed * squashed + TANH_EPS).sum(axis=-1)
    return nx.sub(nx.total(per_dim, axis=-1), correction)


def gaussian_entropy(log_std: Tensor, rows: int) -> Tensor:
    per_row = nx.total(nx.add(log_std, 0.5 * (LOG_2PI + 1.0)))
    return nx.mul(per_row, np.ones(rows))


def high_distribution(policy: HierarchicalPolicy, observation, message) -> np.ndarray:
    """Option probabilities for one agent (discrete mode)"""
    with nx.no_grad():
        logits, _ = high_forward(policy, observation, nx.as_tensor(np.atleast_2d(
            message.data if isinstance(message, Tensor) else message)))
    return _softmax_rows(logits.data)[0]


def _high_act(policy, observations, messages, rng, greedy):
    """Vectorised high-level step for all agents: (skills, raw actions, log-probs, values)"""
    cfg = policy.config
    head, values = high_forward(policy, observations, messages)
    n = head.shape[0]
    if cfg.skill_mode == "discrete":
        probs = _softmax_rows(head.data)
        idx = _sample_rows(probs, rng, greedy)
        skills = np.eye(cfg.skill_dim)[idx]
        log_probs = np.log(probs[np.arange(n), idx])
        return skills, idx, log_probs, values.data
    log_std = policy.store["high.log_std"]
    mean = head.data
    raw = mean if greedy else mean + np.exp(log_std.data) * rng.standard_normal(mean.shape)
    log_probs = gaussian_log_prob(nx.Tensor(raw), head, log_std).data
    return np.tanh(raw), raw, log_probs, values.data


def _low_act(policy, observations, skills, rng, greedy):
    logits, values = low_forward(policy, observations, skills)
    probs = _softmax_rows(logits.data)
    actions = _sample_rows(probs, rng, greedy)
    log_probs = np.log(probs[np.arange(actions.size), actions])
    return actions, log_probs, values.data


def high_step(
    policy: HierarchicalPolicy,
    observation: np.ndarray,
    message: np.ndarray,
    rng: np.random.Generator,
    greedy: bool = False,
) -> Tuple[SkillAction, float, float]:
    """Skill for one agent from its observation and mixed message"""
    with nx.no_grad():
        msg = nx.as_tensor(np.atleast_2d(message.data if isinstance(message, Tensor) else message))
        skills, raw, log_probs, values = _high_act(policy, observation, msg, rng, greedy)
    raw_value = int(raw[0]) if policy.config.skill_mode == "discrete" else raw[0]
    return (
        SkillAction(policy.config.skill_mode, skills[0], raw_value),
        float(log_probs[0]),
        float(values[0]),
    )


def low_step(
    policy: HierarchicalPolicy,
    observation: np.ndarray,
    skill: SkillAction,
    rng: np.random.Generator,
    greedy: bool = False,
) -> Tuple[int, float, float]:
    """Environment action for one agent from its observation and held skill"""
    with nx.no_grad():
        actions, log_probs, values = _low_act(policy, observation, skill.value, rng, greedy)
    return int(actions[0]), float(log_probs[0]), float(values[0])


def low_distribution(policy: HierarchicalPolicy, observation, skill_value) -> np.ndarray:
    with nx.no_grad():
        logits, _ = low_forward(policy, observation, skill_value)
    return _softmax_rows(logits.data)[0]


# ---------------------------------------------------------------- level adapters


class PolicyLevel:
    """One level of the hierarchy seen by the trainer"""

    prefixes: Tuple[str, ...] = ()

    def __init__(self, policy: HierarchicalPolicy):
        self.policy = policy

    def parameters(self) -> List[Tensor]:
        return [p for name, p in self.policy.store.items() if name.startswith(self.prefixes)]


class HighLevel(PolicyLevel):
    """Re-runs encoder, channel and skill head on whole decision groups"""

    prefixes = ("comm.", "high.")

    def evaluate(self, batch: TrajectoryBatch, rows: np.ndarray):
        policy = self.policy
        groups = batch.group_index[rows]
        if np.any(groups < 0) or batch.group_observations is None:
            raise ContractViolationError("high-level rows must belong to decision groups")
        order = list(dict.fromkeys(groups.tolist()))
        group_obs = batch.group_observations[order]
        g, n, d_o = group_obs.shape
        if rows.size != g * n:
            raise ContractViolationError("high-level minibatch must contain whole decision groups")

        messages = channel(policy.comm, encode(policy.comm, group_obs))
        messages = nx.reshape(messages, (g * n, policy.config.message_dim))
        head, values = high_forward(policy, group_obs.reshape(g * n, d_o), messages)
        if policy.config.skill_mode == "discrete":
            actions = batch.actions[rows].astype(int)
            log_probs = nx.log_prob(head, actions)
            entropy = nx.categorical_entropy(head)
        else:
            log_std = policy.store["high.log_std"]
            log_probs = gaussian_log_prob(nx.Tensor(batch.actions[rows]), head, log_std)
            entropy = gaussian_entropy(log_std, rows.size)
        return log_probs, values, entropy


class LowLevel(PolicyLevel):
    prefixes = ("low.",)

    def evaluate(self, batch: TrajectoryBatch, rows: np.ndarray):
        logits, values = low_forward(self.policy, batch.observations[rows], batch.aux[rows])
        actions = batch.actions[rows].astype(int)
        return nx.log_prob(logits, actions), values, nx.categorical_entropy(logits)


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutResult:
    """Both levels' transitions of one episode plus its summary"""
    high: TrajectoryBatch
    low: TrajectoryBatch
    episode_return: float
    discounted_return: float
    coverage: float
    length: int
    records: List[dict] = field(default_factory=list)

    def batches(self) -> Dict[str, TrajectoryBatch]:
        return {"high": self.high, "low": self.low}


@dataclass
class _LevelRows:
    observations: List[np.ndarray] = field(default_factory=list)
    aux: List[np.ndarray] = field(default_factory=list)
    actions: List[object] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    log_probs: List[float] = field(default_factory=list)
    streams: List[int] = field(default_factory=list)
    groups: List[int] = field(default_factory=list)

    def to_batch(self, level: str, version: int, obs_dim: int, aux_dim: int,
                 group_observations: Optional[np.ndarray] = None) -> TrajectoryBatch:
        streams = np.array(self.streams, dtype=int)
        dones = np.zeros(len(streams), dtype=bool)
        for s in np.unique(streams):
            dones[np.flatnonzero(streams == s)[-1]] = True
        return TrajectoryBatch(
            observations=np.array(self.observations).reshape(-1, obs_dim),
            aux=np.array(self.aux).reshape(-1, aux_dim),
            actions=np.array(self.actions),
            rewards=np.array(self.rewards, dtype=np.float64),
            values=np.array(self.values, dtype=np.float64),
            log_probs=np.array(self.log_probs, dtype=np.float64),
            dones=dones,
            stream_ids=streams,
            group_index=np.array(self.groups, dtype=int) if self.groups else None,
            group_observations=group_observations,
            level=level,
            policy_version=version,
        )


def hierarchical_rollout(
    env,
    policy: HierarchicalPolicy,
    cap: int,
    rng: np.random.Generator,
    greedy: bool = False,
    gamma: float = 0.99,
    record: bool = False,
) -> RolloutResult:
    """Play one episode with fixed-interval skills

    Messages are computed only at decision steps. A high-level transition's
    reward is the sum of the shared rewards over its interval.

    Args:
        env: Object with n_agents, observe(), step(actions) and coverage_rate()
        policy: Acting policy (never mutated)
        cap: Max steps of the episode
        rng: Sampling stream
        greedy: Argmax options and actions instead of sampling
        gamma: Discount of the reported discounted return
        record: Keep a JSON-ready world snapshot per step

    Raises:
        ContractViolationError: If widths disagree or the environment rejects a step
    """
    if cap < 1:
        raise ContractViolationError(f"episode cap must be >= 1, got {cap}")
    cfg = policy.config
    n = env.n_agents
    obs = _check_width(env.observe(), policy.observation_dim)
    high = _LevelRows()
    low = _LevelRows()
    group_obs: List[np.ndarray] = []
    high_rewards: List[float] = []
    skills = np.zeros((n, cfg.skill_dim))
    total = discounted = 0.0
    coverage = env.coverage_rate()
    records: List[dict] = []
    t = 0

    with nx.no_grad():
        while t < cap:
            if t % cfg.interval == 0:
                messages = channel(policy.comm, encode(policy.comm, obs))
                skills, raw, log_probs, values = _high_act(policy, obs, messages, rng, greedy)
                group = len(group_obs)
                group_obs.append(obs.copy())
                high_rewards.append(0.0)
                for j in range(n):
                    high.observations.append(obs[j])
                    high.aux.append(messages.data[j])
                    high.actions.append(raw[j])
                    high.values.append(values[j])
                    high.log_probs.append(log_probs[j])
                    high.streams.append(j)
                    high.groups.append(group)

            actions, log_probs, values = _low_act(policy, obs, skills, rng, greedy)
            try:
                outcome = env.step(actions)
            except SpcError as e:
                raise ContractViolationError(f"environment failed at step {t}: {e}") from e
            reward = float(outcome.shared_reward)
            for j in range(n):
                low.observations.append(obs[j])
                low.aux.append(skills[j])
                low.actions.append(int(actions[j]))
                low.rewards.append(reward)
                low.values.append(values[j])
                low.log_probs.append(log_probs[j])
                low.streams.append(j)
            high_rewards[-1] += reward
            total += reward
            discounted += gamma ** t * reward
            coverage = outcome.coverage
            if record and hasattr(env, "to_record"):
                records.append({**env.to_record(), "actions": actions.tolist(), "reward": reward})
            obs = outcome.observations
            t += 1
            if outcome.done:
                break

    high.rewards = [high_rewards[g] for g in high.groups]
    aux_high = cfg.message_dim
    high_batch = high.to_batch("high", policy.version, policy.observation_dim, aux_high,
                               group_observations=np.stack(group_obs))
    low_batch = low.to_batch("low", policy.version, policy.observation_dim, cfg.skill_dim)
    return RolloutResult(high_batch, low_batch, total, discounted, coverage, t, records)


# ---------------------------------------------------------------- scripted controllers


class RandomController:
    """Uniform random actions for every agent"""

    def act(self, observations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(ACTION_COUNT, size=observations.shape[0])


class ConstantActionController:
    """Every agent repeats one action"""

    def __init__(self, action: int):
        if not 0 <= action < ACTION_COUNT:
            raise ContractViolationError(f"action must lie in [0, {ACTION_COUNT}), got {action}")
        self.action = action

    def act(self, observations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.full(observations.shape[0], self.action, dtype=int)


class NearestLandmarkController:
    """Each agent heads for the landmark in its first observation slot"""

    def __init__(self, tolerance: float = 0.05):
        self.tolerance = tolerance

    def act(self, observations: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        actions = np.zeros(observations.shape[0], dtype=int)
        for i, row in enumerate(observations):
            dx, dy, valid = row[4], row[5], row[6]
            if not valid or math.hypot(dx, dy) < self.tolerance:
                continue
            if abs(dx) >= abs(dy):
                actions[i] = 1 if dx > 0 else 2
            else:
                actions[i] = 3 if dy > 0 else 4
        return actions


class PolicyController:
    """Greedy or sampling wrapper that lets run_episode drive a HierarchicalPolicy"""

    def __init__(self, policy: HierarchicalPolicy, greedy: bool = True):
        self.policy = policy
        self.greedy = greedy


@dataclass
class EpisodeResult:
    episode_return: float
    discounted_return: float
    coverage: float
    length: int


def run_episode(
    env,
    controller,
    gamma: float,
    rng: np.random.Generator,
    cap: Optional[int] = None,
) -> EpisodeResult:
    """Play one episode with a scripted controller or a wrapped policy"""
    if cap is None:
        cap = env.spec.max_steps
    if isinstance(controller, PolicyController):
        result = hierarchical_rollout(
            env, controller.policy, cap, rng, greedy=controller.greedy, gamma=gamma
        )
        return EpisodeResult(result.episode_return, result.discounted_return,
                             result.coverage, result.length)

    obs = env.observe()
    total = discounted = 0.0
    coverage = env.coverage_rate()
    t = 0
    while t < cap:
        outcome = env.step(controller.act(obs, rng))
        total += outcome.shared_reward
        discounted += gamma ** t * outcome.shared_reward
        coverage = outcome.coverage
        obs = outcome.observations
        t += 1
        if outcome.done:
            break
    return EpisodeResult(total, discounted, coverage, t)
