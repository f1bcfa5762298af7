"""Tests for the particle-world task families"""

import numpy as np
import pytest

from spclab.core.envs import (
    ACTION_COUNT,
    EnvConfig,
    ParticleEnv,
    count_collisions,
    make_task,
    observation_dim,
)
from spclab.core.teacher import TaskSpec
from spclab.utils.errors import ContractViolationError

NOOP = 0


def _noops(env):
    return [NOOP] * env.n_agents


def _pairwise_min(points):
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return dist[np.triu_indices(len(points), k=1)].min()


def test_make_task_is_deterministic():
    """Test the same spec and seed give the same initial world"""
    spec = TaskSpec("push_ball", 4)
    a, b = make_task(spec, seed=7), make_task(spec, seed=7)
    assert np.array_equal(a.state.agent_positions, b.state.agent_positions)
    assert np.array_equal(a.state.landmark_positions, b.state.landmark_positions)
    assert np.array_equal(a.state.ball_positions, b.state.ball_positions)
    assert not np.array_equal(a.state.agent_positions,
                              make_task(spec, seed=8).state.agent_positions)


def test_make_task_entity_counts():
    """Test entity counts follow the population and family"""
    spread = make_task(TaskSpec("simple_spread", 2), seed=0)
    assert spread.state.agent_positions.shape == (2, 2)
    assert spread.state.landmark_positions.shape == (2, 2)
    assert spread.state.ball_positions.shape == (0, 2)

    push = make_task(TaskSpec("push_ball", 8), seed=0)
    assert push.state.ball_positions.shape == (8, 2)
    assert push.state.step_counter == 0


def test_make_task_rejects_unknown_population():
    """Test populations outside the task space are contract violations"""
    with pytest.raises(ContractViolationError):
        make_task(TaskSpec("simple_spread", 3), seed=0)
    env = make_task(TaskSpec("simple_spread", 3), seed=0, task_space=[3, 6])
    assert env.n_agents == 3


def test_spawn_separation_and_zero_initial_coverage():
    """Test spawned entities keep twice the collision radius apart over 1,000 seeds"""
    cfg = EnvConfig()
    for seed in range(1000):
        family = "push_ball" if seed % 2 else "simple_spread"
        env = make_task(TaskSpec(family, 4), seed=seed, config=cfg)
        s = env.state
        points = np.concatenate([s.agent_positions, s.landmark_positions, s.ball_positions])
        assert _pairwise_min(points) >= 2.0 * cfg.collision_radius
        assert np.all(np.abs(points) <= 1.0)
        assert env.coverage_rate() == 0.0


def test_observation_dim_is_population_invariant():
    """Test the per-agent observation width is fixed by the slot count"""
    assert observation_dim(8) == 76
    for n in (2, 4, 8, 16):
        obs = make_task(TaskSpec("simple_spread", n), seed=n).observe()
        assert obs.shape == (n, 76)


def test_observation_layout():
    """Test self state, nearest-first landmark slots and padding flags"""
    env = make_task(TaskSpec("simple_spread", 2), seed=0)
    obs = env.set_state(
        agent_positions=[[0.0, 0.0], [0.5, 0.0]],
        landmark_positions=[[-0.9, 0.0], [0.3, 0.0]],
        agent_velocities=[[0.1, -0.2], [0.0, 0.0]],
    )
    row = obs[0]
    assert np.allclose(row[:4], [0.0, 0.0, 0.1, -0.2])
    landmarks = row[4:28].reshape(8, 3)
    assert np.allclose(landmarks[0], [0.3, 0.0, 1.0])
    assert np.allclose(landmarks[1], [-0.9, 0.0, 1.0])
    assert np.all(landmarks[2:] == 0.0)
    others = row[28:52].reshape(8, 3)
    assert np.allclose(others[0], [0.5, 0.0, 1.0])
    assert others[:, 2].sum() == 1.0
    assert np.all(row[52:] == 0.0)


def test_step_validates_actions():
    """Test wrong action counts and unknown actions are contract violations"""
    env = make_task(TaskSpec("simple_spread", 2), seed=0)
    with pytest.raises(ContractViolationError):
        env.step([NOOP])
    with pytest.raises(ContractViolationError):
        env.step([NOOP, ACTION_COUNT])
    with pytest.raises(ContractViolationError):
        env.step([-1, NOOP])


def test_completion_pays_bonus_once():
    """Test covering every landmark pays the bonus and ends the episode"""
    env = make_task(TaskSpec("simple_spread", 2), seed=0)
    env.set_state(
        agent_positions=[[0.5, 0.5], [-0.5, -0.5]],
        landmark_positions=[[0.5, 0.5], [-0.5, -0.5]],
    )
    out = env.step(_noops(env))
    assert out.done
    assert out.coverage == 1.0
    assert out.shared_reward == pytest.approx(5.0)
    assert env.step(_noops(env)).shared_reward == 0.0


def test_overlapping_agents_are_penalised():
    """Test two overlapping agents cost one collision penalty"""
    env = make_task(TaskSpec("simple_spread", 2), seed=0)
    env.set_state(
        agent_positions=[[0.0, 0.0], [0.05, 0.0]],
        landmark_positions=[[0.8, 0.8], [-0.8, -0.8]],
    )
    out = env.step(_noops(env))
    assert out.collisions == 1
    assert out.shared_reward == pytest.approx(-0.5)
    assert not out.done


def test_count_collisions_pairs():
    """Test pairs are counted once each"""
    points = np.array([[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [0.9, 0.9]])
    assert count_collisions(points, 0.1) == 3
    assert count_collisions(points[:1], 0.1) == 0


def test_statics_without_force():
    """Test zero forces on a resting world leave positions unchanged"""
    env = make_task(TaskSpec("push_ball", 4), seed=3)
    before = env.state.copy()
    env.step(_noops(env))
    assert np.array_equal(env.state.agent_positions, before.agent_positions)
    assert np.array_equal(env.state.ball_positions, before.ball_positions)
    assert env.state.step_counter == 1


def test_coverage_rate_one_of_four():
    """Test a single covered landmark out of four gives 0.25"""
    env = make_task(TaskSpec("simple_spread", 4), seed=0)
    env.set_state(
        agent_positions=[[0.5, 0.5], [0.0, 0.0], [0.0, 0.9], [0.9, 0.0]],
        landmark_positions=[[0.5, 0.5], [-0.5, 0.5], [0.5, -0.5], [-0.5, -0.5]],
    )
    assert env.coverage_rate() == 0.25


def test_push_ball_coverage_counts_balls():
    """Test push_ball coverage is measured by balls, not agents"""
    env = make_task(TaskSpec("push_ball", 2), seed=0)
    env.set_state(
        agent_positions=[[0.5, 0.5], [-0.5, -0.5]],
        landmark_positions=[[0.5, 0.5], [-0.5, -0.5]],
        ball_positions=[[0.0, 0.9], [0.9, 0.0]],
    )
    assert env.coverage_rate() == 0.0
    env.set_state(
        agent_positions=[[0.0, 0.9], [0.9, 0.0]],
        landmark_positions=[[0.5, 0.5], [-0.5, -0.5]],
        ball_positions=[[0.5, 0.5], [-0.5, -0.52]],
    )
    assert env.coverage_rate() == 1.0


def test_inelastic_push():
    """Test an agent moving into a ball shares its normal velocity equally"""
    env = make_task(TaskSpec("push_ball", 1), seed=0, task_space=[1])
    env.set_state(
        agent_positions=[[0.0, 0.0]],
        landmark_positions=[[0.8, 0.8]],
        agent_velocities=[[1.0, 0.0]],
        ball_positions=[[0.1, 0.0]],
    )
    env.step([NOOP])
    assert np.allclose(env.state.ball_velocities[0], [0.375, 0.0])
    assert np.allclose(env.state.agent_velocities[0], [0.375, 0.0])
    assert np.allclose(env.state.ball_positions[0], [0.1375, 0.0])
    assert np.allclose(env.state.agent_positions[0], [0.0375, 0.0])


def test_set_state_checks_counts():
    """Test hand-placed worlds must match the population"""
    env = make_task(TaskSpec("push_ball", 2), seed=0)
    with pytest.raises(ContractViolationError):
        env.set_state([[0.0, 0.0]], [[0.5, 0.5], [-0.5, -0.5]], ball_positions=[[0, 0], [1, 1]])
    with pytest.raises(ContractViolationError):
        env.set_state([[0.0, 0.0], [0.3, 0.3]], [[0.5, 0.5], [-0.5, -0.5]])


def test_walls_stop_outward_motion():
    """Test positions are clamped to the arena and outward velocity is removed"""
    env = make_task(TaskSpec("simple_spread", 2), seed=0)
    env.set_state(
        agent_positions=[[0.99, 0.0], [-0.5, 0.0]],
        landmark_positions=[[0.5, 0.5], [-0.5, -0.5]],
        agent_velocities=[[1.0, 0.0], [0.0, 0.0]],
    )
    env.step(_noops(env))
    assert env.state.agent_positions[0, 0] == 1.0
    assert env.state.agent_velocities[0, 0] == 0.0


def test_episode_ends_at_step_cap():
    """Test done turns true exactly at max_steps"""
    env = make_task(TaskSpec("simple_spread", 2, max_steps=3), seed=0)
    dones = [env.step(_noops(env)).done for _ in range(3)]
    assert dones == [False, False, True]


@pytest.mark.parametrize("family", ["simple_spread", "push_ball"])
def test_kinetic_energy_non_increasing_without_force(family):
    """Test damping, pushes and walls never add energy"""
    rng = np.random.default_rng(5)
    env = make_task(TaskSpec(family, 4), seed=5)
    s = env.state
    s.agent_velocities[...] = rng.uniform(-1.0, 1.0, size=s.agent_velocities.shape)
    energy = env.kinetic_energy()
    for _ in range(25):
        env.step(_noops(env))
        current = env.kinetic_energy()
        assert current <= energy + 1e-12
        energy = current


def test_rollouts_are_deterministic_and_sparse():
    """Test seeded trajectories repeat and quiet steps pay exactly zero"""
    spec = TaskSpec("simple_spread", 4, max_steps=25)

    def rollout():
        env = make_task(spec, seed=11)
        rng = np.random.default_rng(11)
        trace = []
        for _ in range(25):
            out = env.step(rng.integers(ACTION_COUNT, size=env.n_agents))
            trace.append(out)
            if out.done:
                break
        return trace

    first, second = rollout(), rollout()
    assert len(first) == len(second)
    for a, b in zip(first, second):
        assert np.array_equal(a.observations, b.observations)
        assert a.shared_reward == b.shared_reward
        assert a.rewards == [a.shared_reward] * 4
        if a.collisions == 0 and a.coverage < 1.0:
            assert a.shared_reward == 0.0


def test_to_record_fields():
    """Test the trajectory snapshot is JSON-ready"""
    env = make_task(TaskSpec("push_ball", 2), seed=0)
    record = env.to_record()
    assert record["task"] == "push_ball_n2"
    assert len(record["agents"]) == 2
    assert len(record["balls"]) == 2
    assert record["coverage"] == 0.0
    assert isinstance(ParticleEnv(TaskSpec("push_ball", 2), 0).to_record()["step"], int)
