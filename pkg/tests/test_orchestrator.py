"""Tests for teacher rounds, target evaluation and the objective estimate"""

import logging

import numpy as np
import pandas as pd
import pytest

from spclab.core.envs import make_task
from spclab.core.orchestrator import (
    EvaluationResult,
    SPCRunner,
    episode_seeds,
    estimate_objective,
    evaluate_target,
)
from spclab.core.student import ConstantActionController, NearestLandmarkController, RandomController
from spclab.core.teacher import TaskSpec
from spclab.utils import export
from spclab.utils.checkpoint import load_checkpoint
from spclab.utils.errors import ContractViolationError, RoundAbortedError
from spclab.utils.validate import parse_experiment_config


def _runner(config_dict, output_dir=None):
    return SPCRunner(parse_experiment_config(config_dict), output_dir=output_dir)


def test_objective_on_policy():
    """Test q = p reduces to the plain expectation"""
    p = np.array([0.2, 0.3, 0.5])
    values = np.array([1.0, -2.0, 4.0])
    assert estimate_objective(p, p, values) == pytest.approx(float(p @ values))


def test_objective_point_mass():
    """Test a point-mass target picks out that task's value"""
    q = np.array([0.25, 0.25, 0.5])
    p = np.array([0.0, 1.0, 0.0])
    values = np.array([3.0, 7.0, -1.0])
    assert estimate_objective(q, p, values) == pytest.approx(7.0)


def test_objective_matches_direct_sum():
    """Test the weighted estimate equals sum p * V whenever q covers p"""
    rng = np.random.default_rng(0)
    for _ in range(50):
        q = rng.dirichlet(np.ones(5))
        p = rng.dirichlet(np.ones(5))
        values = rng.normal(size=5)
        assert abs(estimate_objective(q, p, values) - float(p @ values)) < 1e-12


def test_objective_support_violation(caplog):
    """Test q = 0 under p > 0 is logged and the direct term is kept"""
    q = np.array([1.0, 0.0])
    p = np.array([0.5, 0.5])
    values = np.array([2.0, 4.0])
    with caplog.at_level(logging.WARNING, logger="spclab.core.orchestrator"):
        estimate = estimate_objective(q, p, values)
    assert estimate == pytest.approx(3.0)
    assert "Support violation" in caplog.text


def test_objective_rejects_bad_inputs():
    """Test non-distributions, shape mismatches and non-finite values raise"""
    good = np.array([0.5, 0.5])
    with pytest.raises(ContractViolationError):
        estimate_objective(np.array([0.6, 0.6]), good, np.zeros(2))
    with pytest.raises(ContractViolationError):
        estimate_objective(good, np.array([1.0]), np.zeros(2))
    with pytest.raises(ContractViolationError):
        estimate_objective(good, good, np.array([0.0, np.nan]))


def test_episode_seeds():
    """Test seeds depend on every coordinate and nothing else"""
    assert episode_seeds(0, 3, 1, 2) == episode_seeds(0, 3, 1, 2)
    assert episode_seeds(0, 3, 1, 2) != episode_seeds(0, 3, 1, 3)
    assert episode_seeds(0, 3, 1, 2) != episode_seeds(0, 3, 2, 2)
    assert episode_seeds(0, 3, 1, 2) != episode_seeds(1, 3, 1, 2)


def test_evaluate_do_nothing_policy():
    """Test a stationary team on fresh spawns earns nothing and covers nothing"""
    result = evaluate_target(ConstantActionController(0), TaskSpec("simple_spread", 2), 3, 0.99)
    assert isinstance(result, EvaluationResult)
    mean_return, mean_coverage = result
    assert mean_return == 0.0
    assert mean_coverage == 0.0
    assert result.returns.shape == (3,)


def test_evaluate_oracle_reaches_full_coverage():
    """Test a hand-placed world solved by heading for the nearest landmark"""
    target = TaskSpec("simple_spread", 2)
    gamma = 0.9

    def factory(seed):
        env = make_task(target, seed)
        env.set_state(
            agent_positions=[[0.8, 0.5], [-0.8, -0.5]],
            landmark_positions=[[0.5, 0.5], [-0.5, -0.5]],
        )
        return env

    result = evaluate_target(NearestLandmarkController(), target, 2, gamma, env_factory=factory)
    assert np.all(result.coverages == 1.0)
    assert np.allclose(result.returns, 5.0 * gamma ** 2)
    assert result.standard_error == 0.0


def test_evaluate_requires_episodes():
    """Test zero evaluation episodes is a contract violation"""
    with pytest.raises(ContractViolationError):
        evaluate_target(RandomController(), TaskSpec("simple_spread", 2), 0, 0.99)


def test_round_record_columns(tiny_config_dict):
    """Test a round's row follows the run.csv header"""
    runner = _runner(tiny_config_dict)
    record = runner.spc_round(0)
    assert list(record.to_row()) == export.run_columns(2)
    assert record.status == "ok"
    assert record.task_id in (0, 1)
    assert np.isfinite(record.J_hat)
    assert np.max(record.probabilities) - np.min(record.probabilities) < 0.01
    assert record.probabilities.sum() == pytest.approx(1.0)


def test_runs_are_deterministic(tiny_config_dict):
    """Test two runs from the same config give identical rounds"""
    first = [r.to_row() for r in _runner(tiny_config_dict).run()]
    second = [r.to_row() for r in _runner(tiny_config_dict).run()]
    assert pd.DataFrame(first).equals(pd.DataFrame(second))


def test_aborted_round_is_logged(tiny_config_dict, tmp_path, monkeypatch):
    """Test a failing component aborts the round and leaves an aborted row"""
    runner = _runner(tiny_config_dict, tmp_path)

    def broken():
        raise ContractViolationError("no arms")

    monkeypatch.setattr(runner.teacher, "sample_task", broken)
    with pytest.raises(RoundAbortedError) as info:
        runner.spc_round(0)
    assert info.value.phase == "sample"
    assert info.value.round_index == 0
    frame = pd.read_csv(tmp_path / "run.csv")
    assert frame["status"].tolist() == ["aborted"]
    assert frame["cluster_id"].iloc[0] >= 0


def test_unexpected_failure_aborts_round(tiny_config_dict, tmp_path, monkeypatch):
    """Test an error from outside the package hierarchy still leaves an aborted row"""
    runner = _runner(tiny_config_dict, tmp_path)

    def overflowing():
        raise FloatingPointError("boom")

    monkeypatch.setattr(runner.teacher, "sample_task", overflowing)
    with pytest.raises(RoundAbortedError) as info:
        runner.spc_round(0)
    assert info.value.phase == "sample"
    assert isinstance(info.value.cause, FloatingPointError)
    assert isinstance(info.value.__cause__, FloatingPointError)
    frame = pd.read_csv(tmp_path / "run.csv")
    assert frame["status"].tolist() == ["aborted"]
    assert len(runner.state.records) == 1


def test_run_writes_outputs(tiny_config_dict, tmp_path):
    """Test a run writes its logs and final checkpoint, and reruns are byte-identical"""
    _runner(tiny_config_dict, tmp_path / "a").run()
    _runner(tiny_config_dict, tmp_path / "b").run()
    for name in ("run.csv", "contexts.csv", "updates.csv", "config.json"):
        assert (tmp_path / "a" / name).is_file()
    assert (tmp_path / "a" / "checkpoints" / "round_1" / "manifest.json").is_file()
    assert len(pd.read_csv(tmp_path / "a" / "run.csv")) == 2
    assert (tmp_path / "a" / "run.csv").read_bytes() == (tmp_path / "b" / "run.csv").read_bytes()

    updates = pd.read_csv(tmp_path / "a" / "updates.csv")
    assert list(updates.columns) == export.UPDATE_COLUMNS
    assert set(updates["level"]) == {"high", "low"}


def test_rerun_replaces_stale_logs(tiny_config_dict, tmp_path):
    """Test a second run into the same directory starts fresh logs"""
    _runner(tiny_config_dict, tmp_path).run()
    _runner(tiny_config_dict, tmp_path).run()
    assert len(pd.read_csv(tmp_path / "run.csv")) == 2


def test_checkpoint_restores_behaviour(tiny_config_dict, tmp_path):
    """Test a restored checkpoint evaluates and samples like the live objects"""
    runner = _runner(tiny_config_dict, tmp_path)
    runner.run()
    restored = load_checkpoint(tmp_path / "checkpoints" / "round_1")

    target = runner.target
    live = evaluate_target(runner.policy, target, 2, 0.99, seed=5, task_space=runner.task_space)
    again = evaluate_target(restored.policy, target, 2, 0.99, seed=5, task_space=runner.task_space)
    assert np.array_equal(live.returns, again.returns)

    context = np.zeros(tiny_config_dict["imitation"]["hidden_dim"])
    _, before = runner.teacher.distribution_for(context)
    _, after = restored.teacher.distribution_for(context)
    assert np.allclose(before.probabilities, after.probabilities)
    assert restored.manifest["metadata"]["round"] == 1


def test_target_outside_task_set(tiny_config_dict):
    """Test a larger unseen target reports its direct return as the objective"""
    tiny_config_dict["task_space"]["target_population"] = 8
    runner = _runner(tiny_config_dict)
    record = runner.spc_round(0)
    assert runner.target.task_id == -1
    assert record.J_hat == record.target_return


@pytest.mark.slow
def test_standard_error_shrinks_with_episodes():
    """Test doubling the episodes shrinks the standard error by about 1/sqrt(2)"""
    target = TaskSpec("simple_spread", 4)
    ratios = []
    for seed in range(5):
        small = evaluate_target(RandomController(), target, 100, 0.99, seed=2 * seed)
        large = evaluate_target(RandomController(), target, 200, 0.99, seed=2 * seed + 1)
        ratios.append(large.standard_error / small.standard_error)
    assert 0.6 <= np.mean(ratios) <= 0.85


@pytest.mark.slow
def test_worker_count_does_not_change_results(tiny_config_dict):
    """Test parallel rollouts reproduce the serial run"""
    serial = [r.to_row() for r in _runner(tiny_config_dict).run()]
    tiny_config_dict["run"]["workers"] = 2
    parallel = [r.to_row() for r in _runner(tiny_config_dict).run()]
    assert pd.DataFrame(serial).equals(pd.DataFrame(parallel))
