"""Tests for the recurrent imitation model and context extraction"""

import math

import numpy as np
import pytest

from spclab.core import numerics as nx
from spclab.core.envs import make_task
from spclab.core.imitation import (
    ImitationBuffer,
    ImitationConfig,
    ImitationModel,
    extract_context,
    final_hidden_states,
    imitation_accuracy,
    imitation_forward,
    linear_probe_accuracy,
    sequence_loss,
    train_imitation,
)
from spclab.core.student import ConstantActionController
from spclab.core.teacher import TaskSpec
from spclab.core.trainer import TrajectoryBatch
from spclab.utils.errors import ContractViolationError


def _two_mode_data(rng, sequences, length, dim=4):
    """Action 1 when the first coordinate is positive, action 2 otherwise"""
    data = []
    for _ in range(sequences):
        signs = rng.choice([-1.0, 1.0], size=length)
        obs = rng.normal(0.0, 0.1, size=(length, dim))
        obs[:, 0] += signs
        data.append((obs, np.where(signs > 0, 1, 2)))
    return data


def _constant_action_episodes(action, count, seed):
    """Observation sequences of agent 0 under a constant-action controller"""
    controller = ConstantActionController(action)
    spec = TaskSpec("simple_spread", 2)
    sequences = []
    for i in range(count):
        env = make_task(spec, seed=seed + i)
        obs = env.observe()
        rows = []
        for _ in range(spec.max_steps):
            rows.append(obs[0])
            out = env.step(controller.act(obs, None))
            obs = out.observations
            if out.done:
                break
        sequences.append(np.array(rows))
    return sequences


def test_config_validation():
    """Test non-positive sizes and rates are rejected"""
    with pytest.raises(ContractViolationError):
        ImitationConfig(hidden_dim=0)
    with pytest.raises(ContractViolationError):
        ImitationConfig(learning_rate=0.0)
    with pytest.raises(ContractViolationError):
        ImitationConfig(context_trajectories=0)


def test_forward_shapes():
    """Test a length-1 sequence gives one hidden state and one logit row"""
    model = ImitationModel(3, hidden_dim=4)
    logits, hidden = imitation_forward(model, np.ones((1, 3)))
    assert logits.shape == (1, 5)
    assert hidden.shape == (1, 4)

    logits, hidden = imitation_forward(model, np.ones((7, 3)))
    assert logits.shape == (7, 5)

    with pytest.raises(ContractViolationError):
        imitation_forward(model, np.ones((2, 4)))
    with pytest.raises(ContractViolationError):
        imitation_forward(model, np.zeros((0, 3)))


def test_zero_initialised_model():
    """Test a zeroed gated cell keeps hidden states at zero and predicts uniformly"""
    model = ImitationModel(3, hidden_dim=4, zero_init=True)
    logits, hidden = imitation_forward(model, np.random.default_rng(0).normal(size=(5, 3)))
    assert np.all(hidden.numpy() == 0.0)
    assert np.all(logits.numpy() == 0.0)


def test_initial_loss_is_log_action_count():
    """Test the zero head gives ln 5 cross-entropy on any data"""
    rng = np.random.default_rng(1)
    model = ImitationModel(4, hidden_dim=8, seed=1)
    data = _two_mode_data(rng, 10, 6)
    with nx.no_grad():
        loss = sequence_loss(model, data).item()
    assert abs(loss - math.log(5)) < 1e-3


def test_gradient_through_time():
    """Test backpropagation through an 8-step unroll against finite differences"""
    rng = np.random.default_rng(2)
    model = ImitationModel(3, hidden_dim=4, seed=2)
    model.store["head.W"].data[...] = rng.normal(size=(4, 5))
    obs = rng.normal(size=(8, 3))
    actions = rng.integers(5, size=8)
    params = model.parameters()

    def loss_fn():
        return sequence_loss(model, [(obs, actions)])

    model.store.zero_grad()
    nx.backward(loss_fn())
    for p, est in zip(params, nx.finite_difference_gradients(loss_fn, params)):
        assert nx.relative_error(p.grad, est) < 1e-4


def test_sequence_loss_rejects_misaligned_pairs():
    """Test observation and action sequences must have equal length"""
    model = ImitationModel(3, hidden_dim=4)
    with pytest.raises(ContractViolationError):
        sequence_loss(model, [(np.ones((4, 3)), np.zeros(3, dtype=int))])
    with pytest.raises(ContractViolationError):
        train_imitation(model, [], epochs=1, learning_rate=0.01)


def test_constant_action_is_learned():
    """Test a constant-action target is fitted almost perfectly"""
    rng = np.random.default_rng(3)
    data = [(rng.normal(size=(10, 4)), np.full(10, 3)) for _ in range(20)]
    model = ImitationModel(4, hidden_dim=8, seed=3)
    trace = train_imitation(model, data, epochs=30, learning_rate=0.05, batch_size=10,
                            rng=np.random.default_rng(3))
    assert len(trace) == 31
    assert trace[-1] < trace[0] - 0.5
    assert imitation_accuracy(model, data) >= 0.99


def test_two_mode_loss_decreases():
    """Test training on a state-dependent target lowers the loss"""
    rng = np.random.default_rng(4)
    data = _two_mode_data(rng, 40, 10)
    model = ImitationModel(4, hidden_dim=8, seed=4)
    trace = train_imitation(model, data, epochs=20, learning_rate=0.02, batch_size=8,
                            rng=np.random.default_rng(4))
    assert trace[-1] < trace[0]
    assert trace[-1] < 1.0


@pytest.mark.slow
def test_two_mode_accuracy():
    """Test 10,000 state-dependent pairs are imitated with >= 90% accuracy"""
    rng = np.random.default_rng(5)
    data = _two_mode_data(rng, 500, 20)
    model = ImitationModel(4, hidden_dim=16, seed=5)
    train_imitation(model, data, epochs=50, learning_rate=0.01, batch_size=64,
                    rng=np.random.default_rng(5))
    assert imitation_accuracy(model, data) >= 0.9


def test_masked_padding_matches_separate_unrolls():
    """Test padded batch unrolls give each sequence its own final hidden state"""
    rng = np.random.default_rng(6)
    model = ImitationModel(3, hidden_dim=5, seed=6)
    short, long = rng.normal(size=(3, 3)), rng.normal(size=(9, 3))
    batched = final_hidden_states(model, [short, long])
    for row, seq in zip(batched, (short, long)):
        with nx.no_grad():
            _, hidden = imitation_forward(model, seq)
        assert np.allclose(row, hidden.numpy()[-1], atol=1e-12)


def test_extract_context_examples():
    """Test averaging one trajectory, two identical ones and none"""
    rng = np.random.default_rng(7)
    model = ImitationModel(3, hidden_dim=5, seed=7)
    seq = rng.normal(size=(6, 3))
    single = extract_context(model, [seq])
    with nx.no_grad():
        _, hidden = imitation_forward(model, seq)
    assert np.allclose(single, hidden.numpy()[-1], atol=1e-12)
    assert np.allclose(extract_context(model, [seq, seq.copy()]), single, atol=1e-12)
    assert np.array_equal(extract_context(model, [seq]), single)

    with pytest.raises(ContractViolationError):
        extract_context(model, [])


def test_contexts_separate_distinct_behaviours():
    """Test a linear probe tells always-north from always-east contexts"""
    north = _constant_action_episodes(3, 50, seed=0)
    east = _constant_action_episodes(1, 50, seed=1000)
    model = ImitationModel(north[0].shape[1], hidden_dim=32, seed=0)
    features = np.array([extract_context(model, [seq]) for seq in north + east])
    labels = np.array([0] * 50 + [1] * 50)
    assert np.all(np.isfinite(features))
    assert linear_probe_accuracy(features, labels) >= 0.95


def test_buffer_evicts_whole_sequences():
    """Test the oldest sequences go first once capacity is exceeded"""
    buf = ImitationBuffer(capacity=10)
    for i in range(3):
        buf.add(np.full((4, 2), float(i)), np.full(4, i))
    assert len(buf) == 2
    assert buf.transitions == 8
    assert buf.dataset()[0][1][0] == 1

    buf.add(np.zeros((20, 2)), np.zeros(20))
    assert len(buf) == 1
    assert buf.transitions == 20
    assert buf.recent(5)[0].shape == (20, 2)


def test_buffer_splits_batches_by_stream():
    """Test a low-level batch is stored as one sequence per agent"""
    batch = TrajectoryBatch(
        observations=np.arange(12.0).reshape(6, 2),
        aux=np.zeros((6, 1)),
        actions=np.array([0, 1, 2, 3, 4, 0]),
        rewards=np.zeros(6),
        values=np.zeros(6),
        log_probs=np.zeros(6),
        dones=[False, False, False, False, True, True],
        stream_ids=[0, 1, 0, 1, 0, 1],
    )
    buf = ImitationBuffer()
    buf.add_batch(batch)
    assert len(buf) == 2
    obs, actions = buf.dataset()[0]
    assert np.array_equal(actions, [0, 2, 4])
    assert np.array_equal(obs[:, 0], [0.0, 4.0, 8.0])
