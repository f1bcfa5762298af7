"""Recurrent imitation of the student's low-level behaviour

A gated recurrent model reads an agent's observation sequence and predicts the
action the student took at each step. Its final hidden state, averaged over
recent trajectories, is the context vector the teacher clusters.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Deque, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split

from spclab.core import numerics as nx
from spclab.core.envs import ACTION_COUNT
from spclab.core.numerics import Tensor
from spclab.core.trainer import TrajectoryBatch
from spclab.utils.errors import ContractViolationError

logger = logging.getLogger(__name__)

Demonstration = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class ImitationConfig:
    """Imitation model size and refresh budget

    Attributes:
        hidden_dim: Context width d_x
        epochs: Training epochs per teacher round
        learning_rate: Optimiser step size
        batch_size: Sequences per minibatch
        buffer_transitions: Most recent transitions kept for training
        context_trajectories: Recent trajectories averaged into one context
        optimizer: 'adam' or 'sgd'
    """
    hidden_dim: int = 32
    epochs: int = 5
    learning_rate: float = 1e-3
    batch_size: int = 64
    buffer_transitions: int = 2000
    context_trajectories: int = 16
    optimizer: str = "adam"

    def __post_init__(self):
        if self.hidden_dim < 1 or self.epochs < 0 or self.batch_size < 1:
            raise ContractViolationError("hidden_dim and batch_size must be positive, epochs >= 0")
        if self.learning_rate <= 0.0:
            raise ContractViolationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.buffer_transitions < 1 or self.context_trajectories < 1:
            raise ContractViolationError("buffer_transitions and context_trajectories must be >= 1")


class ImitationModel:
    """GRU over observations with a linear action head

    The head starts at zero so an untrained model predicts uniformly.

    Args:
        observation_dim: Input width
        hidden_dim: Hidden width d_x
        action_count: Size of the predicted action set
        seed: Initialisation seed
        zero_init: Start every parameter at zero
    """

    def __init__(
        self,
        observation_dim: int,
        hidden_dim: int = 32,
        action_count: int = ACTION_COUNT,
        seed: int = 0,
        zero_init: bool = False,
    ):
        self.observation_dim = observation_dim
        self.hidden_dim = hidden_dim
        self.action_count = action_count
        rng = np.random.default_rng(seed)
        store = nx.ParamStore()
        for gate in ("z", "r", "h"):
            w = np.zeros((observation_dim, hidden_dim)) if zero_init else \
                nx.glorot(rng, (observation_dim, hidden_dim))
            u = np.zeros((hidden_dim, hidden_dim)) if zero_init else \
                nx.glorot(rng, (hidden_dim, hidden_dim))
            store.add(f"gru.W{gate}", w)
            store.add(f"gru.U{gate}", u)
            store.add(f"gru.b{gate}", np.zeros(hidden_dim))
        store.add("head.W", np.zeros((hidden_dim, action_count)))
        store.add("head.b", np.zeros(action_count))
        self.store = store

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.store.items()]

    def _gate(self, gate: str, x: Tensor, h: Tensor) -> Tensor:
        s = self.store
        pre = nx.add(nx.matmul(x, s[f"gru.W{gate}"]), nx.matmul(h, s[f"gru.U{gate}"]))
        return nx.add(pre, s[f"gru.b{gate}"])

    def cell(self, x: Tensor, h: Tensor) -> Tensor:
        z = nx.sigmoid(self._gate("z", x, h))
        r = nx.sigmoid(self._gate("r", x, h))
        candidate = nx.tanh(self._gate("h", x, nx.mul(r, h)))
        return nx.add(nx.mul(nx.sub(1.0, z), h), nx.mul(z, candidate))

    def head(self, h: Tensor) -> Tensor:
        return nx.add(nx.matmul(h, self.store["head.W"]), self.store["head.b"])


def _pad(sequences: Sequence[np.ndarray], width: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stack variable-length sequences into (B, T, width) plus a (B, T) validity mask"""
    lengths = [len(s) for s in sequences]
    t_max = max(lengths)
    out = np.zeros((len(sequences), t_max, width))
    mask = np.zeros((len(sequences), t_max))
    for i, s in enumerate(sequences):
        out[i, : len(s)] = np.asarray(s, dtype=np.float64).reshape(len(s), width)
        mask[i, : len(s)] = 1.0
    return out, mask


def _unroll(model: ImitationModel, padded: np.ndarray, mask: np.ndarray):
    """Masked unroll; padded steps carry the previous hidden state unchanged"""
    batch, steps, _ = padded.shape
    h = nx.Tensor(np.zeros((batch, model.hidden_dim)))
    hidden, logits = [], []
    for t in range(steps):
        keep = mask[:, t:t + 1]
        h_new = model.cell(nx.Tensor(padded[:, t]), h)
        h = nx.add(nx.mul(h_new, keep), nx.mul(h, 1.0 - keep))
        hidden.append(h)
        logits.append(model.head(h))
    return hidden, logits


def _check_sequence(model: ImitationModel, observations) -> np.ndarray:
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ContractViolationError(f"expected a non-empty (T, d_o) sequence, got {obs.shape}")
    if obs.shape[1] != model.observation_dim:
        raise ContractViolationError(
            f"observation width {obs.shape[1]} does not match model width {model.observation_dim}"
        )
    return obs


def imitation_forward(model: ImitationModel, observations: np.ndarray) -> Tuple[Tensor, Tensor]:
    """Unroll one sequence from a zero hidden state

    Returns:
        (logits of shape (T, |A|), hidden states of shape (T, d_x))
    """
    obs = _check_sequence(model, observations)
    h = nx.Tensor(np.zeros((1, model.hidden_dim)))
    hidden, logits = [], []
    for t in range(obs.shape[0]):
        h = model.cell(nx.Tensor(obs[t:t + 1]), h)
        hidden.append(h)
        logits.append(model.head(h))
    return nx.concat(logits, axis=0), nx.concat(hidden, axis=0)


def sequence_loss(
    model: ImitationModel, sequences: Sequence[Demonstration]
) -> Tensor:
    """Mean negative log-likelihood of the recorded actions over all valid steps"""
    for obs, actions in sequences:
        _check_sequence(model, obs)
        if len(actions) != len(obs):
            raise ContractViolationError(
                f"sequence has {len(obs)} observations but {len(actions)} actions"
            )
    padded, mask = _pad([s[0] for s in sequences], model.observation_dim)
    actions, _ = _pad([np.asarray(s[1], dtype=np.float64) for s in sequences], 1)
    actions = actions[..., 0].astype(int)
    _, logits = _unroll(model, padded, mask)

    total = None
    for t, step_logits in enumerate(logits):
        nll = nx.neg(nx.log_prob(step_logits, actions[:, t]))
        term = nx.total(nx.mul(nll, mask[:, t]))
        total = term if total is None else nx.add(total, term)
    return nx.div(total, float(mask.sum()))


def train_imitation(
    model: ImitationModel,
    dataset: Sequence[Demonstration],
    epochs: int,
    learning_rate: float,
    batch_size: int = 64,
    optimizer: str = "adam",
    rng: Optional[np.random.Generator] = None,
) -> List[float]:
    """Fit the model to (observation sequence, action sequence) pairs

    Returns:
        Full-dataset loss before training followed by the loss after each epoch

    Raises:
        ContractViolationError: If the dataset is empty or misaligned
    """
    if not dataset:
        raise ContractViolationError("imitation dataset is empty")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = model.parameters()
    opt = nx.make_optimizer(optimizer, params, learning_rate)

    with nx.no_grad():
        trace = [sequence_loss(model, dataset).item()]
    for _ in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            chunk = [dataset[i] for i in order[start:start + batch_size]]
            loss = sequence_loss(model, chunk)
            model.store.zero_grad()
            nx.backward(loss)
            opt.step()
        with nx.no_grad():
            trace.append(sequence_loss(model, dataset).item())
    logger.debug("Imitation loss %.4f -> %.4f over %d epochs", trace[0], trace[-1], epochs)
    return trace


def final_hidden_states(model: ImitationModel, trajectories: Sequence[np.ndarray]) -> np.ndarray:
    """Last valid hidden state of each observation sequence, shape (B, d_x)"""
    for obs in trajectories:
        _check_sequence(model, obs)
    padded, mask = _pad(trajectories, model.observation_dim)
    with nx.no_grad():
        hidden, _ = _unroll(model, padded, mask)
    return hidden[-1].data.copy()


def extract_context(model: ImitationModel, trajectories: Sequence[np.ndarray]) -> np.ndarray:
    """Average of the final hidden states of the given trajectories

    Raises:
        ContractViolationError: If no trajectory is given
    """
    if len(trajectories) == 0:
        raise ContractViolationError("extract_context needs at least one trajectory")
    return final_hidden_states(model, trajectories).mean(axis=0)


def imitation_accuracy(model: ImitationModel, dataset: Sequence[Demonstration]) -> float:
    """Fraction of steps where the argmax prediction equals the recorded action"""
    hits = total = 0
    with nx.no_grad():
        for obs, actions in dataset:
            logits, _ = imitation_forward(model, obs)
            hits += int(np.sum(logits.data.argmax(axis=1) == np.asarray(actions)))
            total += len(actions)
    return hits / max(1, total)


def linear_probe_accuracy(
    features: np.ndarray, labels: np.ndarray, test_size: float = 0.3, seed: int = 0
) -> float:
    """Held-out accuracy of a logistic-regression probe on context vectors"""
    x_train, x_test, y_train, y_test = train_test_split(
        np.asarray(features), np.asarray(labels), test_size=test_size,
        random_state=seed, stratify=labels,
    )
    probe = LogisticRegression(max_iter=1000)
    probe.fit(x_train, y_train)
    return float(probe.score(x_test, y_test))


class ImitationBuffer:
    """Most recent per-agent (observation sequence, action sequence) pairs

    Whole sequences are evicted oldest first once the transition count
    exceeds the capacity.
    """

    def __init__(self, capacity: int = 2000):
        self.capacity = capacity
        self.sequences: Deque[Demonstration] = deque()
        self.transitions = 0

    def __len__(self) -> int:
        return len(self.sequences)

    def add(self, observations: np.ndarray, actions: np.ndarray) -> None:
        self.sequences.append((np.array(observations, dtype=np.float64),
                               np.array(actions, dtype=int)))
        self.transitions += len(actions)
        while self.transitions > self.capacity and len(self.sequences) > 1:
            _, old = self.sequences.popleft()
            self.transitions -= len(old)

    def add_batch(self, batch: TrajectoryBatch) -> None:
        """Split a low-level batch into its agent streams"""
        for stream in np.unique(batch.stream_ids):
            rows = np.flatnonzero(batch.stream_ids == stream)
            self.add(batch.observations[rows], batch.actions[rows].astype(int))

    def dataset(self) -> List[Demonstration]:
        return list(self.sequences)

    def recent(self, count: int) -> List[np.ndarray]:
        """Observation sequences of the newest `count` trajectories"""
        items = list(self.sequences)[-count:]
        return [obs for obs, _ in items]
