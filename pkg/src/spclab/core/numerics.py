"""Define-by-run reverse-mode differentiation over numpy float64 arrays

Every operation returns a Tensor that remembers its inputs and a closure that
maps the output adjoint to input adjoints. `backward` walks the recorded graph
once in reverse topological order and accumulates gradients into the leaf
parameters. Inside `no_grad()` nothing is recorded.

    store = ParamStore()
    w = store.add("layer.W", rng.normal(size=(4, 3)))
    loss = mean(square(matmul(x, w)))
    store.zero_grad()
    backward(loss)
    w.grad  # d loss / d W
"""

import contextlib
import logging
from collections import OrderedDict
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from spclab.utils.errors import (
    CheckpointError,
    ContractViolationError,
    NumericFailureError,
    ShapeMismatchError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float64
_grad_enabled = True

ArrayLike = Union["Tensor", np.ndarray, float, int]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block"""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """Array value plus the bookkeeping needed for the backward pass

    Attributes:
        data: float64 numpy array
        grad: Accumulated gradient (parameters only)
        requires_grad: Whether gradients flow to this node
        op: Tag of the operation that produced the value
    """

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "op", "name", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        op: str = "const",
        name: Optional[str] = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.op = op
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return take(self, index)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(
    value: np.ndarray,
    op: str,
    parents: Tuple[Tensor, ...],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericFailureError(f"operation '{op}' produced non-finite values", op=op)
    out = Tensor(value, op=op)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    return _result(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    return _result(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    return _result(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    return _result(
        a.data / b.data, "div", (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
    )


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, "neg", (a,), lambda g: (-g,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, "square", (a,), lambda g: (2.0 * a.data * g,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result(y, "exp", (a,), lambda g: (g * y,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _result(y, "log", (a,), lambda g: (g / a.data,))


def tanh(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, "tanh", (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, "sigmoid", (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0.0
    return _result(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def clip(a: ArrayLike, low: float, high: float) -> Tensor:
    """Clamp into [low, high]; the gradient is zero wherever clamping is active"""
    a = as_tensor(a)
    inside = (a.data > low) & (a.data < high)
    return _result(np.clip(a.data, low, high), "clip", (a,), lambda g: (g * inside,))


def minimum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise min; ties route the gradient to the first operand"""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("minimum", a.data, b.data)
    pick_a = a.data <= b.data
    return _result(
        np.where(pick_a, a.data, b.data), "minimum", (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


def maximum(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise max; ties route the gradient to the first operand"""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("maximum", a.data, b.data)
    pick_a = a.data >= b.data
    return _result(
        np.where(pick_a, a.data, b.data), "maximum", (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# ---------------------------------------------------------------- reductions and shapes


def total(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(y, "sum", (a,), backward)


def mean(a: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return div(total(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: ArrayLike) -> Tensor:
    """Swap the last two axes"""
    a = as_tensor(a)
    return _result(np.swapaxes(a.data, -1, -2), "transpose", (a,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    try:
        y = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as e:
        raise ShapeMismatchError(f"concat: {e}")

    def backward(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(parts))
        )

    return _result(y, "concat", tuple(parts), backward)


def take(a: ArrayLike, index) -> Tensor:
    """Basic/advanced indexing with scatter-add backward"""
    a = as_tensor(a)
    y = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(y, dtype=DTYPE), "take", (a,), backward)


def pick(a: ArrayLike, indices: np.ndarray) -> Tensor:
    """Select a[i, indices[i]] for each row i of a 2-D tensor"""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=int)
    if a.data.ndim != 2 or indices.shape != (a.shape[0],):
        raise ShapeMismatchError(f"pick: logits {a.shape} vs indices {indices.shape}")
    return take(a, (np.arange(a.shape[0]), indices))


# ---------------------------------------------------------------- linear algebra


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, with batch broadcasting"""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    y = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(y, "matmul", (a, b), backward)


def rowwise_softmax(a: ArrayLike) -> Tensor:
    """Softmax over the last axis, shifted by the row max before exponentiation"""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    return _result(
        s, "softmax", (a,),
        lambda g: (s * (g - np.sum(g * s, axis=-1, keepdims=True)),),
    )


def log_softmax(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse
    s = np.exp(y)
    return _result(y, "log_softmax", (a,),
                   lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def log_prob(logits: ArrayLike, index: Union[int, np.ndarray]) -> Tensor:
    """Categorical log-probability of the given index (per row for 2-D logits)"""
    logits = as_tensor(logits)
    if logits.data.ndim == 1:
        return take(log_softmax(logits), int(index))
    return pick(log_softmax(logits), np.asarray(index))


def categorical_entropy(logits: ArrayLike) -> Tensor:
    lp = log_softmax(logits)
    return neg(total(mul(exp(lp), lp), axis=-1))


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable parameter's grad

    Raises:
        ContractViolationError: If loss is not a scalar
    """
    if loss.data.size != 1:
        raise ContractViolationError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = adjoints.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in adjoints:
                adjoints[id(parent)] = adjoints[id(parent)] + pg
            else:
                adjoints[id(parent)] = pg


# ---------------------------------------------------------------- parameters


class ParamStore:
    """Named parameter tensors with gradient accumulators of the same shape"""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractViolationError(f"parameter '{name}' already exists")
        param = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, op="param", name=name)
        self._params[name] = param
        return param

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> List[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def items(self) -> Iterable[Tuple[str, Tensor]]:
        return self._params.items()

    def zero_grad(self, names: Optional[Iterable[str]] = None) -> None:
        for name in names if names is not None else self._params:
            self._params[name].grad[...] = 0.0

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {n: p.shape for n, p in self._params.items()}

    def snapshot(self) -> Dict[str, np.ndarray]:
        """Frozen copies of all parameter values"""
        return {n: p.data.copy() for n, p in self._params.items()}

    def load(self, values: Dict[str, np.ndarray]) -> None:
        """Overwrite parameter values in place, checking names and shapes

        Raises:
            CheckpointError: On missing names or shape mismatch
        """
        missing = set(self._params) - set(values)
        if missing:
            raise CheckpointError(f"missing parameters: {sorted(missing)}")
        for name, param in self._params.items():
            value = np.asarray(values[name], dtype=DTYPE)
            if value.shape != param.shape:
                raise CheckpointError(
                    f"parameter '{name}' has shape {value.shape}, expected {param.shape}"
                )
            param.data[...] = value


class SGD:
    """Plain gradient descent"""

    def __init__(self, params: Sequence[Tensor], learning_rate: float):
        self.params = list(params)
        self.learning_rate = learning_rate

    def step(self) -> None:
        for p in self.params:
            p.data -= self.learning_rate * p.grad


class Adam:
    """Adam with bias correction"""

    def __init__(
        self,
        params: Sequence[Tensor],
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: Sequence[Tensor], learning_rate: float):
    if name == "sgd":
        return SGD(params, learning_rate)
    if name == "adam":
        return Adam(params, learning_rate)
    raise ContractViolationError(f"unknown optimizer '{name}' (expected 'sgd' or 'adam')")


def glorot(rng: np.random.Generator, shape: Tuple[int, int], gain: float = 1.0) -> np.ndarray:
    """Uniform Glorot initialisation"""
    limit = gain * np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def finite_difference_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> List[np.ndarray]:
    """Central-difference estimate of d loss / d param for each parameter"""
    estimates = []
    with no_grad():
        for p in params:
            est = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            est_flat = est.reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + step
                up = loss_fn().item()
                flat[i] = original - step
                down = loss_fn().item()
                flat[i] = original
                est_flat[i] = (up - down) / (2.0 * step)
            estimates.append(est)
    return estimates


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a| + |n|, floor) over all entries"""
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
