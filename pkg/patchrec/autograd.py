"""
Autograd - Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive records how its output was produced. Calling backward() on a
scalar walks those records in reverse topological order (the tape is rebuilt
from the graph on every call, so the lifetime of a tape is one training step)
and accumulates gradients into the leaf tensors that require them.

Only the primitives the transformer needs are provided: elementwise
arithmetic with broadcasting, 2-D matmul and transpose, row gather, column
slicing, concatenation, mean pooling, masked softmax, layer norm, GELU and
masked softmax cross-entropy.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from patchrec.utils import EmptyPoolError, NoSupervisionError, ShapeError
except ImportError:
    from utils import EmptyPoolError, NoSupervisionError, ShapeError


_grad_state = threading.local()

GELU_C = np.sqrt(2.0 / np.pi)
GELU_K = 0.044715


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class _Node:
    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._node: Optional[_Node] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # Operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not a supported primitive")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self, grad: Optional[np.ndarray] = None) -> "ComputationTape":
        """
        Back-propagate from this tensor.

        Args:
            grad: Seed gradient; defaults to 1.0 for scalars.

        Returns:
            The tape that was traversed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {list(self.shape)}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {list(grad.shape)} != tensor shape {list(self.shape)}")
        tape = ComputationTape.record(self)
        tape.run(self, grad)
        return tape


@dataclass
class ComputationTape:
    """Ordered record of the primitive outputs reachable from one root."""

    entries: List[Tensor] = field(default_factory=list)
    visited: List[str] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> "ComputationTape":
        # Iterative post-order: inputs always land before their consumers.
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen or tensor._node is None:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            for inp in tensor._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(entries=order)

    def run(self, root: Tensor, seed: np.ndarray) -> None:
        if root._node is None:
            if root.requires_grad:
                _accumulate_leaf(root, seed)
            return
        pending: Dict[int, np.ndarray] = {id(root): seed}
        for tensor in reversed(self.entries):
            grad = pending.pop(id(tensor), None)
            if grad is None:
                continue
            node = tensor._node
            self.visited.append(node.op)
            input_grads = node.backward_fn(grad)
            for inp, g in zip(node.inputs, input_grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate_leaf(inp, g)
                elif id(inp) in pending:
                    pending[id(inp)] = pending[id(inp)] + g
                else:
                    pending[id(inp)] = g


def _accumulate_leaf(tensor: Tensor, grad: np.ndarray) -> None:
    grad = np.asarray(grad, dtype=np.float64).reshape(tensor.shape)
    if tensor.grad is None:
        tensor.grad = grad.copy()
    else:
        tensor.grad = tensor.grad + grad


def as_tensor(value: Union[Tensor, float, np.ndarray]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, op: str) -> Tensor:
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._node = _Node(op=op, inputs=tuple(inputs), backward_fn=backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ============================================================================
# Elementwise
# ============================================================================

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward, "mul")


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    u = GELU_C * (x.data + GELU_K * x.data ** 3)
    t = np.tanh(u)

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * GELU_K * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * du),)

    return _make(0.5 * x.data * (1.0 + t), (x,), backward, "gelu")


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(x.data.sum()), (x,), backward, "sum")


# ============================================================================
# Linear algebra and indexing
# ============================================================================

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {list(a.shape)} @ {list(b.shape)}")

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {list(x.shape)}")

    def backward(g):
        return (g.T,)

    return _make(x.data.T, (x,), backward, "transpose")


def take_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of a 2-D table (embedding lookup)."""
    index = np.asarray(ids, dtype=np.int64)

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _make(table.data[index], (table,), backward, "take_rows")


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        grad = np.zeros_like(x.data)
        grad[:, start:stop] = g
        return (grad,)

    return _make(x.data[:, start:stop], (x,), backward, "slice_cols")


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    def backward(g):
        grad = np.zeros_like(x.data)
        grad[start:stop] = g
        return (grad,)

    return _make(x.data[start:stop], (x,), backward, "slice_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def mean_pool(rows: Tensor) -> Tensor:
    """Average n rows into one [1 x d] row; backward hands g/n to every row."""
    if rows.data.ndim != 2:
        raise ShapeError(f"mean_pool needs a matrix, got shape {list(rows.shape)}")
    n = rows.shape[0]
    if n == 0:
        raise EmptyPoolError("mean_pool over zero rows")

    def backward(g):
        return (np.broadcast_to(g / n, rows.shape).copy(),)

    return _make(rows.data.sum(axis=0, keepdims=True) / n, (rows,), backward, "mean_pool")


# ============================================================================
# Normalisation and attention pieces
# ============================================================================

def softmax(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row-wise softmax. Entries where `mask` is True are excluded (probability 0);
    every row must keep at least one entry.
    """
    scores = x.data
    if mask is not None:
        scores = np.where(mask, -np.inf, scores)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _make(probs, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd

    def backward(g):
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgamma = (g * xhat).sum(axis=0).reshape(gamma.shape)
        dbeta = g.sum(axis=0).reshape(beta.shape)
        return dx, dgamma, dbeta

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), backward, "layer_norm")


def log_softmax_array(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int], mask: Sequence[bool]) -> Tensor:
    """
    Mean negative log-likelihood of `targets` over the rows where mask is True.

    Masked-out rows contribute no loss and receive an exactly zero gradient.
    """
    n = logits.shape[0]
    if len(targets) != n or len(mask) != n:
        raise ShapeError(
            f"softmax_cross_entropy: logits have {n} rows, targets {len(targets)}, mask {len(mask)}"
        )
    keep = np.asarray(mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise NoSupervisionError("softmax_cross_entropy: mask selects no position")
    target_idx = np.asarray(targets, dtype=np.int64)
    rows = np.arange(n)

    logp = log_softmax_array(logits.data)
    picked = logp[rows, target_idx]
    loss = -np.where(keep, picked, 0.0).sum() / count

    def backward(g):
        grad = np.exp(logp)
        grad[rows, target_idx] -= 1.0
        grad = np.where(keep[:, None], grad * (g / count), 0.0)
        return (grad,)

    return _make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# ============================================================================
# Gradient checking
# ============================================================================

REL_ERR_FLOOR = 1e-3


def numerical_gradient(f: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() with respect to every entry of tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f()
        flat[i] = original - h
        minus = f()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_ERR_FLOOR) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / scale))


def gradient_check(
    build_loss: Callable[[], Tensor],
    params: Dict[str, Tensor],
    h: float = 1e-5,
) -> Dict[str, float]:
    """
    Compare reverse-mode gradients of build_loss() against central differences.

    Returns:
        Max relative error per parameter name.
    """
    for p in params.values():
        p.zero_grad()
    build_loss().backward()
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()}

    def scalar() -> float:
        with no_grad():
            return build_loss().item()

    return {
        name: relative_error(analytic[name], numerical_gradient(scalar, p, h))
        for name, p in params.items()
    }
