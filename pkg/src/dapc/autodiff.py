"""Minimal reverse-mode differentiation over dense float64 arrays.

Every traced operation returns a :class:`Tensor` whose ``grad_handle`` points
at a :class:`Node` holding the op name, its parents and a closure that maps
the output cotangent to one cotangent per parent.  :func:`backward` sorts the
reachable nodes topologically into a :class:`Tape`, walks it once in reverse
and returns the gradients of every leaf that requires them.

The graph is rebuilt on every forward pass (define-by-run).  Backward consumes
it: saved intermediates are dropped once the gradients are out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpotrf

logger = logging.getLogger(__name__)

DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition on the call was violated."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky factorization failed.

    ``pivot`` is the 1-based index of the leading minor that was not positive.
    """

    def __init__(self, pivot: int, jitter: float):
        self.pivot = pivot
        self.jitter = jitter
        super().__init__(
            f"matrix is not positive definite: leading minor {pivot} failed "
            f"(jitter={jitter:g})"
        )


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: BackwardFn):
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self):
        return f"Node({self.op})"


class Tensor:
    """Dense float64 array with an optional link into the autodiff graph."""

    __slots__ = ("values", "requires_grad", "grad", "_node", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=DTYPE, copy=True) if not (
            isinstance(values, np.ndarray) and values.dtype == DTYPE
        ) else values
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def grad_handle(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self._node.op}" if self._node else ""
        return f"Tensor(shape={self.shape}{tag}{op})"

    def __len__(self):
        return len(self.values)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(values: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn, op: str) -> Tensor:
    """Wrap ``values`` as the output of a traced op.

    A graph node is attached only when some parent requires gradients, so
    pure-constant computations never grow a graph.
    """
    parents = tuple(parents)
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward)
    return out


# ----------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.values + b.values, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return record(a.values - b.values, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    av, bv = a.values, b.values

    def back(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return record(av * bv, (a, b), back, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return record(a.values * c, (a,), lambda g: (g * c,), "scale")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.values)
    return record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.values)
    return record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def _elu(x: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    return np.where(x > 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.values
    y = _elu(x, alpha)
    slope = np.where(x > 0, 1.0, y + alpha)
    return record(y, (a,), lambda g: (g * slope,), "elu")


def relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    return record(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    return record(x * x, (a,), lambda g: (2.0 * g * x,), "square")


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "elu": elu,
    "relu": relu,
    "square": square,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name; ``b`` is the second operand or the scale factor."""
    try:
        fn = ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "sub", "mul", "scale"):
        if b is None:
            raise ContractError(f"{kind} needs a second operand")
        return fn(a, b)
    return fn(a)


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` for 2-D ``b``; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record(av @ bv, (a, b), back, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {a.shape}")
    return record(a.values.T, (a,), lambda g: (g.T,), "transpose")


def logdet_spd(a, jitter: float = 0.0) -> Tensor:
    """``ln det(a + jitter*I)`` for symmetric positive-definite ``a``.

    Uses the Cholesky factor, ``2 * sum(log(diag(L)))``.  The gradient is the
    (symmetrized) inverse of the jittered matrix.

    Raises
    ------
    NotPositiveDefiniteError
        If the factorization fails; carries the failing pivot.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"logdet_spd expects a square matrix, got {a.shape}")
    if jitter < 0:
        raise ContractError(f"jitter must be >= 0, got {jitter}")
    n = a.shape[0]
    c = a.values + jitter * np.eye(n) if jitter else a.values
    chol, info = dpotrf(c, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise NotPositiveDefiniteError(int(info), jitter)
    if info < 0:
        raise ContractError(f"dpotrf argument {-info} invalid")
    value = 2.0 * np.sum(np.log(np.diag(chol)))

    def back(g):
        inv = cho_solve((chol, True), np.eye(n))
        return (g * 0.5 * (inv + inv.T),)

    return record(np.asarray(value), (a,), back, "logdet_spd")


def cholesky_ok(a: np.ndarray) -> bool:
    _, info = dpotrf(np.asarray(a, dtype=DTYPE), lower=1, clean=0, overwrite_a=0)
    return info == 0


# ----------------------------------------------------------------------------
# shape manipulation and reductions


def index(a, key) -> Tensor:
    """Basic (non-fancy) indexing with gradient scatter-back."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[key] = g
        return (out,)

    return record(a.values[key], (a,), back, "index")


def slice_rows_cols(a, row_range: tuple[int, int], col_range: tuple[int, int]) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"slice_rows_cols expects a 2-D tensor, got {a.shape}")
    (r0, r1), (c0, c1) = row_range, col_range
    nr, nc = a.shape
    if not (0 <= r0 <= r1 <= nr and 0 <= c0 <= c1 <= nc):
        raise IndexError(
            f"slice rows {row_range} cols {col_range} out of bounds for shape {a.shape}"
        )
    return index(a, (slice(r0, r1), slice(c0, c1)))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record(a.values.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(axis: int, parts: Sequence) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    try:
        values = np.concatenate([p.values for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(parts)))

    return record(values, parts, back, "concat")


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), (a,), back, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.values.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


mean_over_axis = mean


def frobenius_sq(a) -> Tensor:
    a = as_tensor(a)
    x = a.values
    return record(np.asarray(np.sum(x * x)), (a,), lambda g: (2.0 * g * x,), "frobenius_sq")


def time_windows(z, width: int, stride: int = 1) -> Tensor:
    """Flatten every ``width``-step window of ``z`` (batch, time, dim).

    Returns shape ``(batch * n_windows, width * dim)`` with each row laid out
    time-major: the earliest step's ``dim`` values first.
    """
    z = as_tensor(z)
    if z.ndim != 3:
        raise DimensionError(f"time_windows expects (batch, time, dim), got {z.shape}")
    b, length, d = z.shape
    if width < 1 or stride < 1:
        raise ContractError("width and stride must be >= 1")
    if length < width:
        raise ContractError(f"sequence length {length} shorter than window {width}")
    n_win = (length - width) // stride + 1
    # (b, n_win, d, width) -> (b, n_win, width, d)
    view = np.lib.stride_tricks.sliding_window_view(z.values, width, axis=1)[:, ::stride]
    values = np.ascontiguousarray(view.transpose(0, 1, 3, 2)).reshape(b * n_win, width * d)

    def back(g):
        g = g.reshape(b, n_win, width, d)
        out = np.zeros((b, length, d))
        stop = (n_win - 1) * stride + 1
        for k in range(width):
            out[:, k:k + stop:stride, :] += g[:, :, k, :]
        return (out,)

    return record(values, (z,), back, "time_windows")


def softmax_cross_entropy(logits, target: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``target`` under row softmax."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    x = logits.values
    target = np.asarray(target, dtype=np.intp)
    n = x.shape[0]
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    value = -logp[np.arange(n), target].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(n), target] -= 1.0
        return (g * p / n,)

    return record(np.asarray(value), (logits,), back, "softmax_cross_entropy")


# ----------------------------------------------------------------------------
# backward


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a loss."""

    nodes: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            t, done = stack.pop()
            if done:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for p in t._node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)


def backward(loss: Tensor, retain_graph: bool = False) -> dict:
    """Gradients of scalar ``loss`` for every reachable leaf requiring them.

    Returns a map ``{leaf Tensor: ndarray}``; each leaf's ``.grad`` is also set.
    A leaf used several times receives the sum of its contributions.
    """
    if loss.values.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring gradients")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    leaves: dict = {}
    for t in reversed(tape.nodes):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t._node
        if node is None:
            leaves[t] = g
            t.grad = g
            continue
        for p, gp in zip(node.parents, node.backward(g)):
            if gp is None or not p.requires_grad:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = gp if prev is None else prev + gp
        if not retain_graph:
            t._node = None
    return leaves


# ----------------------------------------------------------------------------
# finite differences


def finite_difference_grad(f: Callable[[], float], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` w.r.t. the array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a-b| / max(max|a|, max|b|, floor)``."""
    num = np.max(np.abs(a - b)) if np.size(a) else 0.0
    den = max(np.max(np.abs(a)) if np.size(a) else 0.0,
              np.max(np.abs(b)) if np.size(b) else 0.0, floor)
    return float(num / den)
