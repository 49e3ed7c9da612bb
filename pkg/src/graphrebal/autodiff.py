"""Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-d row-major matrix wrapped in a :class:`Tensor`. The
computation graph is define-by-run: each operation records its parents
and a vector-Jacobian closure on the output node, and :func:`backward`
replays those closures in strict reverse creation order (creation order
is a topological order, so this is a reverse topological sweep).

The graph is rebuilt on every forward pass. Calling :func:`backward`
twice on the same loss node is rejected; rebuild the forward pass
instead. Gradients accumulate across multiple uses of a tensor within
one graph, and parameters that do not reach the loss keep zero grads.
"""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError

Array = np.ndarray

_node_ids = itertools.count()


def _as_matrix(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-d matrices, got shape {arr.shape}")
    return arr


class Tensor:
    """A matrix node in the implicit tape.

    ``data`` and ``grad`` are float64 arrays of identical shape. Leaves
    created with ``requires_grad=True`` are parameters; operation
    outputs require grad whenever any input does. ``node_id`` is a
    globally increasing creation index used to order the backward sweep.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id",
                 "_parents", "_vjps", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self.node_id = next(_node_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._vjps: tuple[Callable[[Array], Array], ...] = ()
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[:] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _node(data: Array, parents: tuple[Tensor, ...],
          vjps: tuple[Callable[[Array], Array], ...]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
        out._vjps = vjps
    return out


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b),
                 (lambda g: g @ bd.T, lambda g: ad.T @ g))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), (lambda g: g, lambda g: g))


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """Add a 1 x d row vector to every row of an n x d matrix."""
    if v.rows != 1 or v.cols != x.cols:
        raise ShapeError(f"add_rowvec: {x.shape} + {v.shape}")
    return _node(x.data + v.data, (x, v),
                 (lambda g: g, lambda g: g.sum(axis=0, keepdims=True)))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b), (lambda g: g * bd, lambda g: g * ad))


def negate(x: Tensor) -> Tensor:
    return _node(-x.data, (x,), (lambda g: -g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), (lambda g: g * c,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (x,), (lambda g: g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), (lambda g: g * mask,))


def log_clamped(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the argument clamped from below at ``floor``."""
    xd = np.maximum(x.data, floor)
    live = x.data > floor
    return _node(np.log(xd), (x,), (lambda g: g * live / xd,))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols: need at least one tensor")
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError(
                f"concat_cols: row counts differ, {p.rows} vs {rows}")
    offsets = np.cumsum([0] + [p.cols for p in parts])

    def make_vjp(i: int):
        lo, hi = offsets[i], offsets[i + 1]
        return lambda g: g[:, lo:hi]

    return _node(np.hstack([p.data for p in parts]), tuple(parts),
                 tuple(make_vjp(i) for i in range(len(parts))))


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.cols):
        raise ShapeError(f"slice_cols: [{lo}:{hi}] out of range for {x.shape}")

    def vjp(g: Array) -> Array:
        out = np.zeros((x.rows, x.cols))
        out[:, lo:hi] = g
        return out

    return _node(x.data[:, lo:hi].copy(), (x,), (vjp,))


def slice_rows(x: Tensor, lo: int, hi: int) -> Tensor:
    if not (0 <= lo < hi <= x.rows):
        raise ShapeError(f"slice_rows: [{lo}:{hi}] out of range for {x.shape}")

    def vjp(g: Array) -> Array:
        out = np.zeros((x.rows, x.cols))
        out[lo:hi, :] = g
        return out

    return _node(x.data[lo:hi, :].copy(), (x,), (vjp,))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(np.array([[x.data.mean()]]), (x,),
                 (lambda g: np.full(x.shape, g[0, 0] / n),))


def sum_all(x: Tensor) -> Tensor:
    return _node(np.array([[x.data.sum()]]), (x,),
                 (lambda g: np.full(x.shape, g[0, 0]),))


def row_l2norm(x: Tensor) -> Tensor:
    """Per-row Euclidean norm, result is n x 1. Zero rows get zero grad."""
    norms = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    safe = np.where(norms > 0, norms, 1.0)
    xd = x.data
    return _node(norms, (x,), (lambda g: g / safe * xd,))


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=1, keepdims=True)

    def vjp(g: Array) -> Array:
        dot = (g * out).sum(axis=1, keepdims=True)
        return out * (g - dot)

    return _node(out, (x,), (vjp,))


def log_softmax_rows(x: Tensor) -> Tensor:
    """Row-wise log(softmax(x)) as one fused op.

    Computing the two steps separately underflows once a logit gap
    exceeds ~700 and kills the gradient; the fused form stays exact for
    arbitrarily saturated rows.
    """
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    out = shifted - np.log(ex.sum(axis=1, keepdims=True))
    sm = ex / ex.sum(axis=1, keepdims=True)

    def vjp(g: Array) -> Array:
        return g - sm * g.sum(axis=1, keepdims=True)

    return _node(out, (x,), (vjp,))


def gather_rows(x: Tensor, idx: Array) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise ShapeError(f"gather_rows: index out of range for {x.shape}")

    def vjp(g: Array) -> Array:
        out = np.zeros((x.rows, x.cols))
        np.add.at(out, idx, g)
        return out

    return _node(x.data[idx], (x,), (vjp,))


def scatter_add_rows(x: Tensor, idx: Array, n_rows: int) -> Tensor:
    """Accumulate row i of x into output row idx[i]; output is n_rows x d."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.rows,):
        raise ShapeError(f"scatter_add_rows: {idx.shape} indices for {x.rows} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError("scatter_add_rows: index out of range")
    out = np.zeros((n_rows, x.cols))
    np.add.at(out, idx, x.data)
    return _node(out, (x,), (lambda g: g[idx],))


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of x by scalar s[i, 0]."""
    if s.shape != (x.rows, 1):
        raise ShapeError(f"scale_rows: {x.shape} rows vs scales {s.shape}")
    xd, sd = x.data, s.data
    return _node(xd * sd, (x, s),
                 (lambda g: g * sd,
                  lambda g: (g * xd).sum(axis=1, keepdims=True)))


def dropout(x: Tensor, rate: float, training: bool,
            rng: np.random.Generator) -> Tensor:
    """Inverted dropout. Identity when not training or rate is zero."""
    if not (0.0 <= rate < 1.0):
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate) / keep
    return _node(x.data * mask, (x,), (lambda g: g * mask,))


# ---------------------------------------------------------------------------
# backward and optimization


def backward(loss: Tensor) -> None:
    """Accumulate d loss / d node into ``grad`` of every reachable node.

    The loss must be 1x1. Each graph supports a single backward sweep;
    a second call on the same loss raises.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar 1x1 loss, got {loss.shape}")
    if loss._backward_ran:
        raise ContractError("backward already ran for this graph; rebuild the forward pass")
    loss._backward_ran = True
    if not loss.requires_grad:
        return

    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append(p)

    nodes.sort(key=lambda t: t.node_id, reverse=True)
    loss.grad[:] = 1.0
    for t in nodes:
        if not t._vjps:
            continue
        g = t.grad
        for p, vjp in zip(t._parents, t._vjps):
            if p.requires_grad:
                p.grad += vjp(g)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.zero_grad()


class Adam:
    """Bias-corrected Adam with decoupled weight decay.

    The decay step ``p -= lr * wd * p`` runs before the moment update,
    so decay never leaks into the running moments. Gradients are zeroed
    after each step.
    """

    def __init__(self, params: Sequence[Tensor], lr: float,
                 weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("Adam got a tensor that does not require grad")
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad[:] = 0.0


# ---------------------------------------------------------------------------
# numeric checking helpers


def numeric_gradient(fn: Callable[[], float], arr: Array, h: float = 1e-5) -> Array:
    """Central-difference gradient of fn() with respect to arr (in place)."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_relative_error(a: Array, b: Array, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, int] | None = None) -> Array:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return rng.uniform(-limit, limit, size=shape)
