"""Float64 numerics: activations, stable softmax, and a minimal reverse-mode
gradient tape.

The tape is deliberately small: dense 1-D/2-D arrays and the dozen operations
the models are built from, each with its exact backward rule.  ``grad_check``
closes the loop by comparing any tape-built scalar loss against central finite
differences.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the context (inference fast path)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def _as_f64(value) -> np.ndarray:
    return np.asarray(value, dtype=np.float64)


class Tensor:
    """A float64 array plus the backward rule of the operation that made it.

    A chain of Tensors is the gradient tape: ``backward`` replays the recorded
    operations in reverse and accumulates exact gradients into every node with
    ``requires_grad`` set.  Replaying the same tape twice yields identical
    gradients because each replay re-zeroes the accumulators first.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_ufunc__ = None  # force numpy to defer to our reflected operators

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward=None):
        self.value = _as_f64(value)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = parents
        self._backward: Callable[[np.ndarray], None] | None = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.value.shape}, requires_grad={self.requires_grad})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def t(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self):
        return tmean(self)


def constant(value) -> Tensor:
    """Wrap an array as a non-differentiable tape node."""
    return Tensor(value)


def parameter(value, name: str | None = None) -> Tensor:
    """Wrap an array as a trainable tape node."""
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(value, parents: tuple[Tensor, ...], backward) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(value, requires_grad=True, parents=parents, backward=backward)
    return Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to produce it."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.value.shape)

    return _node(a.value + b.value, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.value.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.value.shape)

    return _node(a.value - b.value, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.value, a.value.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.value.shape)

    return _node(a.value * b.value, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")

    def bw(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _node(a.value @ b.value, (a, b), bw)


def transpose(x: Tensor) -> Tensor:
    x = _wrap(x)

    def bw(g):
        if x.requires_grad:
            x.grad += g.T

    return _node(x.value.T, (x,), bw)


def tsum(x: Tensor, axis=None) -> Tensor:
    x = _wrap(x)

    def bw(g):
        if not x.requires_grad:
            return
        if axis is None:
            x.grad += g
        else:
            x.grad += np.expand_dims(g, axis=axis)

    return _node(x.value.sum(axis=axis), (x,), bw)


def tmean(x: Tensor) -> Tensor:
    x = _wrap(x)
    n = x.value.size

    def bw(g):
        if x.requires_grad:
            x.grad += g / n

    return _node(x.value.mean(), (x,), bw)


def take_rows(x: Tensor, ids) -> Tensor:
    """Row gather (embedding lookup); duplicate ids accumulate on backward."""
    x = _wrap(x)
    ids = np.asarray(ids, dtype=np.intp)

    def bw(g):
        if x.requires_grad:
            np.add.at(x.grad, ids, g)

    return _node(x.value[ids], (x,), bw)


def take_at(x: Tensor, rows, cols) -> Tensor:
    """Pick one entry per row of a 2-D tensor: out[i] = x[rows[i], cols[i]]."""
    x = _wrap(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def bw(g):
        if x.requires_grad:
            np.add.at(x.grad, (rows, cols), g)

    return _node(x.value[rows, cols], (x,), bw)


def _sigmoid_val(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax_val(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _log_softmax_val(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _check_finite(value: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(value)):
        bad = int(np.flatnonzero(~np.isfinite(value.reshape(-1)))[0])
        raise ValueError(f"{what}: non-finite entry at flat index {bad}")


def sigmoid(x):
    """Elementwise logistic function; tape op on Tensors, checked on arrays."""
    if isinstance(x, Tensor):
        s = _sigmoid_val(x.value)

        def bw(g):
            if x.requires_grad:
                x.grad += g * s * (1.0 - s)

        return _node(s, (x,), bw)
    arr = _as_f64(x)
    _check_finite(arr, "sigmoid")
    return _sigmoid_val(np.atleast_1d(arr)).reshape(arr.shape)


def tanh(x):
    """Elementwise hyperbolic tangent; tape op on Tensors, checked on arrays."""
    if isinstance(x, Tensor):
        t = np.tanh(x.value)

        def bw(g):
            if x.requires_grad:
                x.grad += g * (1.0 - t * t)

        return _node(t, (x,), bw)
    arr = _as_f64(x)
    _check_finite(arr, "tanh")
    return np.tanh(arr)


def relu(x):
    """Elementwise max(x, 0); tape op on Tensors, checked on arrays."""
    if isinstance(x, Tensor):
        mask = x.value > 0

        def bw(g):
            if x.requires_grad:
                x.grad += g * mask

        return _node(x.value * mask, (x,), bw)
    arr = _as_f64(x)
    _check_finite(arr, "relu")
    return np.maximum(arr, 0.0)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def apply_activation(v, kind: str):
    """Apply one of the supported activations by name."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None
    return fn(v)


def softmax(x, axis: int = -1):
    """Stable softmax (max-subtraction); tape op on Tensors, checked on arrays."""
    if isinstance(x, Tensor):
        p = _softmax_val(x.value, axis=axis)

        def bw(g):
            if x.requires_grad:
                x.grad += p * (g - (g * p).sum(axis=axis, keepdims=True))

        return _node(p, (x,), bw)
    arr = _as_f64(x)
    if arr.size == 0:
        raise ValueError("softmax: empty input")
    _check_finite(arr, "softmax")
    return _softmax_val(arr, axis=axis)


def log_softmax(x, axis: int = -1):
    """Stable log-softmax; tape op on Tensors, checked on arrays."""
    if isinstance(x, Tensor):
        ls = _log_softmax_val(x.value, axis=axis)

        def bw(g):
            if x.requires_grad:
                x.grad += g - np.exp(ls) * g.sum(axis=axis, keepdims=True)

        return _node(ls, (x,), bw)
    arr = _as_f64(x)
    if arr.size == 0:
        raise ValueError("log_softmax: empty input")
    _check_finite(arr, "log_softmax")
    return _log_softmax_val(arr, axis=axis)


def log_sum_exp(x, axis: int = -1) -> np.ndarray:
    """Stable log(sum(exp(x))) over an axis of a plain array."""
    arr = _as_f64(x)
    m = arr.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(arr - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def backward(loss: Tensor) -> None:
    """Replay the tape below ``loss`` and accumulate exact gradients.

    Gradient accumulators of every reachable differentiable node are re-zeroed
    first, so calling ``backward`` twice on the same tape gives identical
    results.
    """
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, emitted = stack.pop()
        if emitted:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    for node in topo:
        if node.requires_grad:
            node.grad = np.zeros_like(node.value)
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.value)
    for node in reversed(topo):
        if node._backward is not None and node.requires_grad:
            node._backward(node.grad)


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``loss_fn`` must rebuild the loss tape from scratch on every call (it is
    invoked twice per parameter entry with the entry perturbed in place).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-6, 1e-3]")
    loss = loss_fn()
    if not np.isfinite(loss.value):
        raise ValueError("grad_check: loss is non-finite at the given parameters")
    backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a_grad in zip(params, analytic):
        flat = p.value.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + eps
            f_plus = float(loss_fn().value)
            flat[i] = original - eps
            f_minus = float(loss_fn().value)
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                name = p.name or "param"
                raise ValueError(f"grad_check: non-finite loss when perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst


def clip_gradient_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for g in grads:
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm
