"""
Dense float64 tensor with reverse-mode automatic differentiation.

Every differentiable operation returns a new Tensor that remembers its
parents and a backward rule mapping the output gradient to one gradient per
parent. `Tensor.backward()` orders the reachable graph into a Tape
(inputs before outputs) and walks it once in reverse.
"""
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from modules.errors import DimensionError, InputError, NumericError

# ==============================
#  Gradient recording switch
# ==============================
# Recording state is per thread.
_GRAD_STATE = threading.local()


@contextmanager
def no_grad():
    """Evaluate without recording a graph (eval mode, finite differences)."""
    previous = grad_enabled()
    _GRAD_STATE.enabled = False
    try:
        yield
    finally:
        _GRAD_STATE.enabled = previous


def grad_enabled():
    return getattr(_GRAD_STATE, "enabled", True)


# ==============================
#  Tensor and Tape
# ==============================
class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, op, backward):
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = None
        out.op = op
        record = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = record
        out._parents = tuple(parents) if record else ()
        out._backward = backward if record else None
        return out

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} does not match tensor shape {self.shape}")

        tape = build_tape(self)
        pending = {id(self): grad}
        for node in reversed(tape.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, parent_grad in zip(node._parents, node._backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise InputError("Tensor division is only defined for scalar divisors")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Tape:
    """Executed operations reachable from a root, inputs before outputs."""

    nodes: list = field(default_factory=list)

    def __len__(self):
        return len(self.nodes)


def build_tape(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return Tape(order)


def as_tensor(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def zero_grad(tensors):
    for t in tensors:
        t.grad = None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(x):
    return np.swapaxes(x, -1, -2)


# ==============================
#  Elementwise arithmetic
# ==============================
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor._from_op(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x, factor):
    factor = float(factor)
    return Tensor._from_op(x.data * factor, (x,), "scale", lambda g: (g * factor,))


# ==============================
#  Linear algebra and layout
# ==============================
def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        return (
            _unbroadcast(g @ _swap_last(b.data), a.shape),
            _unbroadcast(_swap_last(a.data) @ g, b.shape),
        )

    return Tensor._from_op(a.data @ b.data, (a, b), "matmul", backward)


def transpose(x, axes=None):
    """Permute axes; the default swaps the last two."""
    if axes is None:
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inverse),))


def reshape(x, shape):
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}")
    return Tensor._from_op(data, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise InputError("concat needs at least one tensor")
    first = tensors[0].shape
    ax = axis % len(first)
    for t in tensors[1:]:
        if t.ndim != len(first) or any(t.shape[i] != first[i] for i in range(len(first)) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shapes {first} and {t.shape} disagree")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat",
        lambda g: tuple(np.split(g, cuts, axis=ax)),
    )


def slice_axis(x, start, stop, axis=0):
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return Tensor._from_op(x.data[index], (x,), "slice", backward)


def embedding_lookup(table, ids):
    """Gather rows of `table` (first axis) by an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(f"embedding_lookup: ids must lie in [0, {table.shape[0]}), got range [{ids.min()}, {ids.max()}]")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._from_op(table.data[ids], (table,), "embedding", backward)


# ==============================
#  Reductions
# ==============================
def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.array(np.broadcast_to(g, shape))


def sum_along_axis(x, axis=None, keepdims=False):
    return Tensor._from_op(
        x.data.sum(axis=axis, keepdims=keepdims), (x,), "sum",
        lambda g: (_expand(g, x.shape, axis, keepdims),),
    )


def mean_along_axis(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else x.shape[axis]
    return Tensor._from_op(
        x.data.mean(axis=axis, keepdims=keepdims), (x,), "mean",
        lambda g: (_expand(g, x.shape, axis, keepdims) / count,),
    )


# ==============================
#  Nonlinearities
# ==============================
def relu(x):
    # gradient is 0 where the input is exactly 0 (hinge boundary convention)
    active = x.data > 0
    return Tensor._from_op(np.where(active, x.data, 0.0), (x,), "relu", lambda g: (g * active,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation of GELU."""
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))
    dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
    return Tensor._from_op(0.5 * v * (1.0 + t), (x,), "gelu", lambda g: (g * (0.5 * (1.0 + t) + 0.5 * v * dt),))


def sigmoid(x):
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._from_op(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def log(x):
    return Tensor._from_op(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def clip(x, low, high):
    inside = (x.data >= low) & (x.data <= high)
    return Tensor._from_op(np.clip(x.data, low, high), (x,), "clip", lambda g: (g * inside,))


def softmax_rows(x):
    """Softmax over the last axis, stabilised by subtracting the row max."""
    if np.isnan(x.data).any():
        raise NumericError(f"softmax_rows received NaN input of shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    return Tensor._from_op(y, (x,), "softmax", lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def backward(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return Tensor._from_op(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm", backward)


def l2_normalize_rows(x):
    """Unit-norm rows over the last axis; an all-zero row stays zero."""
    norm = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    nonzero = norm > 0
    safe = np.where(nonzero, norm, 1.0)
    y = np.where(nonzero, x.data / safe, 0.0)

    def backward(g):
        return (np.where(nonzero, (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe, 0.0),)

    return Tensor._from_op(y, (x,), "l2_normalize", backward)


def dropout(x, rate, rng=None):
    """Inverted dropout; identity when rng is None (eval mode) or rate is 0."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._from_op(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# ==============================
#  Finite-difference oracle
# ==============================
def check_gradients(f, inputs, eps=1e-5, max_entries=None, seed=0, floor=1e-6):
    """
    Compare tape gradients of the scalar f() against central differences.

    f takes no arguments and reads `inputs`, which are perturbed in place.
    When max_entries is set, at most that many entries per input are checked
    (sampled with `seed`). Returns the worst relative error
    |analytic - numeric| / max(|analytic|, |numeric|, floor).
    """
    for x in inputs:
        x.grad = None
    out = f()
    if out.data.size != 1:
        raise DimensionError(f"check_gradients needs a scalar computation, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for x, grad in zip(inputs, analytic):
        positions = np.arange(x.data.size)
        if max_entries is not None and x.data.size > max_entries:
            positions = rng.choice(x.data.size, max_entries, replace=False)
        for flat in positions:
            index = np.unravel_index(flat, x.shape)
            original = x.data[index]
            with no_grad():
                x.data[index] = original + eps
                plus = float(f().data)
                x.data[index] = original - eps
                minus = float(f().data)
            x.data[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            error = abs(grad[index] - numeric) / max(abs(grad[index]), abs(numeric), floor)
            worst = max(worst, error)
    logging.debug(f"check_gradients: worst relative error {worst:.3e}")
    return worst
