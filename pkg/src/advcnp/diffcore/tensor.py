"""Tape-based reverse-mode automatic differentiation over float64 arrays.

Every operation evaluates eagerly and records a closure mapping the output
gradient to parent gradients. Calling :meth:`Tensor.backward` on a scalar
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, log_expit


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised when the graph API is used out of order."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense float64 array that optionally participates in autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_released")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor | None, ...] = ()
        self._backward: Callable | None = None
        self._released = False

    # -- bookkeeping -----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- reverse pass ----------------------------------------------------
    def backward(self, grad=None, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Without ``retain_graph`` the recorded closures are dropped afterwards
        and a second call raises :class:`UsageError`.
        """
        if self._released:
            raise UsageError("backward() called on a graph that was already released; "
                             "rebuild it with a fresh forward pass")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad "
                             "(no forward pass recorded against trainable leaves)")
        if grad is None:
            if self.data.size != 1:
                raise UsageError(f"backward() needs an explicit grad for non-scalar shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"grad shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or parent is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if not retain_graph:
            for node in order:
                if node._backward is not None:
                    node._backward = None
                    node._parents = ()
                    node._released = True

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._released = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # parents that were constants when recorded stay constants later
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(a, b, fn, opname):
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from exc
    return a, b, data


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b, data = _binary(a, b, np.add, "add")
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b, data = _binary(a, b, np.subtract, "sub")
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b, data = _binary(a, b, np.multiply, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b, data = _binary(a, b, np.divide, "div")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    data = a.data ** p
    return _result(data, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    data = np.sqrt(a.data)
    return _result(data, (a,), lambda g: (0.5 * g / data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)
    return _result(data, (a,), lambda g: (g * (1.0 - data * data),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = expit(a.data)
    return _result(data, (a,), lambda g: (g * data * (1.0 - data),))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) evaluated without overflow."""
    a = as_tensor(a)
    return _result(log_expit(a.data), (a,), lambda g: (g * expit(-a.data),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.logaddexp(0.0, a.data), (a,), lambda g: (g * expit(a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    return _result(data, (a,), lambda g: (g * (data > 0),))


# -- linear algebra ---------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_shared(a, b)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        A, B = a.data, b.data
        a_vec, b_vec = A.ndim == 1, B.ndim == 1
        if a_vec:
            A = A[None, :]
            g = np.expand_dims(g, -2)
        if b_vec:
            B = B[:, None]
            g = g[..., None]
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(B, -1, -2))
            ga = _unbroadcast(ga, A.shape)
            if a_vec:
                ga = ga.reshape(a.shape)
        if b.requires_grad:
            if B.ndim == 2 and A.ndim > 2:
                # weight matrix shared across leading dims: fold them into rows
                gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), B.shape)
            if b_vec:
                gb = gb.reshape(b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def _matmul_shared(a: Tensor, b: Tensor) -> Tensor:
    # (..., k) @ (k, m): fold leading dims into one GEMM
    k, m = b.shape
    if a.shape[-1] != k:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    a2 = a.data.reshape(-1, k)
    out_shape = a.shape[:-1] + (m,)
    data = (a2 * b.data[0] if k == 1 else a2 @ b.data).reshape(out_shape)

    def backward(g):
        g2 = g.reshape(-1, m)
        ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward)


def linear(x, weight, bias, relu: bool = False) -> Tensor:
    """Fused ``x @ weight + bias`` with an optional ReLU, over leading dims of ``x``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    k, m = weight.shape
    if x.shape[-1] != k or bias.shape != (m,):
        raise ShapeError(f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape}")
    a2 = x.data.reshape(-1, k)
    out = a2 * weight.data[0] if k == 1 else a2 @ weight.data
    out += bias.data
    if relu:
        np.maximum(out, 0.0, out=out)

    def backward(g):
        g2 = g.reshape(-1, m)
        if relu:
            g2 = g2 * (out > 0)
        ga = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = a2.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return ga, gw, gb

    return _result(out.reshape(x.shape[:-1] + (m,)), (x, weight, bias), backward)


def relu_head(x, w1, b1, w2, b2) -> Tensor:
    """Fused ``relu(x @ w1 + b1) @ w2 + b2`` for a single output unit.

    With one output the hidden-layer gradient factors through the ReLU mask,
    so every backward product is a GEMM against that mask instead of an
    elementwise pass over the hidden activations.
    """
    x, w1, b1, w2, b2 = (as_tensor(t) for t in (x, w1, b1, w2, b2))
    k, h = w1.shape
    if x.shape[-1] != k or b1.shape != (h,) or w2.shape != (h, 1) or b2.shape != (1,):
        raise ShapeError(f"relu_head: input {x.shape}, weights {w1.shape} / {w2.shape}")
    if k == 1:
        return _relu_head_scalar(x, w1, b1, w2, b2)
    a2 = x.data.reshape(-1, k)
    hidden = a2 * w1.data[0] if k == 1 else a2 @ w1.data
    hidden += b1.data
    np.maximum(hidden, 0.0, out=hidden)
    mask = np.greater(hidden, 0.0, out=np.empty(hidden.shape), casting="unsafe")
    out = hidden @ w2.data + b2.data
    v = w2.data[:, 0]

    def backward(g):
        g2 = g.reshape(-1, 1)
        ga = gw1 = gb1 = gw2 = gb2 = None
        if x.requires_grad:
            ga = (g2 * (mask @ (w1.data * v).T)).reshape(x.shape)
        if w1.requires_grad or b1.requires_grad:
            sums = np.concatenate([a2 * g2, g2], axis=1).T @ mask
            gw1 = sums[:k] * v if w1.requires_grad else None
            gb1 = sums[k] * v if b1.requires_grad else None
        if w2.requires_grad:
            gw2 = hidden.T @ g2
        if b2.requires_grad:
            gb2 = g2.sum(axis=0)
        return ga, gw1, gb1, gw2, gb2

    return _result(out.reshape(x.shape[:-1] + (1,)), (x, w1, b1, w2, b2), backward)


def _prefix(a: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(a)])


def _suffix(a: np.ndarray) -> np.ndarray:
    return np.concatenate([np.cumsum(a[::-1])[::-1], [0.0]])


def _relu_head_scalar(x, w1, b1, w2, b2) -> Tensor:
    # With a scalar input the head is piecewise linear with one kink per
    # hidden unit at t = -b / w. Sorting the kinks turns the hidden layer into
    # prefix sums, so neither pass touches an (n, h) array.
    y = x.data.reshape(-1)
    w, b, v = w1.data[0], b1.data, w2.data[:, 0]
    pos, neg, flat = w > 0, w < 0, (w == 0) & (b > 0)
    t = np.divide(-b, w, out=np.zeros_like(b), where=w != 0)
    op, on = np.argsort(t[pos], kind="stable"), np.argsort(t[neg], kind="stable")
    tp, tn = t[pos][op], t[neg][on]
    # unit active iff y > t (w > 0) or y < t (w < 0)
    ip = np.searchsorted(tp, y, side="left")
    jn = np.searchsorted(tn, y, side="right")
    vw, vb = v * w, v * b
    slope = _prefix(vw[pos][op])[ip] + _suffix(vw[neg][on])[jn]
    icept = _prefix(vb[pos][op])[ip] + _suffix(vb[neg][on])[jn] + vb[flat].sum()
    out = slope * y + icept + b2.data[0]

    def backward(g):
        gv = g.reshape(-1)
        ga = gw1 = gb1 = gw2 = gb2 = None
        if x.requires_grad:
            ga = (gv * slope).reshape(x.shape)
        if w1.requires_grad or b1.requires_grad or w2.requires_grad:
            order = np.argsort(y, kind="stable")
            ys, gs = y[order], gv[order]
            G, Y = np.zeros(len(w)), np.zeros(len(w))  # sums of g and g * y over points where a unit is active
            r = np.searchsorted(ys, t[pos], side="right")
            G[pos], Y[pos] = _suffix(gs)[r], _suffix(gs * ys)[r]
            l_ = np.searchsorted(ys, t[neg], side="left")
            G[neg], Y[neg] = _prefix(gs)[l_], _prefix(gs * ys)[l_]
            G[flat], Y[flat] = gv.sum(), (gv * y).sum()
            gw1 = (v * Y)[None, :] if w1.requires_grad else None
            gb1 = v * G if b1.requires_grad else None
            gw2 = (w * Y + b * G)[:, None] if w2.requires_grad else None
        if b2.requires_grad:
            gb2 = np.array([gv.sum()])
        return ga, gw1, gb1, gw2, gb2

    return _result(out.reshape(x.shape[:-1] + (1,)), (x, w1, b1, w2, b2), backward)


# -- reductions -------------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(data), (a,), lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.data.size / max(np.asarray(data).size, 1)
    return _result(np.asarray(data), (a,), lambda g: (_expand_reduced(g / n, a.shape, axis, keepdims),))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = m + np.log(total)
    weights = shifted / total

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    data = out if keepdims else np.squeeze(out, axis=axis)
    return _result(data, (a,), backward)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = np.exp(a.data - np.max(a.data, axis=axis, keepdims=True))
    s = z / z.sum(axis=axis, keepdims=True)
    return _result(s, (a,), lambda g: (s * (g - np.sum(g * s, axis=axis, keepdims=True)),))


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    s = np.exp(data)
    return _result(data, (a,), lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),))


# -- shape manipulation -----------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _result(data, (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from exc
    return _result(data, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in ts)
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _result(data, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    data = a.data[idx]
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (slice, int, type(Ellipsis), type(None))) for p in parts)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(data), (a,), backward)
