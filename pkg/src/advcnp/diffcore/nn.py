"""Layers built on :mod:`advcnp.diffcore.tensor`."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class Module:
    """Container that discovers trainable tensors on its attributes.

    Parameter names are dotted attribute paths (``encoder.layers.0.weight``),
    which is also how they are keyed in checkpoints.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            value = np.asarray(state[k], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter {k}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


def glorot_uniform(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    s = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=(fan_in, fan_out))


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.fan_in = fan_in
        self.fan_out = fan_out
        self.weight = Tensor(glorot_uniform(fan_in, fan_out, rng), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor, relu: bool = False) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.fan_in:
            raise ShapeError(f"Linear expects last dim {self.fan_in}, got input shape {x.shape}")
        return T.linear(x, self.weight, self.bias, relu=relu)


class MLP(Module):
    """Affine layers with ReLU between them and a linear output.

    ``sizes`` lists every width including input and output, so
    ``MLP([2, 64, 64, 64])`` has two hidden layers.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.sizes = list(sizes)
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.as_tensor(x)
        if h.shape[-1] != self.sizes[0]:
            raise ShapeError(f"MLP fan-in {self.sizes[0]} does not match input shape {h.shape}")
        if len(self.layers) == 2 and self.sizes[-1] == 1:
            first, second = self.layers
            return T.relu_head(h, first.weight, first.bias, second.weight, second.bias)
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = layer(h, relu=i < last)
        return h


def mlp_apply(layers: MLP, x) -> Tensor:
    return layers(x)


class BatchNorm(Module):
    """Normalizes over the leading (batch) axis using batch statistics only."""

    def __init__(self, width: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Tensor(np.ones(width), requires_grad=True)
        self.beta = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        mu = T.mean(x, axis=0, keepdims=True)
        centered = x - mu
        var = T.mean(T.square(centered), axis=0, keepdims=True)
        return centered / T.sqrt(var + self.eps) * self.gamma + self.beta


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, n_heads, d // n_heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def scaled_dot_attention(queries, keys, values, n_heads: int = 1, return_weights: bool = False):
    """Multi-head softmax attention without learned projections.

    Shapes are ``(..., Tq, D)``, ``(..., Tk, D)`` and ``(..., Tk, Dv)``; the
    feature dims are split into ``n_heads`` equal slices and each head
    attends with logits scaled by ``1/sqrt(D / n_heads)``.
    """
    q, k, v = T.as_tensor(queries), T.as_tensor(keys), T.as_tensor(values)
    if k.shape[-2] == 0:
        raise ShapeError("attention over zero keys")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    d, dv = q.shape[-1], v.shape[-1]
    if d % n_heads or dv % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide feature dims {d} / {dv}")
    qh, kh, vh = _split_heads(q, n_heads), _split_heads(k, n_heads), _split_heads(v, n_heads)
    logits = (qh @ kh.swapaxes(-1, -2)) * (1.0 / np.sqrt(d // n_heads))
    weights = T.softmax(logits, axis=-1)
    out = _merge_heads(weights @ vh)
    return (out, weights) if return_weights else out


class MultiHeadAttention(Module):
    """Scaled dot-product attention with query/key/value/output projections."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator):
        if width % n_heads:
            raise ShapeError(f"{n_heads} heads do not divide width {width}")
        self.n_heads = n_heads
        self.wq = Linear(width, width, rng)
        self.wk = Linear(width, width, rng)
        self.wv = Linear(width, width, rng)
        self.wo = Linear(width, width, rng)

    def __call__(self, queries, keys, values) -> Tensor:
        out = scaled_dot_attention(self.wq(queries), self.wk(keys), self.wv(values), self.n_heads)
        return self.wo(out)
