from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.parameter = name


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with decoupled weight decay.

    Each step first shrinks ``w`` by ``lr * weight_decay * w`` and then applies
    the bias-corrected Adam update.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: dict[str, np.ndarray] | None = None) -> None:
        """Apply one update. ``grads`` defaults to each parameter's ``.grad``;
        parameters without a gradient are treated as having a zero gradient."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for name, g in grads.items():
            if name not in self.params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if g.shape != self.params[name].shape:
                raise ShapeError(f"gradient for {name!r} has shape {g.shape}, "
                                 f"parameter has {self.params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(name)

        s = self.state
        s.t += 1
        bc1 = 1.0 - s.beta1 ** s.t
        bc2 = 1.0 - s.beta2 ** s.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p.data)
            m = s.m[name] = s.beta1 * s.m[name] + (1.0 - s.beta1) * g
            v = s.v[name] = s.beta2 * s.v[name] + (1.0 - s.beta2) * (g * g)
            w = p.data
            if s.weight_decay:
                w = w - s.lr * s.weight_decay * w
            p.data = w - s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)

    def state_dict(self) -> dict:
        s = self.state
        return {
            "lr": s.lr, "beta1": s.beta1, "beta2": s.beta2, "eps": s.eps,
            "weight_decay": s.weight_decay, "t": s.t,
            "m": {k: v.copy() for k, v in s.m.items()},
            "v": {k: v.copy() for k, v in s.v.items()},
        }

    def load_state_dict(self, d: dict) -> None:
        if set(d["m"]) != set(self.params):
            raise KeyError("optimizer state does not match parameter set")
        self.state = AdamState(lr=d["lr"], beta1=d["beta1"], beta2=d["beta2"], eps=d["eps"],
                               weight_decay=d["weight_decay"], t=int(d["t"]),
                               m={k: np.array(v, dtype=np.float64) for k, v in d["m"].items()},
                               v={k: np.array(v, dtype=np.float64) for k, v in d["v"].items()})


def adam_step(optimizer: Adam, grads: dict[str, np.ndarray] | None = None) -> Adam:
    optimizer.step(grads)
    return optimizer
