from __future__ import annotations

from typing import Callable, Iterable

import numpy as np

from .tensor import Tensor


def gradients(loss: Tensor, params: dict[str, Tensor], retain_graph: bool = False) -> dict[str, np.ndarray]:
    """Backpropagate ``loss`` and collect ``d loss / d p`` for each named parameter.

    Parameters the loss does not depend on get zero arrays. Existing ``.grad``
    values are cleared first so the result reflects this loss only.
    """
    for p in params.values():
        p.grad = None
    if loss.requires_grad:
        loss.backward(retain_graph=retain_graph)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def grad_check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               eps: float = 1e-6, floor: float = 1e-6, rel_floor: float = 0.0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` is re-evaluated for every perturbed entry and must be
    deterministic: fix any RNG seed inside it. The relative error of one entry
    is ``|a - n| / max(|a|, |n|, floor)``. A positive ``rel_floor`` raises
    the floor to ``rel_floor`` times the largest analytic entry, so entries
    whose exact gradient is zero are judged against the loss's gradient scale
    rather than against finite-difference round-off.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must lie in (0, 1e-2], got {eps}")
    if not isinstance(params, dict):
        params = {str(i): p for i, p in enumerate(params)}

    analytic = gradients(loss_fn(), params)
    if rel_floor > 0.0:
        scale = max((float(np.max(np.abs(g))) for g in analytic.values() if g.size), default=0.0)
        floor = max(floor, rel_floor * scale)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn().data)
            flat[i] = orig - eps
            down = float(loss_fn().data)
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst
