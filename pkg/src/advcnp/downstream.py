"""Frozen-representation transfer: fit small heads on top of a trained CNP.

The CNP is only ever evaluated under :func:`~advcnp.diffcore.no_grad`, so
head training cannot touch its parameters.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .datasets import DatasetError, MetaDataset, context_size
from .diffcore import MLP, Adam, Module, Tensor
from .models import ModelError, NeuralProcess

FRACTION_GRID = (0.2, 0.4, 0.6, 0.8)
TASKS = ("regression", "classification")


@dataclass
class HeadConfig:
    task: str = "regression"
    targets: tuple = ("a",)
    hidden: int = 128
    epochs: int = 20
    batch_size: int = 32
    lr: float = 5e-4
    weight_decay: float = 6e-5
    fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown head task {self.task!r}; expected one of {TASKS}")
        if isinstance(self.targets, str):
            self.targets = (self.targets,)
        self.targets = tuple(self.targets)
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"context fraction must lie in (0, 1], got {self.fraction}")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 1:
            raise ValueError("epochs, batch_size and hidden must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d


class PredictionHead(Module):
    """One-hidden-layer MLP from a context representation to ``d_out`` outputs."""

    def __init__(self, d_in: int, d_out: int, task: str = "regression", hidden: int = 128,
                 rng: np.random.Generator | int = 0):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.task = task
        self.d_out = d_out
        self.net = MLP([d_in, hidden, d_out], rng)

    def __call__(self, r) -> Tensor:
        return self.net(r)


@dataclass
class HeadHistory:
    losses: list = field(default_factory=list)


def extract_repr(model: NeuralProcess, x_c, y_c) -> np.ndarray:
    """Mean-pooled context encoding, ``(..., d_r)``; no graph is recorded."""
    y_c = np.asarray(y_c, dtype=np.float64)
    if y_c.ndim < 2 or y_c.shape[-2] == 0:
        raise ModelError("empty context set")
    with dc.no_grad():
        return model.pooled_repr(np.asarray(x_c, dtype=np.float64), y_c).data


def dataset_reprs(model: NeuralProcess, dataset: MetaDataset, fraction: float, seed: int) -> np.ndarray:
    """One representation per instance from a fixed-size random context.

    Every instance receives ``context_size(fraction, N)`` points drawn
    without replacement; the draw depends only on ``seed``.
    """
    rng = np.random.default_rng(seed)
    n_points = dataset.x.shape[1]
    C = context_size(fraction, n_points)
    idx = np.argsort(rng.random((len(dataset), n_points)), axis=1)[:, :C]
    rows = np.arange(len(dataset))[:, None]
    return extract_repr(model, dataset.x[rows, idx], dataset.y[rows, idx])


def head_targets(dataset: MetaDataset, cfg: HeadConfig) -> np.ndarray:
    """Regression targets ``(n, len(targets))`` or integer class labels ``(n,)``."""
    if cfg.task == "classification":
        return dataset.labels()
    return np.stack([dataset.params(t) for t in cfg.targets], axis=1)


def _head_loss(head: PredictionHead, r: np.ndarray, target: np.ndarray) -> Tensor:
    out = head(r)
    if head.task == "classification":
        logp = dc.log_softmax(out, axis=-1)
        return -dc.mean(logp[np.arange(len(target)), target])
    return dc.mean(dc.square(out - target))


def train_head(model: NeuralProcess, dataset: MetaDataset, cfg: HeadConfig,
               head: PredictionHead | None = None) -> tuple[PredictionHead, HeadHistory]:
    """Fit a head on frozen representations of ``dataset``.

    Returns the head and the per-epoch mean training loss.
    """
    target = head_targets(dataset, cfg)
    if cfg.task == "classification":
        d_out = int(target.max()) + 1
        target = target.astype(np.int64)
    else:
        d_out = target.shape[1]
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    if head is None:
        head = PredictionHead(model.config.d_r, d_out, cfg.task, cfg.hidden, rng)
    r = dataset_reprs(model, dataset, cfg.fraction, cfg.seed)
    opt = Adam(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = HeadHistory()
    n = len(dataset)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            ids = order[i:i + cfg.batch_size]
            loss = _head_loss(head, r[ids], target[ids])
            opt.step(dc.gradients(loss, opt.params))
            total += float(loss.data) * len(ids)
        history.losses.append(total / n)
    return head, history


def eval_head(head: PredictionHead, model: NeuralProcess, dataset: MetaDataset, cfg: HeadConfig,
              fraction: float | None = None, seed: int | None = None) -> float:
    """Test MSE (regression) or accuracy (classification) at one context fraction."""
    fraction = cfg.fraction if fraction is None else fraction
    seed = cfg.seed + 1 if seed is None else seed
    r = dataset_reprs(model, dataset, fraction, seed)
    target = head_targets(dataset, cfg)
    with dc.no_grad():
        out = head(r).data
    if head.task == "classification":
        return float(np.mean(np.argmax(out, axis=-1) == target))
    return float(np.mean((out - target) ** 2))


def fraction_sweep(model: NeuralProcess, train: MetaDataset, test: MetaDataset, cfg: HeadConfig,
                   fractions=FRACTION_GRID, separate: bool = True) -> list[dict]:
    """Train and evaluate a head at each context fraction.

    With ``separate`` each regression target gets its own head; otherwise
    one multi-output head is fit and its per-target errors are reported.
    Rows carry ``fraction``, ``seed``, ``target`` and ``metric``.
    """
    if not all(0.0 < f <= 1.0 for f in fractions):
        raise DatasetError(f"context fractions must lie in (0, 1], got {fractions}")
    rows = []
    for frac in fractions:
        if cfg.task == "classification":
            groups = [(cfg.targets, "label")]
        elif separate:
            groups = [((t,), t) for t in cfg.targets]
        else:
            groups = [(cfg.targets, "+".join(cfg.targets))]
        for targets, name in groups:
            sub = HeadConfig(**{**cfg.to_dict(), "targets": targets, "fraction": frac})
            head, _ = train_head(model, train, sub)
            if cfg.task == "regression" and not separate:
                r = dataset_reprs(model, test, frac, sub.seed + 1)
                with dc.no_grad():
                    err = np.mean((head(r).data - head_targets(test, sub)) ** 2, axis=0)
                for t, e in zip(targets, err):
                    rows.append({"fraction": frac, "seed": cfg.seed, "target": t, "metric": float(e)})
            else:
                rows.append({"fraction": frac, "seed": cfg.seed, "target": name,
                             "metric": eval_head(head, model, test, sub)})
    return rows


def summarize_rows(rows: list[dict]) -> list[dict]:
    """Mean and sample std (0 for one seed) of ``metric`` per (fraction, target)."""
    keys = sorted({(r["fraction"], r["target"]) for r in rows})
    out = []
    for frac, target in keys:
        vals = np.array([r["metric"] for r in rows if r["fraction"] == frac and r["target"] == target])
        out.append({"fraction": frac, "target": target, "n_seeds": len(vals),
                    "mean": float(vals.mean()),
                    "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0})
    return out
