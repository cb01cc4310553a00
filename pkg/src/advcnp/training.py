"""Two-stage training: maximum likelihood, then adversarial NCE calibration.

Stage 1 fits the CNP by likelihood (plus the contrastive term for CCNP).
Stage 2 alternates single-side updates: the EBM ascends the NCE value while
the CNP descends ``(1 - beta) * l1 + beta * l2``. Which side moves in a
batch depends on whether the EBM's accuracy on that batch exceeds ``alpha``.
"""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .datasets import EpisodeBatch, MetaDataset, Splits, fixed_episodes, iterate_batches, make_episode
from .diffcore import Adam, Module, Tensor
from .diffcore.serialize import CheckpointError, doc_to_tensors, tensors_to_doc
from .ebm import EnergyModel, discriminator_accuracy, nce_terms, roll_fakes
from .models import ModelConfig, NeuralProcess, build_model, ccnp_contrastive_loss, log_prob, mle_loss, \
    sample_predictions

STATE_FORMAT = "advcnp-train-state"
STATE_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good


class Side(str, Enum):
    CNP = "cnp"
    EBM = "ebm"


@dataclass
class TrainConfig:
    epochs_stage1: int = 200
    epochs_stage2: int = 200
    batch_size: int = 16
    frac_lo: float = 0.04
    frac_hi: float = 0.2
    alpha: float = 0.6
    beta: float = 0.1
    lr_stage1: float = 1e-3
    lr_stage2_cnp: float = 7e-4
    lr_stage2_ebm: float = 7e-4
    weight_decay: float = 6e-5
    patience: int = 20
    seed: int = 0
    fake_mode: str = "reparam"
    noise_ratio: int = 1
    decision: str = "current"
    ccnp_weight: float = 1.0
    ebm_hidden: int = 128
    ebm_use_x: bool = False
    eval_batch_size: int = 100

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.frac_lo <= self.frac_hi <= 1.0:
            raise ConfigError(f"context fractions must satisfy 0 < lo <= hi <= 1")
        if self.fake_mode not in ("reparam", "mean"):
            raise ConfigError(f"fake_mode must be 'reparam' or 'mean', got {self.fake_mode!r}")
        if self.decision not in ("current", "next"):
            raise ConfigError(f"decision must be 'current' or 'next', got {self.decision!r}")
        if not 1 <= self.noise_ratio <= self.batch_size:
            raise ConfigError(f"noise_ratio must lie in [1, batch_size={self.batch_size}], got {self.noise_ratio}")

    @property
    def frac_range(self) -> tuple[float, float]:
        return (self.frac_lo, self.frac_hi)

    @classmethod
    def for_family(cls, family: str, **overrides) -> TrainConfig:
        if family == "gp-rbf":
            base = dict(batch_size=128, frac_lo=0.1, frac_hi=0.3, epochs_stage1=250, epochs_stage2=250)
        else:
            base = {}
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**coerce_fields(cls, d))


def coerce_fields(cls, d: dict) -> dict:
    """Convert string values to the dataclass field types; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for k, v in d.items():
        default = fields[k].default
        out[k] = _coerce(v, default, k)
    return out


def _coerce(v, default, key):
    if not isinstance(v, str):
        return v
    try:
        if isinstance(default, bool):
            if v.lower() in ("true", "1", "yes", "on"):
                return True
            if v.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(v)
        if isinstance(default, int):
            return int(v)
        if isinstance(default, float):
            return float(v)
        if isinstance(default, tuple):
            return tuple(int(s) for s in v.replace("[", "").replace("]", "").split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value {v!r} for {key}") from exc
    return v


def read_flat_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {k!r}")
        out[k] = v
    return out


def write_flat_config(values: dict, path) -> None:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ",".join(str(s) for s in v)
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- small pieces ---------------------------------------------------------
def select_update_side(ebm_accuracy: float, alpha: float) -> Side:
    """CNP moves when the EBM is winning (accuracy strictly above alpha)."""
    return Side.CNP if ebm_accuracy > alpha else Side.EBM


def combined_loss(l1, l2, beta: float):
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    return (1.0 - beta) * l1 + beta * l2


@contextlib.contextmanager
def frozen(module: Module):
    """Treat a module's parameters as constants while building a graph."""
    params = list(module.parameters().values())
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True


@dataclass
class BatchRecord:
    stage: int
    epoch: int
    batch: int
    l1: float
    l2: float
    combined: float
    ebm_acc: float
    side: str


@dataclass
class EpochRecord:
    stage: int
    epoch: int
    val_l1: float
    train_time: float
    improved: bool


def stage1_objective(model: NeuralProcess, ep: EpisodeBatch, cfg: TrainConfig, rng):
    """Likelihood loss, plus the weighted contrastive term for CCNP."""
    dist = model.predict(ep)
    l1 = mle_loss(model, ep, dist)
    total = l1
    if model.variant == "CCNP":
        total = l1 + cfg.ccnp_weight * ccnp_contrastive_loss(model, ep, rng)
    return dist, l1, total


@dataclass
class AdversarialBatch:
    """Everything stage 2 derives from one CNP forward pass.

    ``ebm_true``/``ebm_fake`` are EBM log-densities whose graphs reach the
    EBM parameters only: generated points enter them detached. ``fake`` is
    the unrolled generation; ``fake_idx`` selects the rolled copies used
    for noise-to-data ratios above one.
    """

    l1: Tensor
    objective: Tensor
    dist: object
    fake: Tensor
    fake_idx: np.ndarray | None
    cnp_true: Tensor
    cnp_fake: Tensor
    x_target: np.ndarray
    ebm_true: Tensor
    ebm_fake: Tensor
    value: float
    accuracy: float


def _rolled_index(K: int, ratio: int) -> np.ndarray | None:
    if ratio == 1:
        return None
    return np.concatenate([np.roll(np.arange(K), -j) for j in range(ratio)])


def ebm_on_fakes(ebm: EnergyModel, fake, x_target: np.ndarray, idx: np.ndarray | None) -> Tensor:
    """EBM log-densities of the (rolled) fakes.

    A y-only EBM scores each generated point the same wherever it is paired,
    so it is evaluated once on the unrolled batch and the scores are
    gathered; a covariate-aware EBM sees every rolled pairing.
    """
    if idx is None:
        return ebm.log_prob(fake, x_target)
    if ebm.use_x:
        return ebm.log_prob(dc.as_tensor(fake)[idx], x_target[idx])
    return ebm.log_prob(fake)[idx]


def adversarial_forward(model: NeuralProcess, ebm: EnergyModel, ep: EpisodeBatch, cfg: TrainConfig,
                        rng, noise=None) -> AdversarialBatch:
    dist, l1, objective = stage1_objective(model, ep, cfg, rng)
    fake = sample_predictions(dist, rng, cfg.fake_mode, noise=noise)
    cnp_true = log_prob(dist, ep.y_target)
    cnp_fake = log_prob(dist, fake)
    ratio = min(cfg.noise_ratio, ep.K)  # a short final batch bounds the ratio
    _, cnp_fake_r = roll_fakes(fake, cnp_fake, ratio)
    idx = _rolled_index(ep.K, ratio)
    ebm_true = ebm.log_prob(ep.y_target, ep.x_target)
    ebm_fake = ebm_on_fakes(ebm, fake.detach(), ep.x_target, idx)
    g_true = ebm_true.data - cnp_true.data
    g_fake = ebm_fake.data - cnp_fake_r.data
    with dc.no_grad():
        value = nce_terms(g_true, 0.0 * g_true, g_fake, 0.0 * g_fake, ep.K).value
    acc = discriminator_accuracy(expit(g_true), expit(g_fake))
    return AdversarialBatch(l1, objective, dist, fake, idx, cnp_true, cnp_fake_r, ep.x_target, ebm_true,
                            ebm_fake, float(value.data), acc)


def ebm_side_loss(ebm: EnergyModel, ep: EpisodeBatch, b: AdversarialBatch) -> Tensor:
    """Negated NCE value with every CNP quantity held constant."""
    return -nce_terms(b.ebm_true, b.cnp_true.detach(), b.ebm_fake, b.cnp_fake.detach(), ep.K).value


def cnp_side_loss(ebm: EnergyModel, ep: EpisodeBatch, b: AdversarialBatch, beta: float):
    """``(1 - beta) * l1 + beta * l2`` with the EBM frozen.

    Gradients reach the CNP through its log-densities and through the
    generated points fed to the EBM.
    """
    with frozen(ebm):
        ebm_fake = ebm_on_fakes(ebm, b.fake, b.x_target, b.fake_idx)
        l2 = nce_terms(b.ebm_true.detach(), b.cnp_true, ebm_fake, b.cnp_fake, ep.K).value
        total = combined_loss(b.objective, l2, beta)
    return total, l2


def evaluate_l1(model: NeuralProcess, episodes: list[EpisodeBatch]) -> float:
    """Mean negative log-likelihood per target point."""
    total, count = 0.0, 0
    with dc.no_grad():
        for ep in episodes:
            lp = log_prob(model.predict(ep), ep.y_target).data
            total += -lp.sum()
            count += lp.size
    return float(total / count)


def evaluate_mse(model: NeuralProcess, dataset: MetaDataset, fraction: float, seed: int = 0,
                 batch_size: int = 100) -> float:
    """MSE between the predictive mean and every target observation."""
    total, count = 0.0, 0
    with dc.no_grad():
        for ep in fixed_episodes(dataset, batch_size, fraction, seed):
            err = model.predict(ep).mean - ep.y_target
            total += float(np.sum(err * err))
            count += err.size
    return total / count


# -- the loop -------------------------------------------------------------
class Trainer:
    """Resumable training loop for one stage.

    All randomness after construction flows from one generator whose state
    is checkpointed, so a run split by save/load matches an unbroken one.
    """

    def __init__(self, model: NeuralProcess, splits: Splits, cfg: TrainConfig, stage: int = 1,
                 ebm: EnergyModel | None = None):
        if stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {stage}")
        self.model, self.splits, self.cfg, self.stage = model, splits, cfg, stage
        self.rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, stage]))
        self.val_episodes = fixed_episodes(splits.validation, cfg.eval_batch_size, cfg.frac_hi,
                                           seed=cfg.seed + 7919)
        if stage == 1:
            self.ebm = None
            self.opt = Adam(model.parameters(), lr=cfg.lr_stage1, weight_decay=cfg.weight_decay)
            self.opt_ebm = None
        else:
            if ebm is None:
                ebm = fresh_ebm(model.config, cfg)
            self.ebm = ebm
            self.opt = Adam(model.parameters(), lr=cfg.lr_stage2_cnp, weight_decay=cfg.weight_decay)
            self.opt_ebm = Adam(ebm.parameters(), lr=cfg.lr_stage2_ebm, weight_decay=cfg.weight_decay)
        self.epoch = 0
        self.batch_pos = 0
        self.epoch_batches: list[np.ndarray] | None = None
        self.epoch_time = 0.0
        self.history: list[BatchRecord] = []
        self.val_history: list[EpochRecord] = []
        self.best_val = math.inf
        self.best_state: dict | None = None
        self.bad_epochs = 0
        self.pending_side = Side.EBM
        self.done = False
        self.stop_reason = ""
        self.checkpoint_dir: Path | None = None
        if stage == 2:
            # the calibrated run must beat its own starting point to replace it
            self.best_val = float(evaluate_l1(model, self.val_episodes))
            self.best_state = self.snapshot()

    @property
    def max_epochs(self) -> int:
        return self.cfg.epochs_stage1 if self.stage == 1 else self.cfg.epochs_stage2

    def snapshot(self) -> dict:
        snap = {"model": self.model.state_dict()}
        if self.ebm is not None:
            snap["ebm"] = self.ebm.state_dict()
        return snap

    def restore(self, snap: dict) -> None:
        self.model.load_state_dict(snap["model"])
        if self.ebm is not None and "ebm" in snap:
            self.ebm.load_state_dict(snap["ebm"])

    def run(self, max_batches: int | None = None) -> Trainer:
        import time

        steps = 0
        while not self.done and self.max_epochs > 0:
            if max_batches is not None and steps >= max_batches:
                break
            if self.epoch_batches is None:
                self.epoch_batches = iterate_batches(len(self.splits.train), self.cfg.batch_size, self.rng)
                self.batch_pos = 0
                self.epoch_time = 0.0
            t0 = time.perf_counter()
            ids = self.epoch_batches[self.batch_pos]
            if self.stage == 1:
                self._step_stage1(ids)
            else:
                self._step_stage2(ids)
            self.epoch_time += time.perf_counter() - t0
            self.batch_pos += 1
            steps += 1
            if self.batch_pos == len(self.epoch_batches):
                self._end_epoch()
        if self.max_epochs <= 0 and not self.done:
            self.done, self.stop_reason = True, "no epochs configured"
        return self

    def _diverged(self, what: str, side: str) -> None:
        last_good = self.best_state
        if last_good is not None:
            self.restore(last_good)
        if self.checkpoint_dir is not None:
            save_checkpoint(self, self.checkpoint_dir / f"stage{self.stage}_diverged.json")
        raise TrainingDiverged(f"non-finite {what} in stage {self.stage}, epoch {self.epoch}, "
                               f"batch {self.batch_pos}, side {side}", last_good)

    def _episode(self, ids) -> EpisodeBatch:
        return make_episode(self.splits.train, len(ids), self.cfg.frac_range, self.rng, instance_ids=ids)

    def _step_stage1(self, ids) -> None:
        ep = self._episode(ids)
        _, l1, total = stage1_objective(self.model, ep, self.cfg, self.rng)
        if not np.isfinite(total.data):
            self._diverged("loss", Side.CNP.value)
        grads = dc.gradients(total, self.opt.params)
        self.opt.step(grads)
        self.history.append(BatchRecord(1, self.epoch, self.batch_pos, float(l1.data), math.nan,
                                        float(total.data), math.nan, Side.CNP.value))

    def _step_stage2(self, ids) -> None:
        ep = self._episode(ids)
        b = adversarial_forward(self.model, self.ebm, ep, self.cfg, self.rng)
        decided = select_update_side(b.accuracy, self.cfg.alpha)
        if self.cfg.decision == "current":
            side = decided
        else:
            side, self.pending_side = self.pending_side, decided
        if side is Side.EBM:
            loss = ebm_side_loss(self.ebm, ep, b)
            if not np.isfinite(loss.data):
                self._diverged("EBM loss", side.value)
            self.opt_ebm.step(dc.gradients(loss, self.opt_ebm.params))
            combined = combined_loss(float(b.objective.data), b.value, self.cfg.beta)
        else:
            loss, _ = cnp_side_loss(self.ebm, ep, b, self.cfg.beta)
            if not np.isfinite(loss.data):
                self._diverged("CNP loss", side.value)
            self.opt.step(dc.gradients(loss, self.opt.params))
            combined = float(loss.data)
        self.history.append(BatchRecord(2, self.epoch, self.batch_pos, float(b.l1.data), b.value,
                                        combined, b.accuracy, side.value))

    def _end_epoch(self) -> None:
        val = evaluate_l1(self.model, self.val_episodes)
        if not np.isfinite(val):
            self._diverged("validation loss", "-")
        improved = val < self.best_val
        if improved:
            self.best_val = val
            self.best_state = self.snapshot()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        self.val_history.append(EpochRecord(self.stage, self.epoch, val, self.epoch_time, improved))
        self.epoch += 1
        self.epoch_batches = None
        self.batch_pos = 0
        if improved and self.checkpoint_dir is not None:
            save_checkpoint(self, self.checkpoint_dir / f"stage{self.stage}_best.json")
        if self.bad_epochs >= self.cfg.patience:
            self.done, self.stop_reason = True, f"no validation improvement in {self.cfg.patience} epochs"
        elif self.epoch >= self.max_epochs:
            self.done, self.stop_reason = True, "epoch budget exhausted"

    def finalize(self) -> None:
        """Load the best-validation parameters into the live model."""
        if self.best_state is not None:
            self.restore(self.best_state)


def fresh_ebm(model_config: ModelConfig, cfg: TrainConfig) -> EnergyModel:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, 1]))
    return EnergyModel(model_config.d_y, cfg.ebm_hidden, rng, use_x=cfg.ebm_use_x, d_x=model_config.d_x)


@dataclass
class TrainResult:
    model: NeuralProcess
    ebm: EnergyModel | None
    history: list
    val_history: list
    best_val: float
    stop_reason: str


def _run_stage(trainer: Trainer, checkpoint_dir) -> TrainResult:
    if checkpoint_dir is not None:
        trainer.checkpoint_dir = Path(checkpoint_dir)
        trainer.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    trainer.run()
    if trainer.checkpoint_dir is not None:
        save_checkpoint(trainer, trainer.checkpoint_dir / f"stage{trainer.stage}_final.json")
    trainer.finalize()
    return TrainResult(trainer.model, trainer.ebm, trainer.history, trainer.val_history,
                       trainer.best_val, trainer.stop_reason)


def train_stage1(model: NeuralProcess, splits: Splits, cfg: TrainConfig, checkpoint_dir=None) -> TrainResult:
    return _run_stage(Trainer(model, splits, cfg, stage=1), checkpoint_dir)


def train_stage2(model: NeuralProcess, splits: Splits, cfg: TrainConfig, ebm: EnergyModel | None = None,
                 checkpoint_dir=None) -> TrainResult:
    return _run_stage(Trainer(model, splits, cfg, stage=2, ebm=ebm), checkpoint_dir)


# -- persistence ----------------------------------------------------------
def _adam_to_doc(opt: Adam | None):
    if opt is None:
        return None
    d = opt.state_dict()
    d["m"] = tensors_to_doc(d["m"])
    d["v"] = tensors_to_doc(d["v"])
    return d


def _adam_from_doc(opt: Adam | None, d) -> None:
    if opt is None or d is None:
        return
    d = dict(d)
    d["m"] = doc_to_tensors(d["m"])
    d["v"] = doc_to_tensors(d["v"])
    opt.load_state_dict(d)


def _snap_to_doc(snap):
    if snap is None:
        return None
    return {k: tensors_to_doc(v) for k, v in snap.items()}


def _snap_from_doc(doc):
    if doc is None:
        return None
    return {k: doc_to_tensors(v) for k, v in doc.items()}


def save_checkpoint(trainer: Trainer, path) -> None:
    """Write the full trainer state (parameters, optimizers, RNG, progress)."""
    ebm = trainer.ebm
    doc = {
        "format": STATE_FORMAT,
        "version": STATE_VERSION,
        "stage": trainer.stage,
        "config": asdict(trainer.cfg),
        "model_config": trainer.model.config.to_dict(),
        "model": tensors_to_doc(trainer.model.state_dict()),
        "ebm_config": None if ebm is None else {"d_y": trainer.model.config.d_y, "hidden": trainer.cfg.ebm_hidden,
                                                "use_x": ebm.use_x, "d_x": trainer.model.config.d_x},
        "ebm": None if ebm is None else tensors_to_doc(ebm.state_dict()),
        "optimizers": {"cnp": _adam_to_doc(trainer.opt), "ebm": _adam_to_doc(trainer.opt_ebm)},
        "rng": trainer.rng.bit_generator.state,
        "progress": {
            "epoch": trainer.epoch,
            "batch_pos": trainer.batch_pos,
            "epoch_batches": None if trainer.epoch_batches is None else [b.tolist() for b in trainer.epoch_batches],
            "epoch_time": trainer.epoch_time,
            "bad_epochs": trainer.bad_epochs,
            "best_val": trainer.best_val if math.isfinite(trainer.best_val) else None,
            "pending_side": trainer.pending_side.value,
            "done": trainer.done,
            "stop_reason": trainer.stop_reason,
        },
        "best": _snap_to_doc(trainer.best_state),
        "history": [asdict(r) for r in trainer.history],
        "val_history": [asdict(r) for r in trainer.val_history],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def read_state(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != STATE_FORMAT:
        raise CheckpointError(f"{path} is not a training checkpoint")
    if doc.get("version") != STATE_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')!r} != supported {STATE_VERSION}")
    return doc


def model_from_state(doc: dict, which: str = "model") -> NeuralProcess:
    mc = dict(doc["model_config"])
    model = build_model(ModelConfig(**mc), 0)
    model.load_state_dict(doc_to_tensors(doc[which] if which == "model" else doc["best"]["model"]))
    return model


def load_checkpoint(path, splits: Splits) -> Trainer:
    """Rebuild a trainer exactly as it was saved; ``splits`` must be the same data."""
    doc = read_state(path)
    try:
        cfg = TrainConfig(**doc["config"])
        model = model_from_state(doc)
        ebm = None
        if doc["ebm"] is not None:
            ec = doc["ebm_config"]
            ebm = EnergyModel(ec["d_y"], ec["hidden"], np.random.default_rng(0), use_x=ec["use_x"], d_x=ec["d_x"])
            ebm.load_state_dict(doc_to_tensors(doc["ebm"]))
        trainer = Trainer(model, splits, cfg, stage=doc["stage"], ebm=ebm)
        _adam_from_doc(trainer.opt, doc["optimizers"]["cnp"])
        _adam_from_doc(trainer.opt_ebm, doc["optimizers"]["ebm"])
        trainer.rng.bit_generator.state = doc["rng"]
        p = doc["progress"]
        trainer.epoch = p["epoch"]
        trainer.batch_pos = p["batch_pos"]
        trainer.epoch_batches = None if p["epoch_batches"] is None else \
            [np.array(b, dtype=np.int64) for b in p["epoch_batches"]]
        trainer.epoch_time = p["epoch_time"]
        trainer.bad_epochs = p["bad_epochs"]
        trainer.best_val = math.inf if p["best_val"] is None else p["best_val"]
        trainer.pending_side = Side(p["pending_side"])
        trainer.done = p["done"]
        trainer.stop_reason = p["stop_reason"]
        trainer.best_state = _snap_from_doc(doc["best"])
        trainer.history = [BatchRecord(**r) for r in doc["history"]]
        trainer.val_history = [EpochRecord(**r) for r in doc["val_history"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    return trainer


def save_model(model: NeuralProcess, path, stats_ref: str | None = None) -> Path:
    """Write ``<path>`` (parameter document) and ``<path>.manifest.json``."""
    path = Path(path)
    dc.save_tensors(model.state_dict(), path)
    manifest = {"variant": model.variant, "config": model.config.to_dict(),
                "likelihood": model.config.likelihood, "params": path.name, "normalization": stats_ref}
    manifest_path = path.with_name(path.name + ".manifest.json")
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def load_model(path) -> NeuralProcess:
    """Load a model file or the best parameters of a training checkpoint."""
    path = Path(path)
    manifest = path.with_name(path.name + ".manifest.json")
    if manifest.exists():
        m = json.loads(manifest.read_text(encoding="utf-8"))
        model = build_model(ModelConfig(**m["config"]), 0)
        model.load_state_dict(dc.load_tensors(path))
        return model
    doc = read_state(path)
    return model_from_state(doc, "best" if doc.get("best") else "model")


def write_records_csv(records, path, extra: dict | None = None) -> None:
    records = list(records)
    if not records:
        Path(path).write_text("", encoding="utf-8")
        return
    rows = [asdict(r) for r in records]
    if extra:
        rows = [{**extra, **r} for r in rows]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
