"""Declarative experiment runs: regression tables, beta sweeps, downstream
sweeps, timing and gradient checks.

Every run writes into a fresh ``<out>/<id>-<hash>-rNNN`` directory, so a
repeated spec never overwrites earlier results. All CSVs carry the spec
hash as their first column.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import hashlib
import json
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import diffcore as dc
from .datasets import FAMILIES, Splits, make_episode, make_splits
from .downstream import FRACTION_GRID, HeadConfig, fraction_sweep
from .ebm import EnergyModel, nce_terms
from .models import ModelConfig, NeuralProcess, build_model, ccnp_contrastive_loss, log_prob, mle_loss, \
    sample_predictions
from .training import ConfigError, TrainConfig, Trainer, coerce_fields, evaluate_mse, save_model, \
    train_stage1, train_stage2, write_records_csv

DEFAULT_SIZES = {
    "sine": (500, 500, 500, 100),
    "oscillator": (500, 500, 500, 100),
    "gp-rbf": (1024, 256, 1000, 128),
}
PAPER_GP_TRAIN = 4096


class ExperimentFailed(RuntimeError):
    def __init__(self, message: str, manifest_path: Path | None = None):
        super().__init__(message)
        self.manifest_path = manifest_path


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one table row pair (baseline and adversarial)."""

    experiment_id: str = "exp"
    family: str = "sine"
    variant: str = "CNP"
    adversarial: bool = True
    seeds: tuple = (0, 1, 2)
    n_train: int | None = None
    n_val: int | None = None
    n_test: int | None = None
    n_points: int | None = None
    sigma: float = 0.2
    paper_scale: bool = False
    out_dir: str = "runs"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if isinstance(self.seeds, int):
            self.seeds = (self.seeds,)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if isinstance(self.train, dict):
            self.train = TrainConfig.from_dict(self.train)
        try:
            ModelConfig.for_family(self.family, self.variant, **self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model settings: {exc}") from exc

    @classmethod
    def for_family(cls, family: str, variant: str = "CNP", train: dict | None = None, **kw) -> ExperimentSpec:
        return cls(family=family, variant=variant, train=TrainConfig.for_family(family, **(train or {})), **kw)

    @property
    def sizes(self) -> tuple[int, int, int, int]:
        n_train, n_val, n_test, n_points = DEFAULT_SIZES[self.family]
        if self.family == "gp-rbf" and self.paper_scale:
            n_train = PAPER_GP_TRAIN
        pick = lambda v, d: d if v is None else int(v)  # noqa: E731
        return (pick(self.n_train, n_train), pick(self.n_val, n_val), pick(self.n_test, n_test),
                pick(self.n_points, n_points))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["train"] = asdict(self.train)
        return d

    def spec_hash(self) -> str:
        """Digest of every field that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_family(self.family, self.variant, **self.model)

    def splits(self, seed: int) -> Splits:
        n_train, n_val, n_test, n_points = self.sizes
        return make_splits(self.family, n_train, n_val, n_test, n_points, seed, sigma=self.sigma)

    def train_config(self, seed: int, **overrides) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed, **overrides)

    @classmethod
    def from_flat(cls, values: dict, base: ExperimentSpec | None = None) -> ExperimentSpec:
        """Build a spec from flat ``key: value`` strings.

        Spec fields are given by name, training fields by their TrainConfig
        name, and model fields as ``model.<name>``. Unknown keys are errors.
        """
        base = base or cls()
        spec_fields = {f.name for f in dataclasses.fields(cls)} - {"train", "model"}
        train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
        spec_kw, train_kw, model_kw = {}, {}, dict(base.model)
        for k, v in values.items():
            if k.startswith("model."):
                model_kw[k[6:]] = _model_value(k[6:], v)
            elif k in spec_fields:
                spec_kw[k] = v
            elif k in train_fields:
                train_kw[k] = v
            else:
                raise ConfigError(f"unknown configuration key {k!r}")
        merged = {f.name: getattr(base, f.name) for f in dataclasses.fields(cls)} | coerce_spec(spec_kw)
        family_changed = "family" in spec_kw and merged["family"] != base.family
        train_base = asdict(TrainConfig.for_family(merged["family"])) if family_changed else asdict(base.train)
        merged["train"] = TrainConfig(**{**train_base, **coerce_fields(TrainConfig, train_kw)})
        merged["model"] = model_kw
        return cls(**merged)


def _model_value(key: str, v):
    names = {f.name: f for f in dataclasses.fields(ModelConfig)}
    if key not in names:
        raise ConfigError(f"unknown model key {key!r}")
    return coerce_fields(ModelConfig, {key: v})[key]


def coerce_spec(values: dict) -> dict:
    out = {}
    for k, v in values.items():
        if not isinstance(v, str):
            out[k] = v
        elif k == "seeds":
            out[k] = tuple(int(s) for s in v.replace("[", "").replace("]", "").split(",") if s.strip())
        elif k in ("adversarial", "paper_scale"):
            if v.lower() not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
                raise ConfigError(f"bad boolean {v!r} for {k}")
            out[k] = v.lower() in ("true", "1", "yes", "on")
        elif k in ("n_train", "n_val", "n_test", "n_points"):
            out[k] = None if v.lower() == "none" else _int(v, k)
        elif k == "sigma":
            try:
                out[k] = float(v)
            except ValueError as exc:
                raise ConfigError(f"bad value {v!r} for sigma") from exc
        else:
            out[k] = v
    return out


def _int(v: str, key: str) -> int:
    try:
        return int(v)
    except ValueError as exc:
        raise ConfigError(f"bad integer {v!r} for {key}") from exc


# -- output plumbing --------------------------------------------------------
def new_run_dir(out_dir, experiment_id: str, spec_hash: str) -> Path:
    """Create the first unused ``<id>-<hash>-rNNN`` directory under ``out_dir``."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for n in range(1, 10000):
        path = root / f"{experiment_id}-{spec_hash}-r{n:03d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            continue
    raise ExperimentFailed(f"no free run directory under {root}")


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> Path:
    path = Path(path)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return path


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = [float(v) for v in values]
    mean = statistics.fmean(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else 0.0)


def aggregate(rows: list[dict], keys: list[str], metric: str = "mse") -> list[dict]:
    """Group ``rows`` by ``keys`` and report mean/std of ``metric``."""
    groups: dict[tuple, list[float]] = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r[metric])
    out = []
    for key, vals in groups.items():
        m, s = mean_std(vals)
        out.append({**dict(zip(keys, key)), "n_seeds": len(vals), f"{metric}_mean": m, f"{metric}_std": s})
    return out


def _write_manifest(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2, default=str), encoding="utf-8")
    return path


@dataclass
class SeedModels:
    splits: Splits
    baseline: NeuralProcess
    adversarial: NeuralProcess | None = None
    ebm: EnergyModel | None = None


@dataclass
class ExperimentResult:
    run_dir: Path
    spec_hash: str
    rows: list
    aggregate: list
    manifest: dict
    models: dict = field(default_factory=dict)

    def mse(self, model: str) -> list[float]:
        return [r["mse"] for r in self.rows if r["model"] == model]


def model_label(variant: str, adversarial: bool) -> str:
    return f"{variant}-adv" if adversarial else variant


def _seed_rows(spec: ExperimentSpec, h: str, seed: int, label: str, mse: float, extra: dict) -> dict:
    return {"spec_hash": h, "experiment_id": spec.experiment_id, "family": spec.family,
            "variant": spec.variant, "model": label, "seed": seed, "mse": mse, "mse_x10": 10.0 * mse, **extra}


def run_experiment(spec: ExperimentSpec, keep_models: bool = False) -> ExperimentResult:
    """Train every seed and write per-seed/aggregate CSVs plus a manifest.

    The baseline row is the best stage-1 model; with ``adversarial`` on, the
    calibrated row continues from it through stage 2. Test MSE is computed
    at the evaluation context fraction (the top of the training range).
    A failing seed is recorded in the manifest and raises
    :class:`ExperimentFailed` after the other seeds finish.
    """
    h = spec.spec_hash()
    run_dir = new_run_dir(spec.out_dir, spec.experiment_id, h)
    manifest = {"spec": spec.to_dict(), "spec_hash": h, "code_version": __version__, "seeds": {},
                "failures": [], "status": "running"}
    rows, models = [], {}
    for seed in spec.seeds:
        seed_dir = run_dir / f"seed{seed}"
        seed_dir.mkdir()
        entry = manifest["seeds"].setdefault(str(seed), {})
        try:
            splits = spec.splits(seed)
            cfg = spec.train_config(seed)
            model = build_model(spec.model_config(), seed)
            r1 = train_stage1(model, splits, cfg, checkpoint_dir=seed_dir / "ckpt1")
            write_records_csv(r1.history, seed_dir / "stage1_batches.csv", {"spec_hash": h})
            write_records_csv(r1.val_history, seed_dir / "stage1_epochs.csv", {"spec_hash": h})
            baseline = copy.deepcopy(model)
            path1 = seed_dir / "baseline.params.json"
            save_model(baseline, path1)
            mse1 = evaluate_mse(baseline, splits.test, cfg.frac_hi, seed=seed)
            entry.update(baseline_params=str(path1), baseline_mse=mse1, stage1_epochs=len(r1.val_history),
                         stage1_stop=r1.stop_reason)
            rows.append(_seed_rows(spec, h, seed, model_label(spec.variant, False), mse1,
                                   {"epochs": len(r1.val_history), "cnp_update_share": ""}))
            adv = ebm = None
            if spec.adversarial:
                r2 = train_stage2(model, splits, cfg, checkpoint_dir=seed_dir / "ckpt2")
                write_records_csv(r2.history, seed_dir / "stage2_batches.csv", {"spec_hash": h})
                write_records_csv(r2.val_history, seed_dir / "stage2_epochs.csv", {"spec_hash": h})
                adv, ebm = model, r2.ebm
                path2 = seed_dir / "adversarial.params.json"
                save_model(adv, path2)
                mse2 = evaluate_mse(adv, splits.test, cfg.frac_hi, seed=seed)
                share = float(np.mean([r.side == "cnp" for r in r2.history])) if r2.history else 0.0
                entry.update(adversarial_params=str(path2), adversarial_mse=mse2,
                             stage2_epochs=len(r2.val_history), stage2_stop=r2.stop_reason,
                             cnp_update_share=share)
                rows.append(_seed_rows(spec, h, seed, model_label(spec.variant, True), mse2,
                                       {"epochs": len(r2.val_history), "cnp_update_share": share}))
            if keep_models:
                models[seed] = SeedModels(splits, baseline, adv, ebm)
            entry["status"] = "ok"
        except Exception as exc:  # recorded, then re-raised as a failed run
            entry["status"] = "failed"
            manifest["failures"].append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    columns = ["spec_hash", "experiment_id", "family", "variant", "model", "seed", "mse", "mse_x10", "epochs",
               "cnp_update_share"]
    write_csv(run_dir / "per_seed.csv", rows, columns)
    agg = aggregate(rows, ["spec_hash", "family", "variant", "model"])
    for a in agg:
        a["mse_x10_mean"], a["mse_x10_std"] = 10.0 * a["mse_mean"], 10.0 * a["mse_std"]
    write_csv(run_dir / "aggregate.csv", agg,
              ["spec_hash", "family", "variant", "model", "n_seeds", "mse_mean", "mse_std", "mse_x10_mean",
               "mse_x10_std"])
    manifest["metrics"] = agg
    manifest["status"] = "failed" if manifest["failures"] else "ok"
    mpath = _write_manifest(run_dir / "manifest.json", manifest)
    if manifest["failures"]:
        raise ExperimentFailed(f"{len(manifest['failures'])} seed(s) failed; see {mpath}", mpath)
    return ExperimentResult(run_dir, h, rows, agg, manifest, models)


def run_beta_sweep(spec: ExperimentSpec, betas, stage1_models: dict | None = None) -> ExperimentResult:
    """One stage-2 run per (beta, seed), all sharing the seed's stage-1 model.

    ``stage1_models`` may map seed to an already trained baseline (with its
    splits) to skip stage 1.
    """
    betas = [float(b) for b in betas]
    if not spec.adversarial:
        raise ConfigError("a beta sweep needs adversarial training enabled")
    for b in betas:
        if not 0.0 <= b <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {b}")
    h = spec.spec_hash()
    run_dir = new_run_dir(spec.out_dir, spec.experiment_id + "-beta", h)
    manifest = {"spec": spec.to_dict(), "spec_hash": h, "code_version": __version__, "betas": betas,
                "failures": [], "status": "running"}
    rows = []
    for seed in spec.seeds:
        try:
            if stage1_models and seed in stage1_models:
                splits, base = stage1_models[seed].splits, stage1_models[seed].baseline
            else:
                splits = spec.splits(seed)
                base = build_model(spec.model_config(), seed)
                train_stage1(base, splits, spec.train_config(seed))
            for beta in betas:
                cfg = spec.train_config(seed, beta=beta)
                model = copy.deepcopy(base)
                r2 = train_stage2(model, splits, cfg)
                mse = evaluate_mse(model, splits.test, cfg.frac_hi, seed=seed)
                rows.append({"spec_hash": h, "family": spec.family, "variant": spec.variant, "beta": beta,
                             "seed": seed, "mse": mse, "mse_x10": 10.0 * mse,
                             "epochs": len(r2.val_history)})
        except Exception as exc:
            manifest["failures"].append({"seed": seed, "error": f"{type(exc).__name__}: {exc}"})
    write_csv(run_dir / "beta_per_seed.csv", rows,
              ["spec_hash", "family", "variant", "beta", "seed", "mse", "mse_x10", "epochs"])
    agg = aggregate(rows, ["spec_hash", "family", "variant", "beta"])
    write_csv(run_dir / "beta_aggregate.csv", agg,
              ["spec_hash", "family", "variant", "beta", "n_seeds", "mse_mean", "mse_std"])
    manifest["metrics"] = agg
    manifest["status"] = "failed" if manifest["failures"] else "ok"
    mpath = _write_manifest(run_dir / "manifest.json", manifest)
    if manifest["failures"]:
        raise ExperimentFailed(f"{len(manifest['failures'])} seed(s) failed; see {mpath}", mpath)
    return ExperimentResult(run_dir, h, rows, agg, manifest)


@dataclass
class OverheadReport:
    stage1_times: list
    stage2_times: list

    @property
    def stage1_median(self) -> float:
        return statistics.median(self.stage1_times)

    @property
    def stage2_median(self) -> float:
        return statistics.median(self.stage2_times)

    @property
    def ratio(self) -> float:
        return self.stage2_median / self.stage1_median

    def rows(self, spec_hash: str = "") -> list[dict]:
        return [
            {"spec_hash": spec_hash, "model": "baseline", "median_epoch_seconds": self.stage1_median,
             "relative": 1.0, "epochs": len(self.stage1_times)},
            {"spec_hash": spec_hash, "model": "adversarial", "median_epoch_seconds": self.stage2_median,
             "relative": self.ratio, "epochs": len(self.stage2_times)},
        ]


def run_overhead_bench(spec: ExperimentSpec, epochs: int = 5, seed: int | None = None,
                       write: bool = True) -> OverheadReport:
    """Median per-epoch training time of stage 1 versus stage 2 on the same data.

    Stage 2 starts from the stage-1 parameters just timed. Validation passes
    are excluded from both timings.
    """
    if epochs < 5:
        raise ConfigError("the overhead bench needs at least 5 epochs per stage")
    seed = spec.seeds[0] if seed is None else seed
    splits = spec.splits(seed)
    cfg = spec.train_config(seed, epochs_stage1=epochs, epochs_stage2=epochs, patience=epochs + 1)
    model = build_model(spec.model_config(), seed)
    t1 = Trainer(model, splits, cfg, stage=1).run()
    t2 = Trainer(model, splits, cfg, stage=2).run()
    report = OverheadReport([r.train_time for r in t1.val_history], [r.train_time for r in t2.val_history])
    if write:
        h = spec.spec_hash()
        run_dir = new_run_dir(spec.out_dir, spec.experiment_id + "-bench", h)
        write_csv(run_dir / "overhead.csv", report.rows(h))
        _write_manifest(run_dir / "manifest.json", {"spec": spec.to_dict(), "spec_hash": h,
                                                    "stage1_times": report.stage1_times,
                                                    "stage2_times": report.stage2_times, "ratio": report.ratio})
    return report


def downstream_rows(models: dict, head: HeadConfig, fractions=FRACTION_GRID, label_variant: str = "CNP") -> list[dict]:
    """Fraction sweeps for the baseline and calibrated model of each seed."""
    rows = []
    for seed, sm in models.items():
        for label, model in ((model_label(label_variant, False), sm.baseline),
                             (model_label(label_variant, True), sm.adversarial)):
            if model is None:
                continue
            cfg = dataclasses.replace(head, seed=seed)
            for r in fraction_sweep(model, sm.splits.train, sm.splits.test, cfg, fractions):
                rows.append({"model": label, **r, "mse": r["metric"]})
    return rows


# -- gradient check -------------------------------------------------------
GRADCHECK_REL_FLOOR = 1e-3


def gradcheck_report(seed: int = 0, eps: float = 1e-6, rel_floor: float = GRADCHECK_REL_FLOOR) -> list[dict]:
    """Analytic versus central-difference gradients for the three training losses.

    Each check uses a seeded 2-function, 5-point episode; fakes are drawn in
    mean mode so the losses are deterministic functions of the parameters.
    Entries below ``rel_floor`` of the largest gradient are compared on an
    absolute scale (see ``diffcore.grad_check``).
    """
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(-1, 1, (2, 5, 1)), axis=1)
    y = np.sin(3 * x) + 0.1 * rng.standard_normal((2, 5, 1))
    from .datasets import EpisodeBatch
    ep = EpisodeBatch(x_context=x[:, :3], y_context=y[:, :3], x_target=x, y_target=y,
                      context_idx=np.tile(np.arange(3), (2, 1)), target_idx=np.tile(np.arange(5), (2, 1)),
                      instance_ids=np.arange(2), context_fraction=0.6)
    small = dict(d_r=8, encoder_hidden=(8,), decoder_hidden=(8,), projector_hidden=8, projector_out=4)
    rows = []

    cnp = build_model(ModelConfig.for_family("sine", "CNP", **small), seed)
    rows.append({"loss": "mle_loss",
                 "max_rel_error": dc.grad_check(lambda: mle_loss(cnp, ep), cnp.parameters(), eps=eps,
                                                rel_floor=rel_floor)})

    ebm = EnergyModel(1, 8, np.random.default_rng(seed + 1))

    def nce():
        dist = cnp.predict(ep)
        fake = sample_predictions(dist, mode="mean")
        return nce_terms(ebm.log_prob(y), log_prob(dist, y), ebm.log_prob(fake), log_prob(dist, fake), 2).value

    rows.append({"loss": "nce_objective",
                 "max_rel_error": dc.grad_check(nce, {**cnp.parameters(), **ebm.parameters()}, eps=eps,
                                                rel_floor=rel_floor)})

    ccnp = build_model(ModelConfig.for_family("sine", "CCNP", **small), seed)
    state = np.random.default_rng(seed + 2).bit_generator.state

    def contrastive():
        split_rng = np.random.default_rng()
        split_rng.bit_generator.state = state
        return ccnp_contrastive_loss(ccnp, ep, split_rng)

    rows.append({"loss": "ccnp_contrastive_loss",
                 "max_rel_error": dc.grad_check(contrastive, ccnp.parameters(), eps=eps,
                                                rel_floor=rel_floor)})
    return rows
