"""Synthetic 1D function families, normalization, and context/target episodes."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

FAMILIES = ("sine", "oscillator", "gp-rbf")
DATASET_FORMAT = "advcnp-dataset"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class FunctionInstance:
    """One sampled function on a grid of ``N`` covariates.

    ``x`` has shape ``(N, d_x)`` and ``y`` shape ``(N, d_y)``. ``x_raw`` keeps
    the covariates before rescaling to [-1, 1] for families defined on
    another interval.
    """

    x: np.ndarray
    y: np.ndarray
    gen_params: dict = field(default_factory=dict)
    label: int | None = None
    x_raw: np.ndarray | None = None

    @property
    def n_points(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class NormStats:
    y_mean: np.ndarray
    y_std: np.ndarray
    zero_variance: tuple = ()

    def to_dict(self) -> dict:
        return {"y_mean": self.y_mean.tolist(), "y_std": self.y_std.tolist(),
                "zero_variance": list(self.zero_variance)}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(np.array(d["y_mean"], dtype=np.float64), np.array(d["y_std"], dtype=np.float64),
                   tuple(d.get("zero_variance", ())))


@dataclass(frozen=True)
class MetaDataset:
    instances: tuple
    split: str = "train"
    family: str = ""
    stats: NormStats | None = None

    def __post_init__(self):
        if self.split not in ("train", "validation", "test"):
            raise DatasetError(f"unknown split {self.split!r}")
        object.__setattr__(self, "instances", tuple(self.instances))

    def __len__(self) -> int:
        return len(self.instances)

    def __getitem__(self, i) -> FunctionInstance:
        return self.instances[i]

    @property
    def x(self) -> np.ndarray:
        """Stacked covariates ``(n_funcs, N, d_x)``; requires a shared grid size."""
        return np.stack([f.x for f in self.instances])

    @property
    def y(self) -> np.ndarray:
        return np.stack([f.y for f in self.instances])

    def params(self, key: str) -> np.ndarray:
        try:
            return np.array([f.gen_params[key] for f in self.instances], dtype=np.float64)
        except KeyError as exc:
            raise DatasetError(f"instances carry no generative parameter {key!r}") from exc

    def labels(self) -> np.ndarray:
        if any(f.label is None for f in self.instances):
            raise DatasetError("dataset has unlabeled instances")
        return np.array([f.label for f in self.instances], dtype=np.int64)


def rescale_unit(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Affinely map ``[lo, hi]`` onto ``[-1, 1]``."""
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def _closed_form(family: str, n_funcs: int, n_points: int, seed: int, split: str) -> MetaDataset:
    if n_funcs < 1 or n_points < 2:
        raise DatasetError(f"need n_funcs >= 1 and n_points >= 2, got {n_funcs}, {n_points}")
    rng = np.random.default_rng(seed)
    if family == "sine":
        lo, hi = -3.0 * math.pi, 3.0 * math.pi
        a = rng.uniform(-1.0, 1.0, n_funcs)
        b = rng.uniform(-0.5, 0.5, n_funcs)
    else:
        lo, hi = 0.0, 5.0
        a = rng.uniform(-3.0, 3.0, n_funcs)
        b = rng.uniform(-1.0, 1.0, n_funcs)
    x_raw = np.linspace(lo, hi, n_points)
    x = rescale_unit(x_raw, lo, hi)[:, None]
    f = sine if family == "sine" else oscillator
    instances = [
        FunctionInstance(x=x, y=f(x_raw, a[i], b[i])[:, None],
                         gen_params={"a": float(a[i]), "b": float(b[i])}, x_raw=x_raw[:, None])
        for i in range(n_funcs)
    ]
    return MetaDataset(instances, split=split, family=family)


def sine(x, a, b):
    return a * np.sin(x - b)


def oscillator(x, a, b):
    return a * np.exp(-0.5 * x) * np.sin(x - b)


def gen_sine(n_funcs: int, n_points: int, seed: int, split: str = "train") -> MetaDataset:
    """``y = a sin(x - b)`` on ``[-3pi, 3pi]`` with ``a ~ U[-1, 1]``, ``b ~ U[-0.5, 0.5]``."""
    return _closed_form("sine", n_funcs, n_points, seed, split)


def gen_oscillator(n_funcs: int, n_points: int, seed: int, split: str = "train") -> MetaDataset:
    """``y = a exp(-x/2) sin(x - b)`` on ``[0, 5]`` with ``a ~ U[-3, 3]``, ``b ~ U[-1, 1]``."""
    return _closed_form("oscillator", n_funcs, n_points, seed, split)


def rbf_kernel(x, x2, sigma: float = 0.2):
    """``exp(-|x - x'|^2 / (2 sigma^2))``, broadcasting over array inputs."""
    if sigma <= 0:
        raise DatasetError(f"sigma must be positive, got {sigma}")
    d = np.asarray(x, dtype=np.float64) - np.asarray(x2, dtype=np.float64)
    return np.exp(-(d * d) / (2.0 * sigma * sigma))


def jittered_cholesky(K: np.ndarray, jitter: float = 1e-6, max_jitter: float = 1e-2) -> tuple[np.ndarray, float]:
    """Lower factor of ``K + jitter I``, escalating jitter x10 on failure."""
    eye = np.eye(K.shape[0])
    while jitter <= max_jitter * (1 + 1e-9):
        try:
            return np.linalg.cholesky(K + jitter * eye), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise DatasetError(f"kernel matrix not factorizable with jitter up to {max_jitter}")


def gen_gp_rbf(n_funcs: int, n_points: int = 128, sigma: float = 0.2, seed: int = 0,
               split: str = "train") -> MetaDataset:
    """Draws from a zero-mean GP with RBF kernel on a uniform grid over [-1, 1]."""
    if n_funcs < 1 or n_points < 2:
        raise DatasetError(f"need n_funcs >= 1 and n_points >= 2, got {n_funcs}, {n_points}")
    rng = np.random.default_rng(seed)
    grid = np.linspace(-1.0, 1.0, n_points)
    K = rbf_kernel(grid[:, None], grid[None, :], sigma)
    L, jitter = jittered_cholesky(K)
    z = rng.standard_normal((n_points, n_funcs))
    ys = (L @ z).T
    x = grid[:, None]
    instances = [FunctionInstance(x=x, y=ys[i][:, None], gen_params={"sigma": sigma, "jitter": jitter})
                 for i in range(n_funcs)]
    return MetaDataset(instances, split=split, family="gp-rbf")


def generate(family: str, n_funcs: int, n_points: int, seed: int, split: str = "train",
             sigma: float = 0.2) -> MetaDataset:
    if family == "sine":
        return gen_sine(n_funcs, n_points, seed, split)
    if family == "oscillator":
        return gen_oscillator(n_funcs, n_points, seed, split)
    if family == "gp-rbf":
        return gen_gp_rbf(n_funcs, n_points, sigma, seed, split)
    raise DatasetError(f"unknown family {family!r}; expected one of {FAMILIES}")


def compute_stats(dataset: MetaDataset) -> NormStats:
    y = np.concatenate([f.y for f in dataset.instances], axis=0)
    mean = y.mean(axis=0)
    std = y.std(axis=0)
    zero = tuple(int(i) for i in np.flatnonzero(std == 0.0))
    if zero:
        warnings.warn(f"zero-variance observation features {list(zero)}; using std=1", RuntimeWarning)
        std = np.where(std == 0.0, 1.0, std)
    return NormStats(mean, std, zero)


def normalize(dataset: MetaDataset, stats: NormStats | None = None) -> MetaDataset:
    """Map covariates onto [-1, 1] and z-score observations.

    ``stats`` must come from the train split; when omitted they are computed
    from ``dataset`` itself, which is only valid when it is the train split.
    """
    if len(dataset) == 0:
        raise DatasetError("cannot normalize an empty dataset")
    if stats is None:
        if dataset.split != "train":
            raise DatasetError("normalization statistics must come from the train split")
        stats = compute_stats(dataset)
    out = []
    for f in dataset.instances:
        lo, hi = f.x.min(axis=0), f.x.max(axis=0)
        span = np.where(hi > lo, hi - lo, 1.0)
        x = 2.0 * (f.x - lo) / span - 1.0
        y = (f.y - stats.y_mean) / stats.y_std
        out.append(replace(f, x=x, y=y, x_raw=f.x_raw if f.x_raw is not None else f.x))
    return replace(dataset, instances=tuple(out), stats=stats)


def denormalize_y(y: np.ndarray, stats: NormStats) -> np.ndarray:
    return y * stats.y_std + stats.y_mean


# -- episodes -------------------------------------------------------------
@dataclass(frozen=True)
class EpisodeBatch:
    """``K`` instances split into context and target points.

    Arrays are stacked as ``(K, C, d)`` for the context and ``(K, T, d)``
    for the target; ``context_idx`` indexes into each instance's grid.
    """

    x_context: np.ndarray
    y_context: np.ndarray
    x_target: np.ndarray
    y_target: np.ndarray
    context_idx: np.ndarray
    target_idx: np.ndarray
    instance_ids: np.ndarray
    context_fraction: float

    @property
    def K(self) -> int:
        return self.x_target.shape[0]

    @property
    def n_context(self) -> int:
        return self.x_context.shape[1]

    @property
    def n_target(self) -> int:
        return self.x_target.shape[1]


def context_size(fraction: float, n_points: int) -> int:
    # the tolerance keeps e.g. 0.29 * 100 from flooring to 28
    return max(1, int(math.floor(fraction * n_points + 1e-9)))


def make_episode(dataset: MetaDataset, K: int, frac_range, rng: np.random.Generator,
                 instance_ids=None, evaluation: bool = False) -> EpisodeBatch:
    """Sample one batch: a shared context fraction, per-instance random contexts.

    In evaluation mode the fraction is pinned to the upper end of ``frac_range``.
    The target set is every point of each instance.
    """
    lo, hi = frac_range
    if not 0.0 < lo <= hi <= 1.0:
        raise DatasetError(f"context fraction range must satisfy 0 < lo <= hi <= 1, got {frac_range}")
    if instance_ids is None:
        if K > len(dataset):
            raise DatasetError(f"batch size {K} exceeds dataset size {len(dataset)}")
        instance_ids = rng.choice(len(dataset), size=K, replace=False)
    instance_ids = np.asarray(instance_ids, dtype=np.int64)
    fraction = hi if evaluation or lo == hi else float(rng.uniform(lo, hi))
    x = np.stack([dataset.instances[i].x for i in instance_ids])
    y = np.stack([dataset.instances[i].y for i in instance_ids])
    n = x.shape[1]
    c = context_size(fraction, n)
    ctx = np.stack([rng.choice(n, size=c, replace=False) for _ in instance_ids])
    rows = np.arange(len(instance_ids))[:, None]
    return EpisodeBatch(
        x_context=x[rows, ctx], y_context=y[rows, ctx], x_target=x, y_target=y,
        context_idx=ctx, target_idx=np.broadcast_to(np.arange(n), (len(instance_ids), n)).copy(),
        instance_ids=instance_ids, context_fraction=fraction,
    )


def iterate_batches(n: int, K: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled instance-id batches covering ``range(n)`` once.

    A trailing batch of a single instance is folded into the previous one so
    every batch offers negatives for batch-level contrastive terms.
    """
    order = rng.permutation(n)
    batches = [order[i:i + K] for i in range(0, n, K)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        last = batches.pop()
        batches[-1] = np.concatenate([batches[-1], last])
    return batches


def fixed_episodes(dataset: MetaDataset, K: int, fraction: float, seed: int) -> list[EpisodeBatch]:
    """Deterministic evaluation episodes over the whole dataset in order."""
    rng = np.random.default_rng(seed)
    ids = np.arange(len(dataset))
    return [make_episode(dataset, K, (fraction, fraction), rng, instance_ids=ids[i:i + K], evaluation=True)
            for i in range(0, len(dataset), K)]


# -- file format ----------------------------------------------------------
def save_dataset(dataset: MetaDataset, path) -> None:
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "family": dataset.family,
        "split": dataset.split,
        "stats": dataset.stats.to_dict() if dataset.stats is not None else None,
        "instances": [
            {"x": f.x.tolist(), "y": f.y.tolist(), "gen_params": f.gen_params, "label": f.label,
             "x_raw": f.x_raw.tolist() if f.x_raw is not None else None}
            for f in dataset.instances
        ],
    }
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_dataset(path) -> MetaDataset:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"corrupt dataset file {path}: {exc}") from exc
    if doc.get("format") != DATASET_FORMAT or doc.get("version") != DATASET_VERSION:
        raise DatasetError(f"{path} is not a version-{DATASET_VERSION} dataset file")
    instances = [
        FunctionInstance(x=np.array(d["x"], dtype=np.float64), y=np.array(d["y"], dtype=np.float64),
                         gen_params=d["gen_params"], label=d["label"],
                         x_raw=None if d["x_raw"] is None else np.array(d["x_raw"], dtype=np.float64))
        for d in doc["instances"]
    ]
    stats = NormStats.from_dict(doc["stats"]) if doc["stats"] else None
    return MetaDataset(instances, split=doc["split"], family=doc["family"], stats=stats)


@dataclass(frozen=True)
class Splits:
    train: MetaDataset
    validation: MetaDataset
    test: MetaDataset


def make_splits(family: str, n_train: int, n_val: int, n_test: int, n_points: int, seed: int,
                sigma: float = 0.2, zscore: bool = True) -> Splits:
    """Generate disjoint train/validation/test sets from independent child seeds.

    With ``zscore`` each split is normalized with the train statistics.
    """
    s_train, s_val, s_test = np.random.SeedSequence(seed).spawn(3)
    as_int = lambda s: int(s.generate_state(1)[0])  # noqa: E731
    train = generate(family, n_train, n_points, as_int(s_train), "train", sigma)
    val = generate(family, n_val, n_points, as_int(s_val), "validation", sigma)
    test = generate(family, n_test, n_points, as_int(s_test), "test", sigma)
    if zscore:
        train = normalize(train)
        val = normalize(val, train.stats)
        test = normalize(test, train.stats)
    return Splits(train, val, test)
