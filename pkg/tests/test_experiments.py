import copy
import csv
import dataclasses
import json

import numpy as np
import pytest

from advcnp.experiments import (DEFAULT_SIZES, ExperimentFailed, ExperimentSpec, OverheadReport, aggregate,
                                downstream_rows, gradcheck_report, mean_std, new_run_dir, run_beta_sweep,
                                run_experiment, run_overhead_bench)
from advcnp.datasets import make_splits
from advcnp.downstream import HeadConfig
from advcnp.models import ModelConfig, build_model
from advcnp.training import ConfigError, TrainConfig, evaluate_mse, load_model, train_stage1, train_stage2

TINY = dict(n_train=24, n_val=8, n_test=8, n_points=20, seeds=(0, 1))
TINY_TRAIN = dict(epochs_stage1=2, epochs_stage2=2, batch_size=8, fake_mode="mean", noise_ratio=2)


def tiny_spec(tmp_path, **kw):
    train = {**TINY_TRAIN, **kw.pop("train", {})}
    return ExperimentSpec.for_family(kw.pop("family", "sine"), kw.pop("variant", "CNP"), train=train,
                                     out_dir=str(tmp_path), **{**TINY, **kw})


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def result(tmp_path_factory):
    return run_experiment(tiny_spec(tmp_path_factory.mktemp("runs")), keep_models=True)


class TestSpec:
    def test_hash_ignores_output_directory(self, tmp_path):
        a = tiny_spec(tmp_path / "a")
        b = tiny_spec(tmp_path / "b")
        assert a.spec_hash() == b.spec_hash()
        assert tiny_spec(tmp_path, train={"beta": 0.3}).spec_hash() != a.spec_hash()

    def test_family_defaults(self):
        gp = ExperimentSpec.for_family("gp-rbf")
        assert gp.sizes == DEFAULT_SIZES["gp-rbf"]
        assert gp.train.batch_size == 128
        assert ExperimentSpec.for_family("gp-rbf", paper_scale=True).sizes[0] == 4096

    def test_from_flat(self):
        s = ExperimentSpec.from_flat({"family": "oscillator", "seeds": "3,4", "beta": "0.5", "model.d_r": "32",
                                      "adversarial": "no"})
        assert s.family == "oscillator" and s.seeds == (3, 4) and s.train.beta == 0.5
        assert s.model == {"d_r": 32} and s.adversarial is False
        gp = ExperimentSpec.from_flat({"family": "gp-rbf"})
        assert gp.train.batch_size == TrainConfig.for_family("gp-rbf").batch_size

    @pytest.mark.parametrize("bad", [{"nope": "1"}, {"model.nope": "1"}, {"family": "cosine"},
                                     {"adversarial": "maybe"}, {"n_train": "ten"}, {"beta": "x"}])
    def test_from_flat_errors(self, bad):
        with pytest.raises(ConfigError):
            ExperimentSpec.from_flat(bad)


class TestRunExperiment:
    def test_outputs(self, result):
        d = result.run_dir
        for name in ("per_seed.csv", "aggregate.csv", "manifest.json", "seed0/stage1_epochs.csv",
                     "seed1/stage2_batches.csv", "seed0/baseline.params.json"):
            assert (d / name).exists(), name
        rows = read_csv(d / "per_seed.csv")
        assert list(rows[0])[0] == "spec_hash"
        assert {r["spec_hash"] for r in rows} == {result.spec_hash}
        assert [(r["model"], r["seed"]) for r in rows] == [("CNP", "0"), ("CNP-adv", "0"), ("CNP", "1"),
                                                           ("CNP-adv", "1")]
        for name in ("seed0/stage1_epochs.csv", "seed1/stage2_batches.csv"):
            assert {r["spec_hash"] for r in read_csv(d / name)} == {result.spec_hash}
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["status"] == "ok" and manifest["spec_hash"] == result.spec_hash

    def test_aggregate_recomputes(self, result):
        rows = read_csv(result.run_dir / "per_seed.csv")
        agg = {r["model"]: r for r in read_csv(result.run_dir / "aggregate.csv")}
        for model in ("CNP", "CNP-adv"):
            vals = [float(r["mse"]) for r in rows if r["model"] == model]
            assert float(agg[model]["mse_mean"]) == pytest.approx(np.mean(vals), rel=1e-12)
            assert float(agg[model]["mse_std"]) == pytest.approx(np.std(vals, ddof=1), rel=1e-12)
            assert float(agg[model]["mse_x10_mean"]) == pytest.approx(10 * np.mean(vals), rel=1e-12)
            assert agg[model]["n_seeds"] == "2"

    def test_saved_models_reload(self, result):
        m = load_model(result.run_dir / "seed0" / "adversarial.params.json")
        ref = result.models[0].adversarial.parameters()
        for k, p in m.parameters().items():
            np.testing.assert_array_equal(p.data, ref[k].data)

    def test_rerun_never_overwrites_and_reproduces(self, result, tmp_path):
        spec = ExperimentSpec(**{**result.manifest["spec"], "out_dir": str(result.run_dir.parent)})
        again = run_experiment(spec)
        assert again.run_dir != result.run_dir
        assert again.run_dir.name.endswith("-r002")
        assert again.spec_hash == result.spec_hash
        for name in ("per_seed.csv", "aggregate.csv"):
            assert (again.run_dir / name).read_bytes() == (result.run_dir / name).read_bytes()

    def test_failed_seed_is_recorded(self, tmp_path):
        # 4% of 20 points leaves a single context point, too few to split into two views
        spec = tiny_spec(tmp_path, seeds=(0,), variant="CCNP", train={"frac_lo": 0.04, "frac_hi": 0.04})
        with pytest.raises(ExperimentFailed) as info:
            run_experiment(spec)
        manifest = json.loads(info.value.manifest_path.read_text())
        assert manifest["status"] == "failed" and manifest["failures"][0]["seed"] == 0

    def test_baseline_only(self, tmp_path):
        r = run_experiment(tiny_spec(tmp_path, seeds=(0,), adversarial=False))
        assert [row["model"] for row in r.rows] == ["CNP"]


class TestHelpers:
    def test_run_dirs_are_unique(self, tmp_path):
        a = new_run_dir(tmp_path, "x", "h")
        b = new_run_dir(tmp_path, "x", "h")
        assert a.name == "x-h-r001" and b.name == "x-h-r002"

    def test_mean_std(self):
        assert mean_std([2.0]) == (2.0, 0.0)
        m, s = mean_std([1.0, 2.0, 4.0])
        assert m == pytest.approx(7 / 3) and s == pytest.approx(np.std([1, 2, 4], ddof=1))

    def test_aggregate_groups(self):
        rows = [{"k": "a", "mse": 1.0}, {"k": "b", "mse": 3.0}, {"k": "a", "mse": 2.0}]
        out = {r["k"]: r for r in aggregate(rows, ["k"])}
        assert out["a"]["mse_mean"] == 1.5 and out["a"]["n_seeds"] == 2 and out["b"]["mse_std"] == 0.0

    def test_overhead_report(self):
        rep = OverheadReport([1.0, 3.0, 2.0], [2.0, 6.0, 5.0])
        assert rep.ratio == 2.5
        assert [r["relative"] for r in rep.rows()] == [1.0, 2.5]
        same = OverheadReport([0.3, 0.1, 0.2], [0.3, 0.1, 0.2])
        assert same.ratio == 1.0


class TestOtherRuns:
    def test_beta_sweep_shares_stage1(self, result, tmp_path):
        spec = ExperimentSpec(**{**result.manifest["spec"], "out_dir": str(tmp_path)})
        r = run_beta_sweep(spec, [0.1, 1.0], stage1_models=result.models)
        assert sorted((row["beta"], row["seed"]) for row in r.rows) == [(0.1, 0), (0.1, 1), (1.0, 0), (1.0, 1)]
        assert read_csv(r.run_dir / "beta_aggregate.csv")[0]["spec_hash"] == r.spec_hash
        with pytest.raises(ConfigError):
            run_beta_sweep(spec, [1.5])

    def test_overhead_bench(self, tmp_path):
        rep = run_overhead_bench(tiny_spec(tmp_path, seeds=(0,)), epochs=5)
        assert len(rep.stage1_times) == len(rep.stage2_times) == 5
        assert rep.ratio > 0
        with pytest.raises(ConfigError):
            run_overhead_bench(tiny_spec(tmp_path), epochs=2)

    def test_downstream_rows(self, result):
        rows = downstream_rows({0: result.models[0]}, HeadConfig(hidden=8, epochs=1), fractions=(0.2, 0.8))
        assert [(r["model"], r["fraction"]) for r in rows] == [("CNP", 0.2), ("CNP", 0.8), ("CNP-adv", 0.2),
                                                               ("CNP-adv", 0.8)]

    def test_gradcheck_report(self):
        rows = gradcheck_report(seed=0)
        assert [r["loss"] for r in rows] == ["mle_loss", "nce_objective", "ccnp_contrastive_loss"]
        assert all(r["max_rel_error"] < 1e-4 for r in rows)


def test_beta_zero_matches_extended_likelihood_training():
    # with beta=0 and alpha near 0 stage 2 is Adam on the likelihood alone, so it should land where an
    # equally long stage-1 continuation at the stage-2 learning rate lands
    b0, ext = [], []
    for seed in range(3):
        splits = make_splits("sine", 96, 32, 64, 50, seed=seed)
        cfg = TrainConfig(epochs_stage1=8, epochs_stage2=6, fake_mode="mean", noise_ratio=16, seed=seed, beta=0.0,
                          alpha=0.01, ebm_hidden=16)
        base = build_model(ModelConfig.for_family("sine", "CNP", d_r=32, encoder_hidden=(32, 32),
                                                  decoder_hidden=(32, 32)), seed)
        train_stage1(base, splits, cfg)
        m1, m2 = copy.deepcopy(base), copy.deepcopy(base)
        r2 = train_stage2(m1, splits, cfg)
        assert np.mean([h.side == "cnp" for h in r2.history]) > 0.9
        train_stage1(m2, splits, dataclasses.replace(cfg, epochs_stage1=6, lr_stage1=cfg.lr_stage2_cnp))
        b0.append(evaluate_mse(m1, splits.test, cfg.frac_hi, seed=seed))
        ext.append(evaluate_mse(m2, splits.test, cfg.frac_hi, seed=seed))
    b0, ext = np.array(b0), np.array(ext)
    assert abs(b0.mean() - ext.mean()) <= ext.std(ddof=1) / np.sqrt(len(ext))
    np.testing.assert_allclose(b0, ext, rtol=0.01)


def test_overhead_ratio_on_sine_preset(tmp_path):
    spec = ExperimentSpec.from_flat({"fake_mode": "mean", "noise_ratio": "16", "seeds": "0", "n_train": "160",
                                     "out_dir": str(tmp_path)})
    ratios = [run_overhead_bench(spec, epochs=5, write=False).ratio for _ in range(2)]
    # EBM-side batches skip the CNP backward, so stage 2 can be cheaper than stage 1
    assert all(0.0 < r <= 2.0 for r in ratios), ratios
    assert abs(ratios[0] - ratios[1]) <= 0.2 * min(ratios), ratios
