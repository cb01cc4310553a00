import dataclasses

import numpy as np
import pytest

import advcnp.diffcore as dc
from advcnp.datasets import DatasetError, FunctionInstance, MetaDataset, make_splits
from advcnp.downstream import (FRACTION_GRID, HeadConfig, PredictionHead, dataset_reprs, eval_head, extract_repr,
                               fraction_sweep, head_targets, summarize_rows, train_head)
from advcnp.models import ModelConfig, ModelError, build_model


@pytest.fixture(scope="module")
def splits():
    return make_splits("oscillator", 64, 8, 48, 40, seed=3)


@pytest.fixture(scope="module", params=["CNP", "ACNP", "CCNP"])
def model(request):
    small = dict(d_r=16, encoder_hidden=(16,), decoder_hidden=(16,), projector_hidden=16, projector_out=8)
    return build_model(ModelConfig.for_family("oscillator", request.param, **small), seed=1)


def relabel(dataset, **params):
    """Copy of ``dataset`` with generative parameters or labels replaced per instance."""
    labels = params.pop("label", None)
    out = []
    for i, f in enumerate(dataset.instances):
        gp = {**f.gen_params, **{k: float(v[i]) for k, v in params.items()}}
        out.append(dataclasses.replace(f, gen_params=gp, label=None if labels is None else int(labels[i])))
    return MetaDataset(tuple(out), dataset.split, dataset.family, dataset.stats)


def snapshot(m):
    return {k: p.data.copy() for k, p in m.parameters().items()}


class TestExtractRepr:
    def test_deterministic(self, model, splits):
        x, y = splits.train.x[:4, :9], splits.train.y[:4, :9]
        np.testing.assert_array_equal(extract_repr(model, x, y), extract_repr(model, x, y))

    def test_permutation_invariant(self, model, splits):
        x, y = splits.train.x[:4, :9], splits.train.y[:4, :9]
        perm = np.random.default_rng(0).permutation(9)
        np.testing.assert_allclose(extract_repr(model, x[:, perm], y[:, perm]), extract_repr(model, x, y),
                                   rtol=0, atol=1e-10)

    def test_fixed_width(self, model, splits):
        r = extract_repr(model, splits.train.x[:3, :5], splits.train.y[:3, :5])
        assert r.shape == (3, model.config.d_r)

    def test_fraction_changes_repr(self, model, splits):
        a = dataset_reprs(model, splits.train, 0.2, seed=0)
        b = dataset_reprs(model, splits.train, 0.8, seed=0)
        assert a.shape == b.shape and not np.array_equal(a, b)

    def test_independent_of_targets(self, model, splits):
        # reprs of an instance depend only on its context; other points are irrelevant
        ds = splits.train
        r = dataset_reprs(model, ds, 0.2, seed=5)
        scrambled = []
        rng = np.random.default_rng(9)
        idx = np.argsort(np.random.default_rng(5).random((len(ds), ds.x.shape[1])), axis=1)[:, :8]
        for i, f in enumerate(ds.instances):
            y = rng.normal(size=f.y.shape) * 100
            y[idx[i]] = f.y[idx[i]]
            scrambled.append(dataclasses.replace(f, y=y))
        r2 = dataset_reprs(model, MetaDataset(tuple(scrambled), ds.split, ds.family, ds.stats), 0.2, seed=5)
        np.testing.assert_array_equal(r, r2)

    def test_no_graph_recorded(self, model, splits):
        params = model.parameters()
        out = extract_repr(model, splits.train.x[:2, :4], splits.train.y[:2, :4])
        assert isinstance(out, np.ndarray)
        assert all(p.grad is None for p in params.values())

    def test_empty_context(self, model):
        with pytest.raises(ModelError):
            extract_repr(model, np.zeros((2, 0, 1)), np.zeros((2, 0, 1)))


class TestTrainHead:
    cfg = HeadConfig(targets=("a",), hidden=32, epochs=5, batch_size=16)

    def test_cnp_bitwise_frozen(self, model, splits):
        before = snapshot(model)
        train_head(model, splits.train, self.cfg)
        after = snapshot(model)
        for k in before:
            np.testing.assert_array_equal(before[k], after[k])
            assert model.parameters()[k].grad is None

    def test_constant_target_fits(self, splits):
        m = build_model(ModelConfig.for_family("oscillator", "CNP", d_r=16, encoder_hidden=(16,),
                                               decoder_hidden=(16,)), seed=0)
        ds = relabel(splits.train, a=np.zeros(len(splits.train)))
        cfg = HeadConfig(targets=("a",), hidden=32, epochs=40, batch_size=16, lr=5e-3)
        head, hist = train_head(m, ds, cfg)
        assert hist.losses[-1] < 1e-4
        assert eval_head(head, m, relabel(splits.test, a=np.zeros(len(splits.test))), cfg) < 1e-4

    def test_loss_decreases_in_trend(self, splits):
        m = build_model(ModelConfig.for_family("oscillator", "CNP", d_r=16, encoder_hidden=(16,),
                                               decoder_hidden=(16,)), seed=0)
        _, hist = train_head(m, splits.train, HeadConfig(targets=("a",), hidden=32, epochs=20, batch_size=16))
        losses = np.array(hist.losses)
        assert losses[-5:].mean() < losses[:5].mean()
        assert np.polyfit(np.arange(len(losses)), losses, 1)[0] < 0

    def test_deterministic(self, model, splits):
        h1, l1 = train_head(model, splits.train, self.cfg)
        h2, l2 = train_head(model, splits.train, self.cfg)
        assert l1.losses == l2.losses
        assert eval_head(h1, model, splits.test, self.cfg) == eval_head(h2, model, splits.test, self.cfg)

    def test_missing_labels(self, model, splits):
        with pytest.raises(DatasetError):
            train_head(model, splits.train, HeadConfig(task="classification", epochs=1))
        with pytest.raises(DatasetError):
            train_head(model, splits.train, HeadConfig(targets=("nope",), epochs=1))

    def test_classification_learns_separable_labels(self, splits):
        m = build_model(ModelConfig.for_family("oscillator", "CNP", d_r=16, encoder_hidden=(16,),
                                               decoder_hidden=(16,)), seed=0)
        r = dataset_reprs(m, splits.train, 1.0, seed=0)
        labels = (r[:, 0] > np.median(r[:, 0])).astype(int)
        ds = relabel(splits.train, label=labels)
        cfg = HeadConfig(task="classification", hidden=32, epochs=200, batch_size=16, lr=5e-3, fraction=1.0)
        head, hist = train_head(m, ds, cfg)
        assert hist.losses[-1] < hist.losses[0]
        assert eval_head(head, m, ds, cfg, seed=0) >= 0.9

    def test_config_validation(self):
        for bad in (dict(task="ranking"), dict(fraction=0.0), dict(fraction=1.5), dict(epochs=0)):
            with pytest.raises(ValueError):
                HeadConfig(**bad)


class TestEvalHead:
    def test_perfect_head_has_zero_error(self, splits):
        m = build_model(ModelConfig.for_family("oscillator", "CNP", d_r=16, encoder_hidden=(16,),
                                               decoder_hidden=(16,)), seed=0)
        head = PredictionHead(16, 1, hidden=8, rng=4)
        with dc.no_grad():
            out = head(dataset_reprs(m, splits.test, 0.4, seed=7)).data[:, 0]
        ds = relabel(splits.test, a=out)
        assert eval_head(head, m, ds, HeadConfig(targets=("a",)), fraction=0.4, seed=7) == 0.0

    def test_random_head_accuracy_is_chance(self):
        # 400 unrelated binary labels; the binomial std at p=0.5 is 0.025
        rng = np.random.default_rng(0)
        x = np.linspace(-1, 1, 10)[:, None]
        inst = [FunctionInstance(x=x, y=rng.normal(size=(10, 1)), label=int(rng.integers(2))) for _ in range(400)]
        ds = MetaDataset(tuple(inst), "test", "synthetic")
        m = build_model(ModelConfig.for_family("sine", "CNP", d_r=16, encoder_hidden=(16,), decoder_hidden=(16,)),
                        seed=0)
        head = PredictionHead(16, 2, task="classification", hidden=16, rng=1)
        acc = eval_head(head, m, ds, HeadConfig(task="classification", fraction=0.5))
        assert abs(acc - 0.5) <= 0.05

    def test_head_targets_shapes(self, splits):
        t = head_targets(splits.train, HeadConfig(targets=("a", "b")))
        assert t.shape == (len(splits.train), 2)
        np.testing.assert_array_equal(t[:, 0], splits.train.params("a"))


class TestSweep:
    def test_rows_and_summary(self, splits):
        m = build_model(ModelConfig.for_family("oscillator", "CNP", d_r=16, encoder_hidden=(16,),
                                               decoder_hidden=(16,)), seed=0)
        cfg = HeadConfig(targets=("a", "b"), hidden=16, epochs=2)
        rows = fraction_sweep(m, splits.train, splits.test, cfg)
        assert [(r["fraction"], r["target"]) for r in rows] == [(f, t) for f in FRACTION_GRID for t in "ab"]
        assert all(np.isfinite(r["metric"]) and r["metric"] >= 0 for r in rows)
        joint = fraction_sweep(m, splits.train, splits.test, cfg, fractions=(0.4,), separate=False)
        assert [r["target"] for r in joint] == ["a", "b"]
        rows2 = [dict(r, seed=1, metric=r["metric"] + 1.0) for r in rows]
        summary = summarize_rows(rows + rows2)
        assert len(summary) == 8
        s = summary[0]
        np.testing.assert_allclose(s["std"], np.std([rows[0]["metric"], rows[0]["metric"] + 1], ddof=1))
        assert s["n_seeds"] == 2

    def test_bad_fraction(self, splits):
        m = build_model(ModelConfig.for_family("oscillator", "CNP"), seed=0)
        with pytest.raises(DatasetError):
            fraction_sweep(m, splits.train, splits.test, HeadConfig(epochs=1), fractions=(0.0, 0.5))
