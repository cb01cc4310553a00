import csv
import subprocess
import sys

import pytest

from advcnp.cli import build_parser, main, resolve_spec

TINY = ["--override", "n_train=24", "--override", "n_val=8", "--override", "n_test=8", "--override", "n_points=20",
        "--override", "epochs_stage1=2", "--override", "epochs_stage2=2", "--override", "batch_size=8",
        "--override", "fake_mode=mean", "--override", "noise_ratio=2", "--seed", "0"]


def run_dirs(root, suffix=""):
    return sorted(p for p in root.iterdir() if p.is_dir() and (not suffix or suffix in p.name))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert main(["train", "--out", str(out), *TINY]) == 0
    (run,) = run_dirs(out)
    return out, run


class TestResolve:
    def test_precedence(self, tmp_path):
        cfg = tmp_path / "a.cfg"
        cfg.write_text("family = oscillator\nbeta = 0.3\nseeds = 0,1,2\n", encoding="utf-8")
        args = build_parser().parse_args(["train", "--config", str(cfg), "--override", "beta=0.5",
                                          "--seed", "7", "--out", "elsewhere"])
        spec = resolve_spec(args)
        assert (spec.family, spec.train.beta, spec.seeds, spec.out_dir) == ("oscillator", 0.5, (7,), "elsewhere")

    def test_global_flags_before_command(self):
        spec = resolve_spec(build_parser().parse_args(["--seed", "4", "gradcheck"]))
        assert spec.seeds == (4,)

    def test_shipped_presets_parse(self):
        from pathlib import Path
        root = Path(__file__).resolve().parent.parent / "configs"
        for cfg in sorted(root.glob("*.cfg")):
            spec = resolve_spec(build_parser().parse_args(["train", "--config", str(cfg)]))
            assert spec.train.fake_mode == "mean" and spec.train.noise_ratio == spec.train.batch_size


class TestExitCodes:
    @pytest.mark.parametrize("argv", [["train", "--override", "bogus=1"], ["train", "--override", "beta"],
                                      ["train", "--override", "beta=2"], ["train", "--config", "/no/such.cfg"],
                                      ["bench", "--epochs", "2"]])
    def test_config_errors(self, argv, tmp_path, capsys):
        assert main([*argv, "--out", str(tmp_path)]) == 2
        assert "configuration error" in capsys.readouterr().err

    def test_bad_config_line(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("family sine\n", encoding="utf-8")
        assert main(["train", "--config", str(cfg)]) == 2

    def test_run_failure(self, tmp_path, capsys):
        assert main(["eval", str(tmp_path / "missing.json"), "--out", str(tmp_path), *TINY]) == 1
        assert "error" in capsys.readouterr().err

    def test_gradcheck(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.count("PASS") == 3
        assert main(["gradcheck", "--tol", "1e-300"]) == 1

    def test_argparse_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["no-such-command"])
        assert info.value.code == 2


class TestCommands:
    def test_train_outputs(self, trained):
        _, run = trained
        rows = read_csv(run / "per_seed.csv")
        assert [r["model"] for r in rows] == ["CNP", "CNP-adv"]

    def test_eval(self, trained, tmp_path):
        _, run = trained
        ck = run / "seed0" / "adversarial.params.json"
        assert main(["eval", str(ck), "--out", str(tmp_path), *TINY]) == 0
        (d,) = run_dirs(tmp_path, "-eval")
        rows = read_csv(d / "eval.csv")
        stored = {r["model"]: float(r["mse"]) for r in read_csv(run / "per_seed.csv")}
        assert float(rows[0]["mse"]) == pytest.approx(stored["CNP-adv"], rel=1e-12)

    def test_downstream(self, trained, tmp_path):
        _, run = trained
        ck = run / "seed0" / "baseline.params.json"
        argv = ["downstream", str(ck), "--task", "shift", "--fractions", "0.2,0.6", "--head-seeds", "0,1",
                "--out", str(tmp_path), *TINY]
        assert main(argv) == 0
        (d,) = run_dirs(tmp_path, "-downstream")
        rows = read_csv(d / "downstream.csv")
        assert list(rows[0]) == ["spec_hash", "task", "fraction", "seed", "mse"]
        assert [(r["fraction"], r["seed"]) for r in rows] == [("0.2", "0"), ("0.6", "0"), ("0.2", "1"),
                                                              ("0.6", "1")]
        summary = read_csv(d / "downstream_summary.csv")
        assert [s["fraction"] for s in summary] == ["0.2", "0.6"] and {s["n_seeds"] for s in summary} == {"2"}
        mses = [float(r["mse"]) for r in rows if r["fraction"] == "0.2"]
        assert float(summary[0]["mse_mean"]) == pytest.approx(sum(mses) / 2, rel=1e-12)

    def test_generate_data(self, tmp_path):
        assert main(["generate-data", "--out", str(tmp_path), *TINY]) == 0
        (d,) = run_dirs(tmp_path, "-data")
        assert sorted(p.name for p in d.iterdir()) == ["sine_seed0_test.json", "sine_seed0_train.json",
                                                       "sine_seed0_validation.json"]

    def test_beta_sweep_and_bench(self, tmp_path, capsys):
        assert main(["beta-sweep", "--betas", "0.1,1.0", "--out", str(tmp_path), *TINY]) == 0
        assert "beta 1.00" in capsys.readouterr().out
        assert main(["bench", "--epochs", "5", "--out", str(tmp_path), *TINY]) == 0
        assert "relative overhead" in capsys.readouterr().out

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "advcnp", "gradcheck", "--seed", "1"], capture_output=True,
                             text=True, timeout=300)
        assert res.returncode == 0, res.stderr
        assert "ccnp_contrastive_loss" in res.stdout
