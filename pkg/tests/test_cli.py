import csv

import numpy as np
import pytest

from hybridnn.cli import main
from hybridnn.network import save_checkpoint
from hybridnn.radar_sim import desk_params, generate_dataset, read_dataset, table1_params, write_dataset
from hybridnn.trainer import build_network


def _csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen") / "d"
    assert main(["generate", "--n", "12", "--snr", "20", "--profile", "desk", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "run"
    assert main(["train", "--variant", "hybrid", "--profile", "desk", "--data", str(data_dir),
                 "--epochs", "2", "--batch", "6", "--out", str(out)]) == 0
    return out


class TestGenerate:
    def test_stratified_file(self, tmp_path):
        assert main(["generate", "--n", "30", "--snr", "20", "--seed", "7", "--out", str(tmp_path)]) == 0
        ds = read_dataset(tmp_path / "data.hrd")
        assert len(ds) == 30 and ds.class_counts() == [10, 10, 10]
        assert ds.seed == 7 and ds.snr_db == 20.0
        manifest = (tmp_path / "manifest.txt").read_text()
        assert "n=30" in manifest and "# sha1 data.hrd:" in manifest

    def test_byte_identical_rerun(self, tmp_path, monkeypatch):
        args = ["generate", "--n", "6", "--snr", "5", "--seed", "3"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        monkeypatch.setenv("HNN_THREADS", "3")
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        for name in ("data.hrd", "data.hrd.params"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert "threads=3" in (tmp_path / "b" / "manifest.txt").read_text()

    @pytest.mark.parametrize("args", [["--n", "0"], ["--n", "x"], ["--profile", "huge", "--n", "3"],
                                      ["--threads", "0", "--n", "3"], []])
    def test_usage_errors(self, tmp_path, args, capsys):
        assert main(["generate", "--out", str(tmp_path)] + args) == 1
        assert "usage" in capsys.readouterr().err

    def test_bad_env_threads(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HNN_THREADS", "many")
        assert main(["generate", "--n", "3", "--out", str(tmp_path)]) == 1


class TestTrain:
    def test_outputs(self, run_dir):
        rows = _csv(run_dir / "metrics.csv")
        assert len(rows) == 2 * (12 // 6)
        assert list(rows[0]) == ["iteration", "epoch", "split", "loss", "accuracy", "rho_r", "rho_a",
                                 "seconds"]
        assert all(r["rho_r"] and r["rho_a"] for r in rows)
        assert all(r["seconds"] == "" for r in rows)
        assert (run_dir / "model.hnn").read_bytes()[:4] == b"HNN1"
        manifest = (run_dir / "manifest.txt").read_text()
        assert "variant=hybrid" in manifest and "# sha1 data:" in manifest

    def test_baseline_schema(self, data_dir, tmp_path):
        assert main(["train", "--variant", "baseline", "--data", str(data_dir), "--epochs", "1",
                     "--batch", "6", "--out", str(tmp_path)]) == 0
        rows = _csv(tmp_path / "metrics.csv")
        assert len(rows) == 2
        assert all(r["rho_r"] == "" and r["rho_a"] == "" for r in rows)

    def test_rerun_is_byte_identical(self, data_dir, run_dir, tmp_path):
        assert main(["train", "--variant", "hybrid", "--profile", "desk", "--data", str(data_dir),
                     "--epochs", "2", "--batch", "6", "--out", str(tmp_path)]) == 0
        for name in ("model.hnn", "metrics.csv", "epochs.csv"):
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()

    def test_truncated_dataset(self, data_dir, tmp_path, capsys):
        bad = tmp_path / "bad.hrd"
        bad.write_bytes((data_dir / "data.hrd").read_bytes()[:5000])
        out = tmp_path / "run"
        assert main(["train", "--data", str(bad), "--out", str(out)]) == 2
        assert "byte offset" in capsys.readouterr().err
        assert not (out / "model.hnn").exists()

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "r")]) == 2

    def test_config_precedence(self, data_dir, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("# comment\nepochs=3\nbatch=12\nvariant=baseline\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--epochs", "1",
                     "--out", str(tmp_path / "r")]) == 0
        rows = _csv(tmp_path / "r" / "metrics.csv")
        assert len(rows) == 1 and rows[0]["rho_r"] == ""
        manifest = (tmp_path / "r" / "manifest.txt").read_text()
        assert "epochs=1" in manifest and "batch=12" in manifest

    def test_config_errors(self, data_dir, tmp_path):
        cfg = tmp_path / "cfg.txt"
        cfg.write_text("colour=blue\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path)]) == 1
        cfg.write_text("epochs=two\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path)]) == 1
        cfg.write_text("variant=other\n")
        assert main(["train", "--config", str(cfg), "--data", str(data_dir), "--out", str(tmp_path)]) == 1

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_points_at_checkpoint(self, data_dir, tmp_path, capsys):
        out = tmp_path / "r"
        code = main(["train", "--data", str(data_dir), "--epochs", "3", "--batch", "12",
                     "--lr-main", "1e308", "--out", str(out)])
        assert code == 3
        err = capsys.readouterr().err
        assert "non-finite loss" in err and str(out / "model.hnn") in err and "epoch 1" in err

    def test_numeric_failure_in_first_epoch(self, tmp_path, capsys):
        ds = generate_dataset(4, desk_params(), 20.0, 0)
        ds.raw[0, 3, 3] = np.nan
        write_dataset(ds, tmp_path / "nan.hrd")
        assert main(["train", "--data", str(tmp_path / "nan.hrd"), "--batch", "4",
                     "--out", str(tmp_path / "r")]) == 3
        assert "no checkpoint" in capsys.readouterr().err


class TestEval:
    def test_matches_final_training_accuracy(self, run_dir, data_dir, tmp_path):
        out = tmp_path / "e.csv"
        assert main(["eval", "--model", str(run_dir / "model.hnn"), "--data", str(data_dir),
                     "--out", str(out)]) == 0
        acc = float(_csv(out)[0]["accuracy"])
        final = [r for r in _csv(run_dir / "epochs.csv") if r["split"] == "train_eval"][-1]
        assert abs(acc - float(final["accuracy"])) <= 1e-12
        assert _csv(out)[0]["n"] == "12"
        first = out.read_bytes()
        assert main(["eval", "--model", str(run_dir / "model.hnn"), "--data", str(data_dir),
                     "--out", str(out)]) == 0
        assert out.read_bytes() == first

    def test_manifest_as_config(self, run_dir, data_dir, tmp_path):
        assert main(["eval", "--config", str(run_dir / "manifest.txt"), "--model",
                     str(run_dir / "model.hnn"), "--data", str(data_dir)]) == 0

    def test_wrong_profile_checkpoint(self, data_dir, tmp_path, capsys):
        path = tmp_path / "full.hnn"
        save_checkpoint(build_network("hybrid", table1_params()), path)
        assert main(["eval", "--model", str(path), "--data", str(data_dir)]) == 2
        err = capsys.readouterr().err
        assert "expected" in err and "found" in err and "(64, 512)" in err and "(64, 32)" in err

    def test_wrong_variant(self, run_dir, data_dir, capsys):
        assert main(["eval", "--model", str(run_dir / "model.hnn"), "--data", str(data_dir),
                     "--variant", "baseline"]) == 2


class TestSweep:
    def test_default_grid(self, run_dir, tmp_path):
        assert main(["sweep-snr", "--model", str(run_dir / "model.hnn"), "--n", "3",
                     "--out", str(tmp_path)]) == 0
        rows = _csv(tmp_path / "sweep.csv")
        assert [float(r["snr_db"]) for r in rows] == list(range(-10, 41, 5))
        assert all(r["n"] == "3" for r in rows)

    def test_single_point_matches_eval(self, run_dir, tmp_path):
        assert main(["sweep-snr", "--model", str(run_dir / "model.hnn"), "--snr", "0", "--n", "6",
                     "--seed", "4", "--out", str(tmp_path / "s")]) == 0
        rows = _csv(tmp_path / "s" / "sweep.csv")
        assert len(rows) == 1
        assert main(["generate", "--n", "6", "--snr", "0", "--seed", "4", "--out", str(tmp_path / "g")]) == 0
        assert main(["eval", "--model", str(run_dir / "model.hnn"), "--data", str(tmp_path / "g"),
                     "--out", str(tmp_path / "e.csv")]) == 0
        assert rows[0]["accuracy"] == _csv(tmp_path / "e.csv")[0]["accuracy"]

    def test_fixed_seed_identical(self, run_dir, tmp_path):
        args = ["sweep-snr", "--model", str(run_dir / "model.hnn"), "--snr=-10,20", "--n", "3"]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()

    def test_missing_model(self, tmp_path):
        assert main(["sweep-snr", "--model", str(tmp_path / "none.hnn"), "--out", str(tmp_path)]) == 2
