import csv
import json
import math

import numpy as np
import pytest

from mphil import graphdata as gd
from mphil.cli import main
from mphil.model import Model
from mphil.trainer import TrainConfig, save_checkpoint, snapshot

TRAIN_FLAGS = ["--data", "--out", "--k", "--beta", "--alpha", "--tau", "--prune-n", "--epochs", "--batch", "--lr", "--seed", "--preset", "--variant"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("generate", "--task", "spmotif-binary", "--bias", 0.9, "--seed", 7, "--n-train", 40, "--n-val", 20, "--n-test", 30, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert run("train", "--data", data_dir, "--out", out, "--epochs", 2, "--k", 2, "--seed", 3) == 0
    return out


class TestUsage:
    def test_train_help_lists_flags(self, capsys):
        assert run("train", "--help") == 0
        text = capsys.readouterr().out
        for flag in TRAIN_FLAGS:
            assert flag in text

    def test_unknown_subcommand(self, capsys):
        assert run("fit") == 2
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self):
        assert run("train", "--data", "x", "--out", "y", "--layers", "3") == 2

    def test_runtime_error(self, tmp_path, capsys):
        assert run("eval", "--ckpt", tmp_path / "missing.json", "--data", tmp_path) == 1
        assert "error" in capsys.readouterr().err


class TestGenerate:
    def test_files(self, data_dir):
        for split, n in (("train", 40), ("val", 20), ("test", 30)):
            assert len(gd.load_jsonl(data_dir / f"{split}.jsonl")) == n

    def test_byte_identical(self, data_dir, tmp_path):
        run("generate", "--bias", 0.9, "--seed", 7, "--n-train", 40, "--n-val", 20, "--n-test", 30, "--out", tmp_path)
        for split in ("train", "val", "test"):
            assert (tmp_path / f"{split}.jsonl").read_bytes() == (data_dir / f"{split}.jsonl").read_bytes()


class TestTrainEval:
    def test_outputs(self, run_dir):
        lines = (run_dir / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_metric" and len(lines) == 3
        assert json.loads((run_dir / "checkpoint.json").read_text())["version"] == 1

    def test_byte_identical_rerun(self, data_dir, run_dir, tmp_path):
        assert run("train", "--data", data_dir, "--out", tmp_path, "--epochs", 2, "--k", 2, "--seed", 3) == 0
        for name in ("metrics.csv", "checkpoint.json"):
            assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes()

    def test_eval_json(self, data_dir, run_dir, capsys):
        assert run("eval", "--ckpt", run_dir / "checkpoint.json", "--data", data_dir, "--split", "test") == 0
        rep = json.loads(capsys.readouterr().out)
        assert list(rep) == ["split", "accuracy", "roc_auc", "intra_class_W1", "inter_class_W1", "per_class_counts"]
        assert rep["split"] == "test" and sum(rep["per_class_counts"].values()) == 30

    def test_eval_to_file(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "r.json"
        assert run("eval", "--ckpt", run_dir / "checkpoint.json", "--data", data_dir, "--out", out) == 0
        assert 0.0 <= json.loads(out.read_text())["accuracy"] <= 1.0

    def test_untrained_is_chance(self, tmp_path, capsys):
        n = 400
        spec = gd.DatasetSpec(n_train=2, n_val=2, n_test=n, seed=21)
        gd.save_splits(tmp_path, gd.generate(spec))
        cfg = TrainConfig(seed=4)
        rng = np.random.default_rng(cfg.seed)
        model = Model(cfg.model_config(1, 2), rng)
        save_checkpoint(tmp_path / "c.json", snapshot(model, cfg, rng, 0))
        assert run("eval", "--ckpt", tmp_path / "c.json", "--data", tmp_path) == 0
        acc = json.loads(capsys.readouterr().out)["accuracy"]
        assert abs(acc - 0.5) <= 3 * math.sqrt(0.25 / n)


class TestExports:
    def test_prototypes(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "p.csv"
        assert run("prototypes", "--ckpt", run_dir / "checkpoint.json", "--data", data_dir, "--top-m", 3, "--out", out) == 0
        rows = list(csv.DictReader(out.open()))
        assert len(rows) == 2 * 2 * 3
        assert set(rows[0]) == {"class", "prototype", "rank", "sample_id", "similarity", "label", "motif", "base"}
        for key in {(r["class"], r["prototype"]) for r in rows}:
            sims = [float(r["similarity"]) for r in rows if (r["class"], r["prototype"]) == key]
            assert sims == sorted(sims, reverse=True)

    def test_prototypes_rejects_erm(self, data_dir, tmp_path):
        assert run("train", "--data", data_dir, "--out", tmp_path, "--epochs", 1, "--variant", "erm") == 0
        assert run("prototypes", "--ckpt", tmp_path / "checkpoint.json", "--data", data_dir, "--out", tmp_path / "p.csv") == 1

    def test_embeddings(self, data_dir, run_dir, tmp_path):
        out = tmp_path / "z.csv"
        assert run("export-embeddings", "--ckpt", run_dir / "checkpoint.json", "--data", data_dir, "--out", out) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0][:3] == ["id", "label", "env"]
        assert len(rows) == 31
        z = np.array([[float(v) for v in r[3:]] for r in rows[1:]])
        np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)

    def test_ablate(self, data_dir, tmp_path):
        code = run("ablate", "--data", data_dir, "--out", tmp_path, "--epochs", 1, "--k", 2, "--variant", "no-ipm", "--variant", "single-proto", "--seeds", 0, 1)
        assert code == 0
        rows = list(csv.DictReader((tmp_path / "ablation.csv").open()))
        assert [(r["variant"], r["seed"]) for r in rows] == [("no-ipm", "0"), ("no-ipm", "1"), ("single-proto", "0"), ("single-proto", "1")]
