import csv
import json
import math

import numpy as np
import pytest
import torch

from dynsubnet import checkpoint, cli, harness
from dynsubnet import train as train_mod
from dynsubnet.analysis import word_scores
from dynsubnet.config import RunConfig
from dynsubnet.gating import read_gate_csv
from dynsubnet.model import GroundingModel
from dynsubnet.train import TrainingDiverged, train

SMALL = dict(train_count=96, val_count=40, batch_size=32, epochs=2, seed=4)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    return train(RunConfig(**SMALL), run_dir=root / "a")


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig(seed=3, stage_widths=(8, 16), stage_strides=(1, 2), flip_augment=True, lr=3e-4)
        assert RunConfig.loads(cfg.dumps()) == cfg

    def test_comments_and_overrides(self):
        cfg = RunConfig.loads("# header\nepochs = 3  # short\n\nseed = 1\n", seed=9)
        assert cfg.epochs == 3 and cfg.seed == 9

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown key 'epoch'"):
            RunConfig.loads("epoch = 3\n")

    def test_bad_value(self):
        with pytest.raises(ValueError, match="cannot parse"):
            RunConfig.loads("epochs = many\n")

    def test_invalid_values(self):
        with pytest.raises(ValueError):
            RunConfig(batch_size=1)
        with pytest.raises(ValueError):
            RunConfig(gate_mix_granularity="sample")
        with pytest.raises(ValueError):
            RunConfig(mi_weight=-0.1)


class TestCheckpoint:
    def test_bitwise_round_trip(self, tmp_path):
        torch.manual_seed(0)
        config = RunConfig(seed=2)
        model = GroundingModel(config.supernet())
        checkpoint.save(tmp_path / "ck", model, config, step=5, epoch=1)
        back, cfg2, manifest = checkpoint.load_model(tmp_path / "ck")
        assert cfg2 == config and manifest["step"] == 5
        for (n, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert torch.equal(a, b), n
        blob = (tmp_path / "ck" / "params.bin").read_bytes()
        first = manifest["tensors"][0]
        expected = model.state_dict()[first["name"]].numpy().astype("<f4").tobytes()
        assert blob[:len(expected)] == expected

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="checkpoint"):
            checkpoint.read(tmp_path / "nope")

    def test_truncated_blob(self, tmp_path):
        config = RunConfig()
        checkpoint.save(tmp_path / "ck", GroundingModel(config.supernet()), config)
        path = tmp_path / "ck" / "params.bin"
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            checkpoint.read(tmp_path / "ck")


class TestWordScores:
    def test_hand_built_corpus(self):
        itos = ["[PAD]", "[CLS]", "[UNK]", "red", "ball"]
        ids = torch.tensor([[1, 3, 4], [1, 3, 0]])
        alphas = torch.tensor([[[0.2, 0.5, 0.3], [0.1, 0.1, 0.8]],
                               [[0.5, 0.5, 0.0], [0.4, 0.6, 0.0]]], dtype=torch.float64)
        scores = word_scores(alphas, ids, 1, itos)
        assert set(scores) == {"red", "ball"}
        red = scores["red"]
        assert red.count == 2
        assert np.allclose(red.mass, [0.5, 0.35], atol=1e-15)
        assert math.isclose(red.backbone, math.exp(0.5) / (math.exp(0.5) + math.exp(0.35)), rel_tol=1e-12)
        ball = scores["ball"]                     # single occurrence: its own mass
        assert ball.count == 1 and np.allclose(ball.mass, [0.3, 0.8], atol=1e-15)
        for s in scores.values():
            assert abs(s.backbone + s.interaction - 1) <= 1e-9

    def test_random_corpus_sums_to_one(self):
        rng = np.random.default_rng(0)
        alphas = torch.softmax(torch.from_numpy(rng.normal(size=(50, 16, 8))), -1)
        ids = torch.from_numpy(rng.integers(0, 18, (50, 8)))
        itos = [f"w{i}" for i in range(18)]
        scores = word_scores(alphas, ids, 8, itos, skip=())
        assert len(scores) == len(torch.unique(ids))
        for s in scores.values():
            assert abs(s.backbone + s.interaction - 1) <= 1e-9


class TestTraining:
    def test_artifacts(self, small_run):
        d = small_run.run_dir
        for name in ("config.txt", "steps.csv", "epochs.csv", "timing.json", "checkpoint/manifest.json"):
            assert (d / name).exists(), name
        rows = list(csv.DictReader(open(d / "epochs.csv")))
        assert [int(r["epoch"]) for r in rows] == [0, 1]
        for r in rows:
            assert all(math.isfinite(float(v)) for v in r.values())
        steps = list(csv.DictReader(open(d / "steps.csv")))
        assert len(steps) == 2 * (96 // 32)
        assert all(math.isfinite(float(r["total"])) for r in steps)
        assert RunConfig.load(d / "config.txt") == RunConfig(**SMALL)

    def test_same_seed_identical_logs(self, small_run, tmp_path):
        again = train(RunConfig(**SMALL), run_dir=tmp_path / "b")
        for name in ("steps.csv", "epochs.csv"):
            assert (again.run_dir / name).read_bytes() == (small_run.run_dir / name).read_bytes()

    def test_zero_mi_weight_runs(self, tmp_path):
        res = train(RunConfig(**dict(SMALL, epochs=1, mi_weight=0.0)), run_dir=tmp_path / "c")
        steps = list(csv.DictReader(open(res.run_dir / "steps.csv")))
        for r in steps:
            assert abs(float(r["total"]) - float(r["l1"]) - float(r["giou"])) <= 1e-6

    def test_divergence_writes_diagnostics(self, tmp_path, monkeypatch):
        real = train_mod.total_loss

        def poisoned(*args, **kw):
            terms = real(*args, **kw)
            terms.total = terms.total * float("nan")
            return terms

        monkeypatch.setattr(train_mod, "total_loss", poisoned)
        with pytest.raises(TrainingDiverged, match="step 0"):
            train(RunConfig(**dict(SMALL, epochs=1)), run_dir=tmp_path / "d")
        diag = json.loads((tmp_path / "d" / "diverged.json").read_text())
        assert diag["step"] == 0 and len(diag["scene_ids"]) == 32
        checkpoint.read(tmp_path / "d" / "last_good")


class TestHarness:
    def test_evaluate_and_recount(self, small_run, tmp_path):
        ck = small_run.run_dir / "checkpoint"
        metrics = harness.evaluate(ck, "val", tmp_path, latency_samples=2)
        assert metrics["count"] == 40
        recount = harness.recount_predictions(tmp_path / "predictions_val.csv")
        assert recount == metrics["prec_at_0.5"]
        final = list(csv.DictReader(open(small_run.run_dir / "epochs.csv")))[-1]
        assert float(final["val_prec"]) == metrics["prec_at_0.5"]

    def test_extract_matches_masked(self, small_run):
        rep = harness.extract(small_run.run_dir / "checkpoint", None, 3, "val", repeats=10)
        assert np.allclose(rep["box"], rep["masked_box"], rtol=1e-5, atol=1e-6)
        assert rep["subnet"]["flops"] <= rep["full"]["flops"]
        assert 0 <= rep["flops_saving"] < 1

    def test_extract_custom_expression(self, small_run):
        rep = harness.extract(small_run.run_dir / "checkpoint", "blue square", 0, "val", repeats=10)
        assert rep["expression"] == "blue square"
        with pytest.raises(ValueError, match="max_len"):
            harness.extract(small_run.run_dir / "checkpoint", " ".join(["red"] * 20), 0, "val")

    def test_exports_are_deterministic(self, small_run, tmp_path):
        ck = small_run.run_dir / "checkpoint"
        a = harness.export_gates(ck, "val", tmp_path / "a")
        b = harness.export_gates(ck, "val", tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()
        ids, names, gates = read_gate_csv(a)
        assert len(ids) == 40 and set(np.unique(gates)) <= {0.0, 1.0}
        harness.export_word_scores(ck, "val", tmp_path / "a")
        harness.export_word_scores(ck, "val", tmp_path / "b")
        assert (tmp_path / "a/word_scores.csv").read_bytes() == (tmp_path / "b/word_scores.csv").read_bytes()

    def test_stats_files(self, small_run, tmp_path):
        summary = harness.stats(small_run.run_dir / "checkpoint", "val", tmp_path)
        assert summary["expressions"] == 40
        for name in ("gate_rates.csv", "layer_count_hist.csv", "filter_count_hist.csv", "gate_vectors.csv"):
            assert (tmp_path / name).exists()
        hist = list(csv.DictReader(open(tmp_path / "layer_count_hist.csv")))
        assert sum(int(r["backbone_layers"]) for r in hist) == 40

    def test_unknown_split(self, small_run):
        with pytest.raises(ValueError, match="split"):
            harness.evaluate(small_run.run_dir / "checkpoint", "test")


class TestCli:
    def test_error_line(self, tmp_path, capsys):
        code = cli.main(["eval", "--checkpoint", str(tmp_path / "missing")])
        err = capsys.readouterr().err.strip().splitlines()
        assert code == 1
        assert len(err) == 1 and err[0].startswith("error: FileNotFoundError:")

    def test_bad_config_key(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("bogus = 1\n")
        assert cli.main(["train", "--config", str(tmp_path / "c.txt")]) == 1
        assert "unknown key 'bogus'" in capsys.readouterr().err

    def test_gen_data(self, tmp_path, capsys):
        (tmp_path / "c.txt").write_text("train_count = 20\nval_count = 5\n")
        assert cli.main(["gen-data", "--config", str(tmp_path / "c.txt"), "--out", str(tmp_path / "d")]) == 0
        paths = json.loads(capsys.readouterr().out)
        assert sum(1 for _ in open(paths["train"])) == 20
        assert sum(1 for _ in open(paths["val"])) == 5

    def test_word_scores_command(self, small_run, tmp_path, capsys):
        code = cli.main(["word-scores", "--checkpoint", str(small_run.run_dir / "checkpoint"),
                         "--out", str(tmp_path)])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 15
        for line in lines:
            _, b, i = line.split("\t")
            assert abs(float(b) + float(i) - 1) < 1e-3
