import json
from importlib import resources

import jsonschema
import pytest

from pbadv.cli import main

SYNTH_ARGS = ["--m", "4", "--n", "5", "--D", "16", "--samples-per-pair", "8", "--word-dim", "24"]
FAST = ["--set", "model.embed_dim=48", "--set", "train.lr=1e-3", "--set", "train.batch_size=32"]


def synth(out, seed=1):
    assert main(["synth", "--out", str(out), "--seed", str(seed)] + SYNTH_ARGS) == 0
    return out / "config.json"


def train(cfg, out, *extra):
    return main(["train", "--config", str(cfg), "--out", str(out)] + FAST + list(extra))


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    """A synthetic dataset and a model trained on it for 6 epochs."""
    root = tmp_path_factory.mktemp("cli")
    cfg = synth(root / "data")
    assert train(cfg, root / "run", "--set", "train.epochs=6") == 0
    return root


class TestSynth:
    def test_deterministic(self, tmp_path, capsys):
        synth(tmp_path / "a")
        synth(tmp_path / "b")
        for name in ("manifest.json", "features.pbfv", "embeddings.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        assert "15 seen / 5 unseen" in capsys.readouterr().out

    def test_config_points_at_files(self, run_dir):
        cfg = json.loads((run_dir / "data" / "config.json").read_text())
        assert cfg["preset"] == "synthetic"
        assert cfg["data"]["features"].endswith("features.pbfv")

    def test_bad_parameters(self, tmp_path, capsys):
        assert main(["synth", "--out", str(tmp_path), "--D", "7"]) == 2


class TestTrain:
    def test_outputs(self, run_dir):
        run = run_dir / "run"
        lines = (run / "stats.jsonl").read_text().splitlines()
        assert len(lines) == 6 and json.loads(lines[-1])["epoch"] == 6
        manifest = json.loads((run / "run_manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["config"]["train"]["epochs"] == 6
        assert (run / "model.pbck").exists()

    def test_one_epoch_one_checkpoint(self, run_dir, tmp_path):
        assert train(run_dir / "data" / "config.json", tmp_path, "--set", "train.epochs=1") == 0
        assert len((tmp_path / "stats.jsonl").read_text().splitlines()) == 1
        assert sorted(p.name for p in tmp_path.glob("*.pbck")) == ["model.pbck"]

    def test_periodic_checkpoints_and_best(self, run_dir, tmp_path):
        code = train(run_dir / "data" / "config.json", tmp_path, "--set", "train.epochs=4", "--set", "train.ckpt_every=2", "--select-best")
        assert code == 0
        names = sorted(p.name for p in tmp_path.glob("*.pbck"))
        assert names == ["best.pbck", "ckpt_epoch0002.pbck", "ckpt_epoch0004.pbck", "model.pbck"]
        assert "val_auc" in json.loads((tmp_path / "stats.jsonl").read_text().splitlines()[0])

    def test_identical_checkpoints(self, run_dir, tmp_path):
        cfg = run_dir / "data" / "config.json"
        assert train(cfg, tmp_path / "a", "--set", "train.epochs=2") == 0
        assert train(cfg, tmp_path / "b", "--set", "train.epochs=2") == 0
        assert (tmp_path / "a" / "model.pbck").read_bytes() == (tmp_path / "b" / "model.pbck").read_bytes()

    def test_replay_from_manifest(self, run_dir, tmp_path):
        assert main(["train", "--config", str(run_dir / "run" / "run_manifest.json"), "--out", str(tmp_path)]) == 0
        assert (tmp_path / "model.pbck").read_bytes() == (run_dir / "run" / "model.pbck").read_bytes()

    def test_ablation_flags(self, run_dir, tmp_path):
        assert train(run_dir / "data" / "config.json", tmp_path, "--set", "train.epochs=1", "--no-adv", "--no-osp") == 0
        stats = json.loads((tmp_path / "stats.jsonl").read_text())
        assert "loss_adv" not in stats and "loss_osp" not in stats

    def test_missing_features(self, run_dir, tmp_path, capsys):
        code = train(run_dir / "data" / "config.json", tmp_path, "--set", f"data.features={tmp_path / 'nope.pbfv'}")
        assert code == 3
        assert "nope.pbfv" in capsys.readouterr().err
        assert not (tmp_path / "stats.jsonl").exists()

    def test_unknown_key(self, run_dir, tmp_path, capsys):
        assert train(run_dir / "data" / "config.json", tmp_path, "--set", "train.speed=1") == 2
        assert "valid keys" in capsys.readouterr().err

    def test_numeric_failure(self, run_dir, tmp_path, capsys):
        assert train(run_dir / "data" / "config.json", tmp_path, "--set", "train.lr=1e36", "--set", "train.epochs=3") == 4
        assert "batch" in capsys.readouterr().err


class TestEval:
    def test_report_schema(self, run_dir, tmp_path, capsys):
        ckpt = run_dir / "run" / "model.pbck"
        assert main(["eval", "--checkpoint", str(ckpt), "--out", str(tmp_path), "--csv"]) == 0
        out = capsys.readouterr().out
        for col in ("AUC", "HM", "Seen", "Unseen", "Attr", "Obj"):
            assert col in out
        report = json.loads((tmp_path / "report.json").read_text())
        schema = json.loads(resources.files("pbadv").joinpath("report_schema.json").read_text())
        jsonschema.validate(report, schema)
        rows = (tmp_path / "curve.csv").read_text().splitlines()
        assert rows[0] == "bias,seen,unseen" and len(rows) == 201

    def test_open_world_not_better(self, run_dir, tmp_path):
        ckpt = str(run_dir / "run" / "model.pbck")
        auc = {}
        for world in ("closed", "open"):
            assert main(["eval", "--checkpoint", ckpt, "--world", world, "--out", str(tmp_path / world)]) == 0
            auc[world] = json.loads((tmp_path / world / "report.json").read_text())["auc"]
        assert auc["open"] <= auc["closed"]

    def test_dimension_mismatch(self, run_dir, tmp_path, capsys):
        other = tmp_path / "data"
        main(["synth", "--out", str(other), "--m", "4", "--n", "5", "--D", "8", "--samples-per-pair", "4", "--word-dim", "24"])
        capsys.readouterr()
        code = main([
            "eval", "--checkpoint", str(run_dir / "run" / "model.pbck"), "--config", str(other / "config.json"),
            "--out", str(tmp_path / "out"),
        ])
        assert code == 3
        err = capsys.readouterr().err
        assert "D=16" in err and "D=8" in err

    def test_missing_checkpoint(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.pbck"), "--out", str(tmp_path)]) == 3


class TestRetrieve:
    def test_image_to_text(self, run_dir, tmp_path, capsys):
        ckpt = str(run_dir / "run" / "model.pbck")
        assert main(["retrieve", "--checkpoint", ckpt, "--k", "3", "--queries", "2", "--out", str(tmp_path)]) == 0
        results = json.loads((tmp_path / "retrieval_image2text.json").read_text())
        assert len(results) == 2 and all(len(r["results"]) == 3 for r in results)
        assert "query" in capsys.readouterr().out

    def test_other_directions(self, run_dir, tmp_path):
        ckpt = str(run_dir / "run" / "model.pbck")
        manifest = json.loads((run_dir / "data" / "manifest.json").read_text())
        a, o = manifest["pairs_seen"][0]
        assert main(["retrieve", "--checkpoint", ckpt, "--direction", "text2image", "--query", f"{a},{o}", "--out", str(tmp_path)]) == 0
        assert main(["retrieve", "--checkpoint", ckpt, "--direction", "attr", "--query", a, "--k", "2", "--out", str(tmp_path)]) == 0
        res = json.loads((tmp_path / "retrieval_attr.json").read_text())
        assert len(res[0]["results"]) == 2

    def test_bad_query(self, run_dir, tmp_path):
        ckpt = str(run_dir / "run" / "model.pbck")
        assert main(["retrieve", "--checkpoint", ckpt, "--direction", "text2image", "--query", "x,y", "--out", str(tmp_path)]) == 2


class TestGradcheck:
    def test_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        assert "checks passed" in capsys.readouterr().out
