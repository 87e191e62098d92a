import csv
import json

import numpy as np
import pytest
import torch
from PIL import Image

from copymove import cli
from copymove.data import read_dataset
from copymove.evaluation import TRI_PALETTE

TINY = """\
seed = 0
epochs = 1
batch_size = 4
input_size = 64
embed_channels = 32
num_heads = 4
window = 2
decoder_channels = 8,8,8,8
eval_batch_size = 4
"""


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.txt").write_text(TINY)
    assert run("gen", "--n", 10, "--seed", 4, "--size", 64, "--out", root / "data") == 0
    assert run("train", "--config", root / "cfg.txt", "--data", root / "data", "--out", root / "run") == 0
    return root


def test_gen_layout(workspace):
    data = workspace / "data"
    assert [len(read_dataset(data / s)) for s in ("train", "val", "test")] == [8, 1, 1]
    assert read_dataset(data / "test").sample_ids == [9]
    record = json.loads((data / "run.json").read_text())
    assert record["command"] == "gen" and record["splits"] == {"train": 8, "val": 1, "test": 1}
    assert "train/manifest.txt" in record["outputs"]
    cli.verify_run_manifest(data / "run.json")


def test_gen_is_reproducible(tmp_path, workspace):
    assert run("gen", "--n", 10, "--seed", 4, "--size", 64, "--out", tmp_path / "again") == 0
    a = json.loads((workspace / "data" / "run.json").read_text())["outputs"]
    b = json.loads((tmp_path / "again" / "run.json").read_text())["outputs"]
    assert a == b


def test_gen_bad_fractions(tmp_path, capsys):
    assert run("gen", "--n", 10, "--out", tmp_path / "x", "--split-fractions", "0.5,0.2") == 1
    assert "error" in capsys.readouterr().err


def test_attack_bad_spec_is_usage_error(workspace, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("attack", "--in", workspace / "data" / "test", "--spec", "JC10", "--out", tmp_path / "a")
    assert exc.value.code == 2
    err = capsys.readouterr().err
    assert "JC9" in err and "BASE" in err


def test_attack_keeps_masks(workspace, tmp_path):
    src = workspace / "data" / "train"
    assert run("attack", "--in", src, "--spec", "NA3", "--seed", 1, "--out", tmp_path / "na") == 0
    before, after = read_dataset(src), read_dataset(tmp_path / "na")
    assert after.sample_ids == before.sample_ids
    for a, b in zip(before, after):
        assert np.array_equal(a.tri_mask, b.tri_mask)
        assert b.attack_tag == "NA3"
        assert not np.array_equal(a.image, b.image)


def test_train_outputs(workspace):
    out = workspace / "run"
    record = json.loads((out / "run.json").read_text())
    assert record["config"]["seed"] == 0 and record["epoch"] == 1
    assert set(record["outputs"]) == {"checkpoint.pt", "config.txt", "history.csv", "loss.csv"}
    rows = list(csv.reader(open(out / "loss.csv")))
    assert rows[0] == ["iter", "ce_f", "ce_d", "mse", "gamma", "total", "lr"] and len(rows) == 3


def test_train_overrides_and_errors(workspace, tmp_path, capsys):
    cfg = workspace / "cfg.txt"
    data = workspace / "data"
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "r", "--resume") == 1
    assert "not supported" in capsys.readouterr().err
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "r", "--set", "colour=red") == 1
    assert "unknown config key" in capsys.readouterr().err
    assert run("train", "--data", data, "--out", tmp_path / "r") == 1
    assert "missing config key: seed" in capsys.readouterr().err
    assert run("train", "--config", cfg, "--data", data, "--out", tmp_path / "g", "--set", "gamma=0") == 0
    assert json.loads((tmp_path / "g" / "run.json").read_text())["config"]["gamma"] == 0.0


def test_eval_reports(workspace, tmp_path):
    data = workspace / "data"
    assert run("attack", "--in", data / "test", "--spec", "IB2", "--out", tmp_path / "ib") == 0
    rep = tmp_path / "rep"
    code = run("eval", "--checkpoint", workspace / "run" / "checkpoint.pt",
               "--data", data / "test", "--data", tmp_path / "ib", "--report", rep, "--export-maps")
    assert code == 0
    det = list(csv.DictReader(open(rep / "detection.csv")))
    assert [r["class"] for r in det] == ["forged", "pristine"]
    dist = list(csv.DictReader(open(rep / "distinguishment.csv")))
    assert [r["class"] for r in dist] == ["source", "target", "pristine"]
    tags = {r["attack_tag"] for r in csv.DictReader(open(rep / "categories.csv"))}
    assert tags == {"BASE", "IB2"}
    assert len(list(csv.DictReader(open(rep / "per_image.csv")))) == 2 * 5
    assert (rep / "maps" / "ib" / "000009_tri.png").exists()
    cli.verify_run_manifest(rep / "run.json")


def test_eval_rejects_schema_mismatch(workspace, tmp_path, capsys):
    blob = torch.load(workspace / "run" / "checkpoint.pt", weights_only=True)
    blob["tensors"]["decoder_f.classifier.weight"] = torch.zeros(2, 4, 1, 1)
    bad = tmp_path / "bad.pt"
    torch.save(blob, bad)
    assert run("eval", "--checkpoint", bad, "--data", workspace / "data" / "test", "--report", tmp_path / "r") == 1
    assert "schema mismatch" in capsys.readouterr().err


def test_infer_restores_size(workspace, tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (50, 70, 3), dtype=np.uint8)
    Image.fromarray(img).save(tmp_path / "photo.png")
    assert run("infer", "--checkpoint", workspace / "run" / "checkpoint.pt", "--image", tmp_path / "photo.png",
               "--out", tmp_path / "o") == 0
    binary = np.asarray(Image.open(tmp_path / "o" / "photo_binary.png"))
    tri = np.asarray(Image.open(tmp_path / "o" / "photo_tri.png"))
    assert binary.shape == (50, 70) and set(np.unique(binary)) <= {0, 255}
    assert tri.shape == (50, 70, 3)
    assert {tuple(c) for c in tri.reshape(-1, 3)} <= {tuple(c) for c in TRI_PALETTE}


def test_infer_unreadable_image(workspace, tmp_path, capsys):
    bogus = tmp_path / "nope.png"
    bogus.write_text("text")
    assert run("infer", "--checkpoint", workspace / "run" / "checkpoint.pt", "--image", bogus, "--out", tmp_path) == 1
    assert str(bogus) in capsys.readouterr().err


def test_output_root_env(monkeypatch, tmp_path):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert run("gen", "--n", 3, "--size", 64, "--split-fractions", "1,0,0", "--out", "rel") == 0
    assert (tmp_path / "rel" / "train" / "manifest.txt").exists()


def test_manifest_detects_tampering(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    args = cli.build_parser().parse_args(["gen", "--n", "1", "--out", str(tmp_path)])
    path = cli.write_run_manifest(tmp_path, "gen", args, 0.0)
    (tmp_path / "a.txt").write_text("y")
    with pytest.raises(cli.CommandError, match="does not match"):
        cli.verify_run_manifest(path)
    (tmp_path / "a.txt").unlink()
    with pytest.raises(cli.CommandError, match="missing"):
        cli.verify_run_manifest(path)


def test_sweep_default_values(workspace, tmp_path):
    assert run("sweep", "--axis", "gamma", "--values", "0,10", "--config", workspace / "cfg.txt",
               "--data", workspace / "data", "--out", tmp_path / "s") == 0
    rows = list(csv.DictReader(open(tmp_path / "s" / "sweep_gamma.csv")))
    assert [r["gamma"] for r in rows] == ["0.0", "10.0"]
