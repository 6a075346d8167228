import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest
from PIL import Image

from pixeldamage.architectures import Network
from pixeldamage.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from pixeldamage.cli import main
from pixeldamage.data import Sample, generate_synthetic, load_dataset, write_dataset
from pixeldamage.fusion import REPORT_SCHEMA
from pixeldamage.tensor import RngState


def constant_checkpoint(path, role, cls):
    """A network whose output is class ``cls`` everywhere: zero final weights, one large bias."""
    net = Network.build("resnet23", role, RngState(0))
    last = [l.name for l in net.spec.head if l.kind == "dense"][-1]
    net.params[f"{last}.weight"][:] = 0
    net.params[f"{last}.bias"][:] = -10
    net.params[f"{last}.bias"][cls] = 10
    ck = Checkpoint(net.spec, net.params, net.buffers, np.full(3, 128.0), np.full(3, 50.0), np.ones(net.spec.num_classes))
    return save_checkpoint(path, ck)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--n", "8", "--seed", "1", "--out", str(d), "--size", "32"]) == 0
    return d


def test_synth_writes_loadable_pairs(synth_dir):
    assert len(load_dataset(synth_dir, size=32)) == 8


@pytest.fixture(scope="module")
def trained(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"data": {"size": 32}, "train": {"schedule": [[2, 0.01]], "checkpoint_every": 1}}))
    code = main(["train", "--config", str(cfg), "--role", "classifier", "--arch", "resnet23",
                 "--data", str(synth_dir), "--out", str(out / "cls"), "--seed", "3"])
    assert code == 0
    code = main(["train", "--config", str(cfg), "--role", "segmenter", "--arch", "resnet23",
                 "--data", str(synth_dir), "--out", str(out / "seg"), "--seed", "3"])
    assert code == 0
    return out


def test_train_outputs(trained):
    ck = load_checkpoint(trained / "cls" / "final.ckpt")
    assert ck.role == "classifier" and ck.spec.num_classes == 7 and ck.epoch == 2
    assert (trained / "cls" / "epoch_0001.ckpt").exists()
    lines = (trained / "cls" / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2 and "loss" in json.loads(lines[0])
    split = json.loads((trained / "cls" / "split.json").read_text())
    assert len(split["train"]) == 6 and len(split["test"]) == 2
    assert load_checkpoint(trained / "seg" / "final.ckpt").spec.num_classes == 2


def test_train_bad_arch(capsys, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["train", "--arch", "resnet50", "--out", str(tmp_path)])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err


def test_train_missing_data_is_usage_error(tmp_path):
    assert main(["train", "--out", str(tmp_path / "o")]) == 1


def test_train_empty_data_dir(tmp_path):
    (tmp_path / "empty").mkdir()
    assert main(["train", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "o")]) == 2


def test_train_unknown_config_key(tmp_path, synth_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"epochs": 3}}))
    assert main(["train", "--config", str(cfg), "--data", str(synth_dir), "--out", str(tmp_path / "o")]) == 1


def test_infer_all_background(tmp_path):
    seg = constant_checkpoint(tmp_path / "seg.ckpt", "segmenter", 0)
    cls = constant_checkpoint(tmp_path / "cls.ckpt", "classifier", 0)
    img = np.full((40, 56, 3), 140, np.uint8)  # plain, and not a multiple of 16
    Image.fromarray(img).save(tmp_path / "in.png")
    args = ["infer", "--segmenter", str(seg), "--classifier", str(cls), "--input", str(tmp_path / "in.png")]
    assert main(args + ["--output", str(tmp_path / "a.png"), "--overlay", str(tmp_path / "o.png")]) == 0
    mask = np.asarray(Image.open(tmp_path / "a.png"))
    assert mask.shape == (40, 56) and mask.max() == 0
    assert Image.open(tmp_path / "o.png").size[0] == 56


def test_infer_repeatable(trained, synth_dir, tmp_path):
    args = ["infer", "--segmenter", str(trained / "seg" / "final.ckpt"),
            "--classifier", str(trained / "cls" / "final.ckpt"), "--input", str(synth_dir / "image_0003.png")]
    assert main(args + ["--output", str(tmp_path / "1.png")]) == 0
    assert main(args + ["--output", str(tmp_path / "2.png")]) == 0
    assert (tmp_path / "1.png").read_bytes() == (tmp_path / "2.png").read_bytes()
    assert np.asarray(Image.open(tmp_path / "1.png")).shape == (32, 32)


def test_infer_swapped_roles(trained, synth_dir, tmp_path):
    code = main(["infer", "--segmenter", str(trained / "cls" / "final.ckpt"),
                 "--classifier", str(trained / "seg" / "final.ckpt"),
                 "--input", str(synth_dir / "image_0003.png"), "--output", str(tmp_path / "x.png")])
    assert code == 2


@pytest.mark.parametrize("cls", [0, 2])
def test_eval_oracle_checkpoints(tmp_path, capsys, cls):
    g = np.random.default_rng(cls)
    data = tmp_path / "d"
    write_dataset([Sample(g.uniform(0, 255, (3, 32, 32)).astype(np.float32), np.full((32, 32), cls, np.uint8), f"{i}")
                   for i in range(3)], data)
    seg = constant_checkpoint(tmp_path / "s.ckpt", "segmenter", int(cls > 0))
    clf = constant_checkpoint(tmp_path / "c.ckpt", "classifier", cls)
    capsys.readouterr()
    assert main(["eval", "--segmenter", str(seg), "--classifier", str(clf), "--data", str(data),
                 "--size", "32", "--report", str(tmp_path / "r.json")]) == 0
    rep = json.loads(capsys.readouterr().out)
    jsonschema.validate(rep, REPORT_SCHEMA)
    assert rep["overall_accuracy"] == 1.0
    assert json.loads((tmp_path / "r.json").read_text()) == rep


def test_eval_echoes_thresholds(trained, synth_dir, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"fusion": {"thresholds": [0.2, 0.3, 0.2, 0.3, 0.2, 0.3]}}))
    capsys.readouterr()
    assert main(["eval", "--segmenter", str(trained / "seg" / "final.ckpt"),
                 "--classifier", str(trained / "cls" / "final.ckpt"), "--data", str(synth_dir),
                 "--size", "32", "--split", str(trained / "cls" / "split.json"), "--config", str(cfg)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert list(rep["config"]["fusion"]["thresholds"].values()) == [0.2, 0.3, 0.2, 0.3, 0.2, 0.3]
    assert rep["config"]["samples"] == 2
    capsys.readouterr()
    assert main(["eval", "--segmenter", str(trained / "seg" / "final.ckpt"),
                 "--classifier", str(trained / "cls" / "final.ckpt"), "--data", str(synth_dir), "--size", "32"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert list(rep["config"]["fusion"]["thresholds"].values()) == [0.1, 0.4, 0.1, 0.5, 0.1, 0.5]


def test_inspect(trained, capsys):
    assert main(["inspect", "--ckpt", str(trained / "cls" / "final.ckpt")]) == 0
    out = capsys.readouterr().out
    assert "conv0" in out and "7x7x3x32" in out and "2411015" in out and "delta +262272" in out
    assert main(["inspect", "--arch", "vgg19_reduced", "--role", "classifier", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["total"] == 4429639 and rep["published_total"] == 4423104 and rep["unexplained"] == 0
    assert main(["inspect"]) == 1


def test_inspect_corrupt_checkpoint(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"XXXX" + bytes(20))
    assert main(["inspect", "--ckpt", str(tmp_path / "bad.ckpt")]) == 2


def test_gradcheck(capsys):
    assert main(["gradcheck", "--trials", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["failed"] == []
    assert main(["gradcheck", "--trials", "1", "--tolerance", "1e-300"]) == 3
    assert json.loads(capsys.readouterr().out)["failed"]


def test_console_script_entry(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pixeldamage.cli", "synth", "--n", "2", "--out", str(tmp_path),
                        "--size", "16"], capture_output=True, text=True)
    assert r.returncode == 0 and r.stdout == ""
    assert len(list(tmp_path.glob("mask_*.png"))) == 2
