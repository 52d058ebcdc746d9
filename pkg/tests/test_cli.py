import json

import pytest

from cunet import cli
from cunet.data import read_split_dataset
from cunet.render import read_ppm
from cunet.train import TrainConfig


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def dataset(tmp_path, capsys):
    (tmp_path / "synth.cfg").write_text("count = 10\nsize = 16\n# comment line\nseed = 5\n")
    code, out, _ = run(capsys, "synth", "--config", tmp_path / "synth.cfg", "--q-tumor", 1.0, "--out-dir", tmp_path / "ds")
    assert code == 0
    return tmp_path / "ds", json.loads(out)


def test_synth(dataset):
    root, summary = dataset
    assert summary["count"] == 10 and summary["q_tumor"] == 1.0 and summary["seed"] == 5
    splits = read_split_dataset(root)
    assert {k: len(v) for k, v in splits.items()} == {"train": 6, "val": 2, "test": 2}


def test_train_eval_predict(dataset, tmp_path, capsys):
    root, _ = dataset
    (tmp_path / "train.cfg").write_text("max_epochs = 3\nbatch_size = 4\ndepth = 2\nbase_channels = 2\naugment = false\n")
    code, out, _ = run(capsys, "train", "--config", tmp_path / "train.cfg", "--max-epochs", 2, "--data-dir", root, "--out-dir", tmp_path / "run")
    assert code == 0
    assert json.loads(out)["epochs"] == 2
    saved = TrainConfig.load(tmp_path / "run" / "train.json")
    assert saved.max_epochs == 2 and saved.augment is False and saved.batch_size == 4

    code, out, _ = run(capsys, "eval", "--checkpoint", tmp_path / "run", "--data-dir", root, "--report", tmp_path / "rep.csv")
    assert code == 0 and json.loads(out)["cases"] == 2
    assert len((tmp_path / "rep.csv").read_text().splitlines()) == 3
    assert set(json.loads((tmp_path / "rep.json").read_text())) >= {"means", "cases"}

    case = sorted((root / "test").iterdir())[0]
    code, out, _ = run(capsys, "predict", "--checkpoint", tmp_path / "run" / "best.ckpt", "--case", case, "--out", tmp_path / "o.ppm")
    assert code == 0
    assert read_ppm(tmp_path / "o.ppm").shape == (16, 16, 3)
    assert sum(json.loads(out)["label_counts"].values()) == 256


def test_every_train_key_has_a_flag():
    parser = cli.build_parser()
    train_parser = parser._subparsers._group_actions[0].choices["train"]
    dests = {a.dest for a in train_parser._actions}
    assert {f for f in TrainConfig.__dataclass_fields__} <= dests


def _error(err):
    line = err.strip().splitlines()[-1]
    return json.loads(line)


def test_unknown_config_key(dataset, tmp_path, capsys):
    root, _ = dataset
    (tmp_path / "bad.cfg").write_text("learning_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--config", tmp_path / "bad.cfg", "--data-dir", root, "--out-dir", tmp_path / "r")
    assert code == 2 and _error(err)["error"] == "ConfigError"


def test_invalid_value(dataset, tmp_path, capsys):
    root, _ = dataset
    code, _, err = run(capsys, "train", "--lr-floor", 1.0, "--data-dir", root, "--out-dir", tmp_path / "r")
    assert code == 2 and "floors" in _error(err)["message"]


def test_malformed_line(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("count 3\n")
    code, _, err = run(capsys, "synth", "--config", tmp_path / "c.cfg", "--out-dir", tmp_path / "d")
    assert code == 2 and _error(err)["command"] == "synth"


def test_json_config(tmp_path, capsys):
    (tmp_path / "c.json").write_text('{"count": 5, "size": 16}')
    code, out, _ = run(capsys, "synth", "--config", tmp_path / "c.json", "--out-dir", tmp_path / "d")
    assert code == 0 and json.loads(out)["count"] == 5


def test_corrupt_case(dataset, tmp_path, capsys):
    root, _ = dataset
    bad = tmp_path / "bad.cuns"
    bad.write_bytes(b"JUNKJUNK")
    code, _, err = run(capsys, "predict", "--checkpoint", tmp_path / "none.ckpt", "--case", bad, "--out", tmp_path / "o.ppm")
    assert code == 3 and _error(err)["error"] == "FormatError"


def test_missing_checkpoint(dataset, tmp_path, capsys):
    root, _ = dataset
    code, _, err = run(capsys, "eval", "--checkpoint", tmp_path / "nowhere", "--data-dir", root, "--report", tmp_path / "r.csv")
    assert code == 1 and _error(err)["error"] == "FileNotFoundError"


def test_gradcheck(capsys):
    code, out, _ = run(capsys, "gradcheck", "--seeds", 2)
    summary = json.loads(out)
    assert code == 0 and summary["passed"] and summary["max_rel_error"] <= 1e-4
    assert "cunet_loss" in summary["cases"] and "conv2d" in summary["cases"]
