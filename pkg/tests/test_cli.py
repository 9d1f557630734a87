import json
from pathlib import Path

import numpy as np
import pytest

from slotvsg.cli import ENV_OUT, load_world_config, run
from slotvsg.config import ConfigError, TrainConfig, dump_config, load_config
from slotvsg.core import validate_annotation
from slotvsg.dataset import load_split, load_video, read_manifest, write_dataset
from slotvsg.synthgen import WorldConfig, generate_split

WORLD_CFG = """[world]
height = 32
width = 32
num_entities = 2
num_frames = 3
floor_height = 6
size_range = 6, 10

[splits]
base_seed = 5
train = 2
eval = 1
"""

TRAIN_OVERRIDES = [
    "model.num_objects=4", "model.num_relations=12", "model.slot_dim=16", "model.enc_dim=16",
    "model.dec_dim=4", "model.encoder_depth=1", "trainer.clip_min=2", "trainer.clip_max=3",
]


def overrides(extra=()):
    return [a for o in list(TRAIN_OVERRIDES) + list(extra) for a in ("--override", o)]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "world.cfg").write_text(WORLD_CFG)
    assert run(["synth", "--config", str(root / "world.cfg"), "--out", str(root / "data")]) == 0
    rc = run(["train", "--data", str(root / "data"), "--task", "joint", "--out", str(root / "run"),
              *overrides(["trainer.steps=2"])])
    assert rc == 0
    return root


def test_synth_writes_valid_dataset(workspace):
    manifest = read_manifest(workspace / "data")
    assert manifest["splits"] == {"train": ["train_000005", "train_000006"], "eval": ["eval_000007"]}
    for v in load_split(workspace / "data", "train"):
        assert validate_annotation(v.annotation) == []
        assert v.frames.shape == (3, 32, 32, 3)


def test_synth_is_deterministic(workspace, tmp_path):
    assert run(["synth", "--config", str(workspace / "world.cfg"), "--out", str(tmp_path)]) == 0
    for vid in ("train_000005", "eval_000007"):
        a = (workspace / "data" / vid / "annotation.json").read_text()
        assert (tmp_path / vid / "annotation.json").read_text() == a
        assert np.array_equal(load_video(tmp_path, vid).frames, load_video(workspace / "data", vid).frames)


def test_train_outputs(workspace):
    run_dir = workspace / "run"
    assert (run_dir / "final.pt").exists() and (run_dir / "config.cfg").exists()
    lines = (run_dir / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2 and json.loads(lines[0])["step"] == 1
    cfg = load_config(run_dir / "config.cfg")
    assert cfg.trainer.task == "joint" and cfg.model.num_objects == 4


def test_train_zero_steps(workspace, tmp_path):
    rc = run(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), *overrides(["trainer.steps=0"])])
    assert rc == 0 and (tmp_path / "final.pt").exists()
    assert (tmp_path / "train_log.jsonl").read_text() == ""


def test_eval_is_deterministic(workspace, tmp_path):
    ckpt = str(workspace / "run" / "final.pt")
    for name in ("a", "b"):
        assert run(["eval", "--ckpt", ckpt, "--data", str(workspace / "data"), "--out", str(tmp_path / name)]) == 0
    doc = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert "SGDET/with" in doc["recall"] and "PQ" in doc and "AP50" in doc
    a = dict(doc)
    b = json.loads((tmp_path / "b" / "metrics.json").read_text())
    a["diagnostics"] = {k: v for k, v in a["diagnostics"].items() if "seconds" not in k}
    b["diagnostics"] = {k: v for k, v in b["diagnostics"].items() if "seconds" not in k}
    assert a == b


def test_export_is_deterministic(workspace, tmp_path):
    ckpt = str(workspace / "run" / "final.pt")
    for name in ("a", "b"):
        assert run(["export", "--ckpt", ckpt, "--data", str(workspace / "data"), "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "eval_000007.json").read_text()
    assert a == (tmp_path / "b" / "eval_000007.json").read_text()
    assert json.loads(a)["video_id"] == "eval_000007"


def test_viz_writes_one_attention_map_per_slot(workspace, tmp_path):
    ckpt = str(workspace / "run" / "final.pt")
    rc = run(["viz", "--ckpt", ckpt, "--data", str(workspace / "data"), "--out", str(tmp_path),
              "--frames", "0,2"])
    assert rc == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert len([n for n in names if n.startswith("attention_f000_")]) == 4
    assert len([n for n in names if n.startswith("attention_f002_")]) == 4
    assert {"masks_f000.png", "graph_f002.png", "tube.png"} <= set(names)


def test_viz_unknown_kind_is_runtime_error(workspace, tmp_path, capsys):
    rc = run(["viz", "--ckpt", str(workspace / "run" / "final.pt"), "--data", str(workspace / "data"),
              "--out", str(tmp_path), "--kinds", "sparkles"])
    assert rc == 1
    assert "sparkles" in json.loads(capsys.readouterr().err)["message"]


def test_env_var_default_output(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv(ENV_OUT, str(tmp_path))
    rc = run(["eval", "--ckpt", str(workspace / "run" / "final.pt"), "--data", str(workspace / "data")])
    assert rc == 0 and (tmp_path / "eval" / "metrics.json").exists()


def test_missing_output_is_usage_error(workspace, monkeypatch, capsys):
    monkeypatch.delenv(ENV_OUT, raising=False)
    assert run(["synth", "--config", str(workspace / "world.cfg")]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "usage"


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["train", "--task", "segment"],
    ["train", "--override", "trainer.nonexistent=1", "--data", "x", "--out", "y"],
    ["train", "--override", "trainer.steps=many", "--data", "x", "--out", "y"],
    ["eval", "--data", "x", "--out", "y"],
])
def test_usage_errors_exit_2(argv):
    assert run(argv) == 2


def test_capacity_error_exits_2(workspace, tmp_path):
    rc = run(["train", "--data", str(workspace / "data"), "--out", str(tmp_path),
              *overrides(["trainer.steps=1", "model.num_objects=1"])])
    assert rc == 2


def test_missing_dataset_is_runtime_error(tmp_path):
    rc = run(["train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"), *overrides()])
    assert rc == 1


# ---------------------------------------------------------------- config files


def test_world_config_parsing(tmp_path):
    p = tmp_path / "w.cfg"
    p.write_text(WORLD_CFG + "\n")
    world, splits, base = load_world_config(p, ["world.predicates=left-of,above"])
    assert world.height == 32 and world.size_range == (6, 10) and world.predicates == ("left-of", "above")
    assert splits == {"train": 2, "eval": 1} and base == 5
    with pytest.raises(ConfigError):
        load_world_config(p, ["world.gravity=1"])
    with pytest.raises(ConfigError):
        load_world_config(p, ["world.num_entities=0"])


def test_train_config_round_trip(tmp_path):
    cfg = TrainConfig()
    cfg.trainer.task = "pvsg"
    cfg.loss.use_consistency = False
    cfg.loss.index_temperature = 0.25
    p = tmp_path / "c.cfg"
    p.write_text(dump_config(cfg))
    assert load_config(p) == cfg
    assert load_config(p, ["trainer.steps=7"]).trainer.steps == 7


@pytest.mark.parametrize("override", ["trainer.task=other", "loss.box=-1", "model.init_mode=zeros",
                                      "trainer.clip_min=9", "loss.use_consistency=maybe", "nosection.key=1"])
def test_invalid_train_config(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_dataset_split_errors(tmp_path):
    vids = list(generate_split(WorldConfig(height=32, width=32, num_entities=1, num_frames=2, floor_height=6,
                                           size_range=(6, 8)), 1, 0, "x"))
    write_dataset(tmp_path, {"train": vids})
    with pytest.raises(KeyError):
        load_split(tmp_path, "eval")
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "missing")
    (tmp_path / "x_000000" / "frames" / "00001.png").unlink()
    with pytest.raises(ValueError):
        load_video(tmp_path, "x_000000")
