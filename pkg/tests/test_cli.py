import csv
import json

import numpy as np
import pytest
import yaml

from conftest import synthetic_images
from noveldec.cli import load_run_config, main
from noveldec.dataset import denormalize, write_idx


@pytest.fixture
def run_dir(tmp_path, monkeypatch):
    """An 8x8 two-class IDX dataset plus a toy run config."""
    monkeypatch.delenv("NOVELDEC_SEED", raising=False)
    blobs = synthetic_images(60, 8, 1, seed=0)[:, 0]
    rings = -synthetic_images(60, 8, 1, seed=1)[:, 0]
    images = denormalize(np.concatenate([blobs, rings]))
    labels = np.array([0] * 60 + [1] * 60, dtype=np.uint8)
    data = tmp_path / "data"
    data.mkdir()
    write_idx(data / "images.gz", images)
    write_idx(data / "labels.gz", labels)
    config = {
        "dataset": {"root": "data", "format": "IDX_PAIR", "train_files": ["images.gz", "labels.gz"], "image_size": 8},
        "target_class": 0,
        "protocol": "HOLDOUT_80_20",
        "seed": 0,
        "output_dir": "run",
        "train": {
            "epochs": 2,
            "batch_size": 16,
            "arch": {"latent_dim": 8, "image_size": 8, "channels": 1, "base_width": 4, "head_hidden": 16, "prior_hidden": [20, 10]},
        },
    }
    (tmp_path / "config.yaml").write_text(yaml.safe_dump(config))
    return tmp_path


def test_prepare_is_byte_identical(run_dir):
    cfg = str(run_dir / "config.yaml")
    assert main(["prepare", cfg, "--split-out", str(run_dir / "a.json")]) == 0
    assert main(["prepare", cfg, "--split-out", str(run_dir / "b.json")]) == 0
    a = (run_dir / "a.json").read_bytes()
    assert a == (run_dir / "b.json").read_bytes()
    split = json.loads(a)
    assert len(split["train"]) == 48  # 80% of 60


def test_bad_target_class_exits_2(run_dir, capsys):
    cfg = yaml.safe_load((run_dir / "config.yaml").read_text())
    cfg["target_class"] = 7
    (run_dir / "bad.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["prepare", str(run_dir / "bad.yaml")]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_key_exits_2(run_dir):
    cfg = yaml.safe_load((run_dir / "config.yaml").read_text())
    cfg["learning_rate"] = 0.1
    (run_dir / "bad.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["prepare", str(run_dir / "bad.yaml")]) == 2


def test_missing_data_exits_3(run_dir):
    (run_dir / "data" / "labels.gz").unlink()
    assert main(["prepare", str(run_dir / "config.yaml")]) == 3


def test_train_writes_outputs_and_manifest(run_dir):
    assert main(["train", str(run_dir / "config.yaml"), "--epochs", "1", "--ablate", "no_mi"]) == 0
    out = run_dir / "run"
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert len(rows) == 1
    manifest = json.loads((out / "run_manifest.json").read_text())
    resolved = manifest["resolved_train_config"]
    assert not (resolved["use_local_mi"] or resolved["use_global_mi"] or resolved["use_prior_mi"])
    assert manifest["seed"] == 0 and manifest["code_version"]
    assert (out / "checkpoint.pt").exists() and (out / "split.json").exists()

    # the manifest alone reproduces the run
    assert main(["train", str(out / "run_manifest.json"), "--out", str(run_dir / "again")]) == 0
    assert (run_dir / "again" / "metrics.csv").read_bytes() == (out / "metrics.csv").read_bytes()


def test_seed_precedence(run_dir, monkeypatch):
    monkeypatch.setenv("NOVELDEC_SEED", "5")
    assert main(["train", str(run_dir / "config.yaml"), "--epochs", "0"]) == 0
    assert json.loads((run_dir / "run" / "run_manifest.json").read_text())["seed"] == 5
    assert main(["train", str(run_dir / "config.yaml"), "--epochs", "0", "--seed", "9"]) == 0
    assert json.loads((run_dir / "run" / "run_manifest.json").read_text())["seed"] == 9
    monkeypatch.setenv("NOVELDEC_SEED", "abc")
    assert main(["prepare", str(run_dir / "config.yaml")]) == 2


def test_numeric_failure_exits_4(run_dir):
    cfg = yaml.safe_load((run_dir / "config.yaml").read_text())
    cfg["train"]["learning_rate"] = 1e12
    (run_dir / "hot.yaml").write_text(yaml.safe_dump(cfg))
    assert main(["train", str(run_dir / "hot.yaml"), "--epochs", "5"]) == 4


def test_eval_and_score(run_dir, capsys):
    cfg = str(run_dir / "config.yaml")
    assert main(["train", cfg, "--epochs", "30"]) == 0
    ckpt = str(run_dir / "run" / "checkpoint.pt")
    assert main(["eval", cfg, "--checkpoint", ckpt, "--out", str(run_dir / "ev")]) == 0
    for name in ("report.json", "scores.csv", "loss_curves.png", "score_histogram.png", "latent_projection.png"):
        assert (run_dir / "ev" / name).exists(), name
    with open(run_dir / "ev" / "scores.csv") as fh:
        assert next(csv.reader(fh))[:3] == ["id", "score", "label"]

    split = json.loads((run_dir / "run" / "split.json").read_text())
    rc = load_run_config(run_dir / "config.yaml")
    from noveldec.dataset import load_dataset

    by_id = {s.id: s for s in load_dataset(rc.dataset)}
    img = np.asarray(by_id[split["train"][0]].pixels)
    np.save(run_dir / "img.npy", img)
    np.save(run_dir / "inv.npy", -img)
    capsys.readouterr()
    assert main(["score", "--checkpoint", ckpt, str(run_dir / "img.npy")]) == 0
    assert main(["score", "--checkpoint", ckpt, str(run_dir / "inv.npy")]) == 0
    own, inverted = map(float, capsys.readouterr().out.split())
    assert own < inverted


def test_missing_checkpoint_leaves_no_outputs(run_dir):
    out = run_dir / "ev"
    assert main(["eval", str(run_dir / "config.yaml"), "--checkpoint", str(run_dir / "nope.pt"), "--out", str(out)]) == 3
    assert not out.exists()
    assert main(["score", "--checkpoint", str(run_dir / "nope.pt"), str(run_dir / "x.npy")]) == 3


def test_ablate_writes_summary(run_dir):
    assert main(["ablate", str(run_dir / "config.yaml"), "--grid", "full,no_mi", "--epochs", "1", "--seeds", "0", "1"]) == 0
    rows = list(csv.DictReader(open(run_dir / "run" / "ablation_summary.csv")))
    assert [(r["ablation"], r["seed"]) for r in rows] == [("full", "0"), ("full", "1"), ("no_mi", "0"), ("no_mi", "1")]
    assert all(0 <= float(r["auc"]) <= 1 for r in rows)
    assert main(["ablate", str(run_dir / "config.yaml"), "--grid", "bogus"]) == 2
