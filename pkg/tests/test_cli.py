import json

import numpy as np
import pytest

from imbf import dataset, imageops
from imbf.cli import main
from imbf.dataset import ClassLabel, DatasetManifest, ManifestEntry, Split
from test_rebalance import TABLE4_ORIGINAL


def write_constant_tree(root, counts, seed=0):
    """Each subclass gets its own flat intensity, so the classes are trivially separable."""
    rng = np.random.default_rng(seed)
    levels = {"adenosis": 0.15, "fibroadenoma": 0.4, "ductal_carcinoma": 0.85, "lobular_carcinoma": 0.6}
    coarse = {"adenosis": "benign", "fibroadenoma": "benign", "ductal_carcinoma": "malignant", "lobular_carcinoma": "malignant"}
    for sub, n in counts.items():
        for i in range(n):
            img = np.full((8, 8, 3), levels[sub] + rng.uniform(-0.03, 0.03))
            imageops.save_png(img, root / coarse[sub] / sub / f"{i:03d}.png")


def run(*argv):
    return main([str(a) for a in argv])


def test_split_is_byte_identical(tiny_tree, tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run("split", "--root", tiny_tree, "--ratios", "0.8,0.1,0.1", "--seed", 7, "--out", a) == 0
    assert run("split", "--root", tiny_tree, "--ratios", "0.8,0.1,0.1", "--seed", 7, "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()
    m = dataset.read_manifest(a)
    assert len(m.in_split(Split.TRAIN)) == 8 + 16 + 32 + 5
    resolved = json.loads((tmp_path / "a.csv.config.json").read_text())
    assert resolved["seed"] == 7 and resolved["layout"] == "subclass-per-dir"


def test_split_bad_ratios_exit_2(tiny_tree, tmp_path, caplog):
    assert run("split", "--root", tiny_tree, "--ratios", "0.7,0.1,0.1", "--out", tmp_path / "m.csv") == 2
    assert "sum" in caplog.text
    assert not (tmp_path / "m.csv").exists()


def test_split_unknown_directory_exit_2(tmp_path):
    from conftest import write_tree

    write_tree(tmp_path / "d", {"benign/adenosis": 3, "stuff": 2})
    assert run("split", "--root", tmp_path / "d", "--out", tmp_path / "m.csv") == 2


def test_missing_required_flag_exit_2(tmp_path):
    assert run("split", "--out", tmp_path / "m.csv") == 2


def test_plan_table4_counts(tmp_path):
    entries = [
        ManifestEntry(f"{sub}/{i:04d}.png", f"x/{sub}/{i}.png", ClassLabel.of(sub), split=Split.TRAIN)
        for sub, n in TABLE4_ORIGINAL.items()
        for i in range(n)
    ]
    dataset.write_manifest(DatasetManifest(tuple(entries)), tmp_path / "m.csv")
    assert run("plan", "--manifest", tmp_path / "m.csv", "--seed", 1, "--out", tmp_path / "plan.json") == 0
    doc = json.loads((tmp_path / "plan.json").read_text())
    assert sum(c["target"] for c in doc["classes"]) == 9077
    assert doc["mean"] == "1581/2"


def test_plan_and_augment_balanced_is_noop(tmp_path):
    write_constant_tree(tmp_path / "d", {"adenosis": 10, "ductal_carcinoma": 10})
    m = tmp_path / "m.csv"
    assert run("split", "--root", tmp_path / "d", "--out", m) == 0
    assert run("plan", "--manifest", m, "--out", tmp_path / "p.json") == 0
    doc = json.loads((tmp_path / "p.json").read_text())
    assert all(c["copies_per_image"] == 0 and c["remainder"] == 0 for c in doc["classes"])
    out = tmp_path / "aug.csv"
    assert run("augment", "--manifest", m, "--plan", tmp_path / "p.json", "--out-dir", tmp_path / "aug", "--out", out) == 0
    assert out.read_bytes() == m.read_bytes()


def test_plan_targets_file(tmp_path):
    write_constant_tree(tmp_path / "d", {"adenosis": 10, "ductal_carcinoma": 20})
    m = tmp_path / "m.csv"
    assert run("split", "--root", tmp_path / "d", "--out", m) == 0
    (tmp_path / "t.json").write_text(json.dumps({"A": 20}))
    assert run("plan", "--manifest", m, "--strategy", f"targets={tmp_path / 't.json'}", "--out", tmp_path / "p.json") == 0
    doc = json.loads((tmp_path / "p.json").read_text())
    assert {c["name"]: c["target"] for c in doc["classes"]} == {"A": 20, "DC": 16}
    assert run("plan", "--manifest", m, "--strategy", "triple", "--out", tmp_path / "q.json") == 2


def test_augment_rejects_foreign_plan(tmp_path):
    write_constant_tree(tmp_path / "d", {"adenosis": 10, "ductal_carcinoma": 30})
    write_constant_tree(tmp_path / "e", {"adenosis": 12, "ductal_carcinoma": 30})
    m1, m2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
    assert run("split", "--root", tmp_path / "d", "--out", m1) == 0
    assert run("split", "--root", tmp_path / "e", "--out", m2) == 0
    assert run("plan", "--manifest", m2, "--out", tmp_path / "p.json") == 0
    rc = run("augment", "--manifest", m1, "--plan", tmp_path / "p.json", "--out-dir", tmp_path / "aug", "--out", tmp_path / "a.csv")
    assert rc == 2


def test_augment_jobs_byte_identical(tmp_path):
    write_constant_tree(tmp_path / "d", {"adenosis": 6, "lobular_carcinoma": 8, "ductal_carcinoma": 30})
    m = tmp_path / "m.csv"
    assert run("split", "--root", tmp_path / "d", "--seed", 3, "--out", m) == 0
    assert run("plan", "--manifest", m, "--seed", 3, "--out", tmp_path / "p.json") == 0
    for jobs in (1, 4):
        rc = run("augment", "--manifest", m, "--plan", tmp_path / "p.json", "--out-dir", tmp_path / f"aug{jobs}",
                 "--out", tmp_path / f"a{jobs}.csv", "--jobs", jobs)
        assert rc == 0
    files1 = sorted(p.relative_to(tmp_path / "aug1") for p in (tmp_path / "aug1").rglob("*.png"))
    files4 = sorted(p.relative_to(tmp_path / "aug4") for p in (tmp_path / "aug4").rglob("*.png"))
    assert files1 == files4 and len(files1) > 0
    for rel in files1:
        assert (tmp_path / "aug1" / rel).read_bytes() == (tmp_path / "aug4" / rel).read_bytes()
    rows1 = (tmp_path / "a1.csv").read_text().replace(str(tmp_path / "aug1"), "")
    rows4 = (tmp_path / "a4.csv").read_text().replace(str(tmp_path / "aug4"), "")
    assert rows1 == rows4


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli_train")
    write_constant_tree(tmp / "d", {"adenosis": 12, "fibroadenoma": 12, "ductal_carcinoma": 12, "lobular_carcinoma": 12})
    m = tmp / "m.csv"
    assert run("split", "--root", tmp / "d", "--seed", 1, "--out", m) == 0
    common = ["--manifest", m, "--resolution", 8, "--batch-size", 8, "--lr", 0.02, "--policy", "none", "--seed", 2]
    assert run("train", *common, "--task", "binary", "--epochs", 15, "--out", tmp / "bin.ckpt") == 0
    rc = run("train", *common, "--task", "multi", "--epochs", 3, "--init", f"from={tmp / 'bin.ckpt'}", "--out", tmp / "multi.ckpt")
    assert rc == 0
    return tmp


def test_train_outputs(trained):
    from imbf import train

    log = (trained / "bin.ckpt.epochs.jsonl").read_text().splitlines()
    assert len(log) == 15 and list(json.loads(log[0])) == ["epoch", "train_loss", "val_accuracy"]
    resolved = json.loads((trained / "bin.ckpt.config.json").read_text())
    assert resolved["epochs"] == 15 and resolved["class_weights"] == "on"
    multi = train.load_checkpoint(trained / "multi.ckpt")
    binary = train.load_checkpoint(trained / "bin.ckpt")
    assert multi.task == "multi" and multi.spec.out_dim == 4
    assert binary.task == "binary" and binary.spec.out_dim == 1


def test_evaluate_perfect_model_and_compare(trained):
    m = trained / "m.csv"
    out = trained / "rep.json"
    rc = run("evaluate", "--ckpt", trained / "bin.ckpt", "--manifest", m, "--split", "test", "--out", out,
             "--confusion-csv", trained / "cm.csv")
    assert rc == 0
    doc = json.loads(out.read_text())
    assert doc["accuracy"] == 1.0 and doc["task"] == "binary"
    assert (trained / "cm.csv").read_text().startswith("actual\\predicted,Benign,Malignant")
    assert run("report", "--compare", out, out, "--out", trained / "delta.json") == 0
    delta = json.loads((trained / "delta.json").read_text())
    assert delta["accuracy"] == 0
    assert all(v == 0 for c in delta["classes"] for k, v in c.items() if k != "name")


def test_train_bad_init_and_missing_checkpoint(trained):
    m = trained / "m.csv"
    assert run("train", "--manifest", m, "--init", "warm", "--out", trained / "x.ckpt") == 2
    assert run("train", "--manifest", m, "--init", f"from={trained / 'nope.ckpt'}", "--out", trained / "x.ckpt") == 2


def test_evaluate_non_checkpoint_exit_2(trained):
    bogus = trained / "bogus.ckpt"
    bogus.write_bytes(b"hello world, not a model")
    assert run("evaluate", "--ckpt", bogus, "--manifest", trained / "m.csv", "--out", trained / "r.json") == 2


def test_scale(capsys):
    assert run("scale", "--alpha", 2, "--beta", 1, "--gamma", 1, "--phi", 3) == 0
    out = capsys.readouterr().out
    assert "depth x8 " in out and "width x1 " in out and "resolution x1\n" in out
    assert "= 2 " in out and "OK" in out
    assert run("scale", "--alpha", 3, "--beta", 1, "--gamma", 1, "--strict") == 3
    assert "= 3 " in capsys.readouterr().out
    assert run("scale", "--alpha", 3, "--beta", 1, "--gamma", 1) == 0
    capsys.readouterr()
    assert run("scale", "--alpha", 1.7, "--beta", 1.3, "--gamma", 1.9, "--phi", 0) == 0
    assert "depth x1  width x1  resolution x1\n" in capsys.readouterr().out


def test_config_file_with_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"alpha": 2, "beta": 1, "gamma": 1, "phi": 1}))
    assert run("scale", "--config", cfg) == 0
    assert "depth x2 " in capsys.readouterr().out
    assert run("scale", "--config", cfg, "--phi", 3) == 0
    assert "depth x8 " in capsys.readouterr().out


def test_config_file_supplies_required_flags(tiny_tree, tmp_path):
    cfg = tmp_path / "c.json"
    out = tmp_path / "m.csv"
    cfg.write_text(json.dumps({"root": str(tiny_tree), "seed": 5, "out": str(out)}))
    assert run("split", "--config", cfg) == 0
    resolved = json.loads((tmp_path / "m.csv.config.json").read_text())
    assert resolved["seed"] == 5 and resolved["root"] == str(tiny_tree)


def test_bad_config_file_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("[1, 2]")
    assert run("scale", "--config", cfg) == 2
