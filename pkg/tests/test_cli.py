import json
import shutil

import numpy as np
import pytest

from scasnet.cli import LADDER, build_parser, main
from scasnet.data import read_pgm
from scasnet.tensor import load_tensor


def run(*args):
    return main([str(a) for a in args])


def read_tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_parser_has_all_commands():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert set(sub) == {"gen-data", "train", "infer", "eval", "gradcheck", "ablate"}


def test_gen_data_echo_and_determinism(tmp_path, tiny_config, tiny_dataset):
    assert run("gen-data", "--config", tiny_config, "--out", tmp_path / "again") == 0
    assert read_tree(tmp_path / "again") == read_tree(tiny_dataset)
    echoed = json.loads((tiny_dataset / "config.json").read_text())
    assert echoed["data"]["train_scenes"] == 2
    run_manifest = json.loads((tiny_dataset / "run.json").read_text())
    assert run_manifest["command"] == "gen-data" and run_manifest["format_version"] == 1
    assert (tiny_dataset / "log.txt").is_file()


def test_gen_data_zero_scenes_is_config_error(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"train_scenes": 0}}))
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "x") == 2


def test_gen_data_unwritable(tmp_path, tiny_config):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run("gen-data", "--config", tiny_config, "--out", blocker / "sub") == 3


def test_invalid_key_rejected_before_compute(tmp_path, tiny_dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"learning_rate": 0.1}}))
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--data", tiny_dataset, "--out", out) == 2
    assert not out.exists()


def test_missing_dataset(tmp_path, tiny_config):
    assert run("train", "--config", tiny_config, "--data", tmp_path / "none", "--out", tmp_path / "r") == 3


def test_divergence_exit_code(tmp_path, tiny_config, tiny_dataset):
    doc = json.loads(tiny_config.read_text())
    doc["train"]["lr0"] = 1e6
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    with np.errstate(all="ignore"):
        assert run("train", "--config", cfg, "--data", tiny_dataset, "--out", tmp_path / "r") == 4


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_config, tiny_dataset):
    out = tmp_path_factory.mktemp("train") / "run"
    assert run("train", "--config", tiny_config, "--data", tiny_dataset, "--out", out) == 0
    return out


def test_train_outputs(trained):
    lines = (trained / "loss.csv").read_text().splitlines()
    assert lines[0] == "epoch,mean_loss,lr" and len(lines) == 5
    manifest = json.loads((trained / "checkpoint" / "manifest.json").read_text())
    assert manifest["epoch"] == 4 and len(manifest["loss_history"]) == 4
    assert (trained / "checkpoints" / "epoch_0002" / "manifest.json").is_file()


def test_train_rerun_byte_identical(tmp_path, tiny_config, tiny_dataset, trained):
    assert run("train", "--config", tiny_config, "--data", tiny_dataset, "--out", tmp_path / "r") == 0
    assert read_tree(tmp_path / "r") == read_tree(trained)


def test_resume_matches_uninterrupted(tmp_path, tiny_config, tiny_dataset, trained):
    out = tmp_path / "resumed"
    ck = trained / "checkpoints" / "epoch_0002"
    assert run("train", "--config", tiny_config, "--data", tiny_dataset, "--out", out, "--resume", ck) == 0
    assert (out / "loss.csv").read_text() == (trained / "loss.csv").read_text()
    assert read_tree(out / "checkpoint") == read_tree(trained / "checkpoint")


def test_resume_with_other_model_rejected(tmp_path, tiny_config, tiny_dataset, trained):
    doc = json.loads(tiny_config.read_text())
    doc["model"]["dropout"] = 0.1
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    ck = trained / "checkpoint"
    assert run("train", "--config", cfg, "--data", tiny_dataset, "--out", tmp_path / "r", "--resume", ck) == 2


def test_infer_eval_pipeline(tmp_path, tiny_config, tiny_dataset, trained):
    inf, ev = tmp_path / "inf", tmp_path / "ev"
    assert run("infer", "--config", tiny_config, "--data", tiny_dataset, "--checkpoint", trained / "checkpoint",
               "--out", inf) == 0
    probs = load_tensor(inf / "probs" / "test_0000.bin")
    side = json.loads((inf / "probs" / "test_0000.json").read_text())
    assert side["shape"] == list(probs.shape) == [5, 32, 32]
    assert np.abs(probs.sum(axis=0) - 1).max() <= 1e-6
    labels = read_pgm(inf / "labels" / "test_0000.pgm")
    assert np.array_equal(labels, np.argmax(probs, axis=0))
    assert run("eval", "--config", tiny_config, "--data", tiny_dataset, "--pred", inf, "--out", ev) == 0
    report = json.loads((ev / "report.json").read_text())
    assert 0 <= report["mean_iou"] <= 1
    assert (ev / "report.txt").is_file()
    assert (ev / "pr.csv").read_text().startswith("class,threshold,precision,recall\n")

    # rerun is byte-identical
    assert run("infer", "--config", tiny_config, "--data", tiny_dataset, "--checkpoint", trained / "checkpoint",
               "--out", tmp_path / "inf2") == 0
    assert run("eval", "--config", tiny_config, "--data", tiny_dataset, "--pred", tmp_path / "inf2",
               "--out", tmp_path / "ev2") == 0
    assert read_tree(inf) == read_tree(tmp_path / "inf2")
    assert read_tree(ev) == read_tree(tmp_path / "ev2")


def test_eval_perfect_prediction(tmp_path, tiny_config, tiny_dataset):
    pred = tmp_path / "pred" / "labels"
    pred.mkdir(parents=True)
    for split_file in sorted((tiny_dataset / "scenes" / "test").glob("*.pgm")):
        shutil.copy(split_file, pred / f"test_{split_file.stem}.pgm")
    assert run("eval", "--config", tiny_config, "--data", tiny_dataset, "--pred", tmp_path / "pred",
               "--out", tmp_path / "ev") == 0
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["mean_iou"] == 1.0 and report["mean_f1"] == 1.0 and report["overall_accuracy"] == 1.0


def test_infer_missing_checkpoint(tmp_path, tiny_config, tiny_dataset):
    assert run("infer", "--config", tiny_config, "--data", tiny_dataset, "--checkpoint", tmp_path / "none",
               "--out", tmp_path / "o") == 3


def test_gradcheck_command(tmp_path):
    assert run("gradcheck", "--out", tmp_path / "ok", "--samples", "40") == 0
    assert (tmp_path / "ok" / "gradcheck.txt").read_text().endswith("ALL PASS\n")
    assert run("gradcheck", "--out", tmp_path / "bad", "--samples", "40", "--inject-fault") != 0
    # the fault is removed afterwards
    assert run("gradcheck", "--out", tmp_path / "ok2", "--samples", "40") == 0


def test_ablate_ladder(tmp_path, tiny_config, tiny_dataset):
    doc = json.loads(tiny_config.read_text())
    doc["train"]["epochs"] = 1
    doc["infer"]["scales"] = [1.0]
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(doc))
    out = tmp_path / "abl"
    assert run("ablate", "--config", cfg, "--data", tiny_dataset, "--out", out) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["variant"] for r in rows] == [name for name, _ in LADDER]
    assert [r["variant"] for r in rows] == ["baseline", "MSC", "MSC+SC", "MSC+SC+CReC", "+Ref", "+Ref+RReC"]
    assert len((out / "ablation.csv").read_text().splitlines()) == 7
    # params grow as components are added
    assert rows[0]["params"] < rows[1]["params"] <= rows[2]["params"] < rows[3]["params"] < rows[4]["params"] < rows[5]["params"]


def test_threads_must_be_positive(tmp_path):
    assert run("gradcheck", "--out", tmp_path / "x", "--threads", "0") == 2
