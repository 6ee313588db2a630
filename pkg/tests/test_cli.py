import json
import subprocess
import sys

import pytest

from casskit.checkpoint import read_checkpoint
from casskit.cli import main

TINY = """
dataset: {n: 40, classes: 2, image_size: 32}
backbones:
  a: {family: conv, variant: tiny-conv4, input_size: 32, logit_width: 16}
  b: {family: attention, variant: tiny-vit2, input_size: 32, patch_size: 8, logit_width: 16}
pretrain: {epochs: 1, batch_size: 8}
finetune: {max_epochs: 1, batch_size: 8}
label_fractions: [1.0]
seeds: [0]
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    out = root / "out"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


def test_pretrain_layout(workspace):
    _, out = workspace
    run = out / "cass-pretrain-s0"
    assert {p.name for p in run.iterdir()} == {"checkpoint.ckpt", "report.jsonl", "split.json", "config.yaml"}
    assert set(read_checkpoint(run / "checkpoint.ckpt").specs) == {"a", "b"}


def test_finetune_evaluate_round_trip(workspace, capsys):
    cfg, out = workspace
    ckpt = out / "cass-pretrain-s0" / "checkpoint.ckpt"
    assert main(["finetune", "--config", str(cfg), "--out", str(out), "--checkpoint", str(ckpt),
                 "--branch", "b"]) == 0
    run = out / "cass-ft-b-tiny-vit2-f1-s0"
    assert {p.name for p in run.iterdir()} == {"model.ckpt", "report.jsonl", "split.json", "metrics.json"}
    saved = json.loads((run / "metrics.json").read_text())
    capsys.readouterr()
    assert main(["evaluate", "--config", str(cfg), "--checkpoint", str(run / "model.ckpt")]) == 0
    printed = json.loads(capsys.readouterr().out)
    assert printed["f1"] == pytest.approx(saved["f1"])
    assert printed["balanced_accuracy"] == pytest.approx(saved["balanced_accuracy"])


def test_supervised_finetune_needs_no_checkpoint(workspace):
    cfg, out = workspace
    assert main(["finetune", "--config", str(cfg), "--out", str(out), "--baseline", "supervised",
                 "--branch", "a"]) == 0
    assert (out / "supervised-ft-a-tiny-conv4-f1-s0" / "model.ckpt").exists()
    assert main(["finetune", "--config", str(cfg), "--out", str(out)]) == 1


@pytest.mark.parametrize("branch,expect", [("a", "feature-l1-c"), ("b", "attention-block1-avg5")])
def test_visualize(workspace, branch, expect):
    cfg, out = workspace
    ckpt = out / "cass-pretrain-s0" / "checkpoint.ckpt"
    assert main(["visualize", "--config", str(cfg), "--out", str(out), "--checkpoint", str(ckpt),
                 "--branch", branch, "--samples", "5", "--top-k", "2"]) == 0
    files = sorted(p.name for p in (out / f"viz-cass-pretrain-s0-{branch}").iterdir())
    assert any(f.startswith(expect) and f.endswith(".png") for f in files)
    assert any(f.startswith(expect) and f.endswith(".json") for f in files)


def test_compare_writes_tables(workspace, capsys):
    cfg, out = workspace
    dest = out / "cmp"
    assert main(["compare", "--config", str(cfg), "--out", str(dest), "--seed", "0", "--seed", "1"]) == 0
    assert {"table.md", "table.csv", "table.json"} <= {p.name for p in dest.iterdir()}
    text = capsys.readouterr().out
    assert text.startswith("| technique | backbone | 100% | wall-clock (s) |")
    assert json.loads((dest / "table.json").read_text())["seeds"] == [0, 1]


def test_compare_with_failed_cells_exits_two(workspace):
    cfg, out = workspace
    assert main(["compare", "--config", str(cfg), "--out", str(out / "cmp2"), "--label-fraction", "0.01"]) == 2


def test_synth_data(workspace):
    cfg, out = workspace
    assert main(["synth-data", "--config", str(cfg), "--out", str(out)]) == 0
    folder = out / "synthetic-n40-s0"
    assert (folder / "manifest.csv").exists() and len(list((folder / "images").iterdir())) == 40


@pytest.mark.parametrize("argv", [
    ["pretrain", "--bogus"],
    ["teleport"],
    ["pretrain", "--variant", "cass_turbo"],
    ["evaluate"],
    ["evaluate", "--checkpoint", "/nonexistent/model.ckpt"],
    ["pretrain", "--config", "/nonexistent/cfg.yaml"],
])
def test_validation_errors_exit_one(argv, capsys):
    assert main(argv) == 1
    assert "error" in capsys.readouterr().err


def test_bad_config_value_exits_one_with_path(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("pretrain: {epochs: x}\n")
    assert main(["pretrain", "--config", str(p), "--out", str(tmp_path)]) == 1
    assert "pretrain.epochs" in capsys.readouterr().err


def test_evaluate_class_count_mismatch(workspace, tmp_path):
    cfg, out = workspace
    other = tmp_path / "three.yaml"
    other.write_text(TINY.replace("classes: 2", "classes: 3"))
    dest = tmp_path / "ft"
    assert main(["finetune", "--config", str(cfg), "--out", str(dest), "--baseline", "supervised",
                 "--branch", "a"]) == 0
    model = dest / "supervised-ft-a-tiny-conv4-f1-s0" / "model.ckpt"
    assert main(["evaluate", "--config", str(other), "--checkpoint", str(model)]) == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "casskit.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("pretrain", "finetune", "evaluate", "compare", "visualize", "synth-data"):
        assert cmd in res.stdout
