import csv
import io
import json
import math

import numpy as np
import pytest

from casskit.backbones import default_spec
from casskit.config import DatasetConfig, ExperimentConfig
from casskit.errors import ConfigError, EmissionError
from casskit.experiment import (
    Cell, TableRecord, backbone_labels, build_table, emit_table, format_cell, render_table, run_experiment,
)
from casskit.finetune import FinetuneConfig
from casskit.pretrain import PretrainConfig


def rec(tech, bb, frac, seed, value, wall=None):
    return TableRecord(tech, bb, frac, seed, value, (f"{tech}-{bb}-{frac}-{seed}",), wall)


def test_mean_and_population_variance_example():
    t = build_table([rec("cass", "conv", 0.1, 0, 0.80), rec("cass", "conv", 0.1, 1, 0.90)])
    c = t.row("cass", "conv").cells[0.1]
    assert c.mean == pytest.approx(0.85) and c.spread() == pytest.approx(0.0025)
    assert c.spread("std") == pytest.approx(0.05)
    assert format_cell(c) == "0.8500±0.0025"


def test_two_seeds_one_fraction_two_rows():
    records = [rec("cass", b, 1.0, s, 0.5 + s / 10, wall=10.0 + s) for b in ("conv", "vit") for s in (0, 1)]
    t = build_table(records, seeds=[0, 1])
    assert [(r.technique, r.backbone) for r in t.rows] == [("cass", "conv"), ("cass", "vit")]
    assert t.rows[0].wall_s == 10.5
    assert t.run_ids() == sorted(r.run_ids[0] for r in records)


def test_missing_seed_is_flagged():
    t = build_table([rec("cass", "conv", 0.1, 0, 0.7)], seeds=[0, 1], fractions=[0.1, 1.0],
                    rows=[("dino", "conv")])
    assert [r.technique for r in t.rows] == ["dino", "cass"]
    c = t.row("cass", "conv").cells[0.1]
    assert c.flagged and c.missing == [1] and c.n == 1
    assert format_cell(c).endswith("*")
    assert format_cell(t.row("cass", "conv").cells[1.0]) == "n/a"
    assert math.isnan(Cell(0.5).mean)
    with pytest.raises(ConfigError):
        build_table([rec("cass", "conv", 0.3, 0, 0.7)], fractions=[0.1])


def small_table():
    records = [
        rec("cass", "conv", 0.1, 0, 0.80, 12.0), rec("cass", "conv", 0.1, 1, 0.90, 14.0),
        rec("cass", "conv", 1.0, 0, 0.95, 12.0), rec("cass", "conv", 1.0, 1, 0.97, 14.0),
        rec("supervised", "conv", 0.1, 0, 0.60), rec("supervised", "conv", 1.0, 0, 0.90),
    ]
    return build_table(records, seeds=[0, 1])


GOLDEN_MD = """\
| technique | backbone | 10% | 100% | wall-clock (s) |
|---|---|---|---|---|
| cass | conv | 0.8500±0.0025 | 0.9600±0.0001 | 13.0 |
| supervised | conv | 0.6000±0.0000* | 0.9000±0.0000* | n/a |

\\* missing one or more seeds
"""


def test_golden_markdown():
    assert render_table(small_table()) == GOLDEN_MD


def test_csv_round_trip():
    t = small_table()
    rows = list(csv.DictReader(io.StringIO(render_table(t, "csv"))))
    assert len(rows) == 2
    c = t.row("cass", "conv").cells[0.1]
    assert float(rows[0]["10% mean"]) == c.mean and float(rows[0]["10% variance"]) == c.spread()
    assert rows[1]["100% n"] == "1" and rows[1]["wall_s"] == ""


def test_json_emission(tmp_path):
    t = small_table()
    path = emit_table(t, "json", tmp_path / "t.json")
    d = json.loads(path.read_text())
    assert d["fractions"] == [0.1, 1.0] and d["spread"] == "variance"
    cell = d["rows"][0]["cells"][0]
    assert cell["values"] == {"0": 0.8, "1": 0.9} and cell["missing_seeds"] == []
    assert d["rows"][1]["cells"][0]["missing_seeds"] == [1]


def test_emission_errors():
    with pytest.raises(EmissionError):
        render_table(build_table([]))
    with pytest.raises(EmissionError):
        render_table(small_table(), "xlsx")


def test_backbone_labels():
    assert backbone_labels({"a": default_spec("conv"), "b": default_spec("attention")}) == \
        {"a": "tiny-conv4", "b": "tiny-vit2"}
    assert backbone_labels({"a": default_spec("conv"), "b": default_spec("conv")}) == \
        {"a": "tiny-conv4 (a)", "b": "tiny-conv4 (b)"}


def tiny_config(**kw):
    base = dict(
        dataset=DatasetConfig(n=40, classes=2, image_size=32),
        backbones={"a": default_spec("conv", 16, 32), "b": default_spec("attention", 16, 32, patch_size=8)},
        pretrain=PretrainConfig(epochs=1, batch_size=8),
        finetune=FinetuneConfig(max_epochs=1, batch_size=8),
        label_fractions=[1.0],
        seeds=[0, 1],
    )
    return ExperimentConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def swept(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    return run_experiment(tiny_config(), out_dir=out), out


def test_sweep_produces_rows_and_artifacts(swept):
    t, out = swept
    assert [(r.technique, r.backbone) for r in t.rows] == [("cass", "tiny-conv4"), ("cass", "tiny-vit2")]
    assert not t.failures
    for r in t.rows:
        c = r.cells[1.0]
        assert c.n == 2 and not c.flagged and 0 <= c.mean <= 1
        assert r.wall_s is not None and r.wall_s > 0
    for rid in t.run_ids():
        assert (out / rid / "report.jsonl").exists()
    assert (out / "cass-pretrain-s0" / "checkpoint.ckpt").exists()


def test_sweep_is_deterministic(swept):
    t, _ = swept
    again = run_experiment(tiny_config())
    assert [r.value for r in t.records] == [r.value for r in again.records]


def test_sweep_with_baselines():
    t = run_experiment(tiny_config(seeds=[0], baselines=["dino", "supervised"]))
    assert [r.technique for r in t.rows] == ["cass", "cass", "dino", "dino", "supervised", "supervised"]
    assert all(r.cells[1.0].n == 1 for r in t.rows)
    assert len(t.time_comparisons) == 1 and 0 < t.time_comparisons[0]["ratio"] < 1


def test_failures_are_recorded_not_fatal():
    # 0.01 of 28 training ids rounds to zero, so every fine-tune fails
    t = run_experiment(tiny_config(seeds=[0], label_fractions=[0.01, 1.0]))
    assert t.failures and all(f["fraction"] == 0.01 for f in t.failures)
    assert all(r.cells[0.01].flagged and r.cells[1.0].n == 1 for r in t.rows)
