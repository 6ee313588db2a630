"""Seed sweeps and comparison tables.

``run_experiment`` produces a flat list of :class:`TableRecord` (one per
fine-tuned model) and folds it into a :class:`ComparisonTable`. The fold is
pure, so tables can also be rebuilt from records gathered by separate
processes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbones import BackboneSpec
from .checkpoint import Checkpoint, state_to_numpy, write_checkpoint
from .config import ExperimentConfig
from .data import Dataset, DatasetSplit, load_image_folder, load_split_manifest, split_dataset, synth_dataset
from .dino import run_dino_pretraining
from .errors import CassError, ConfigError, EmissionError
from .finetune import finetune
from .pretrain import compare_wallclock, run_pretraining
from .reports import RunReport

log = logging.getLogger(__name__)

TECHNIQUES = ("cass", "dino", "supervised")
FORMATS = ("markdown", "csv", "json")


@dataclass(frozen=True)
class TableRecord:
    technique: str
    backbone: str
    fraction: float
    seed: int
    value: float
    run_ids: tuple[str, ...]
    wall_s: float | None = None


@dataclass
class Cell:
    fraction: float
    values: dict[int, float] = field(default_factory=dict)
    run_ids: dict[int, list[str]] = field(default_factory=dict)
    missing: list[int] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def flagged(self) -> bool:
        return bool(self.missing)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.values.values()))) if self.values else math.nan

    def spread(self, kind: str = "variance") -> float:
        if not self.values:
            return math.nan
        var = float(np.var(list(self.values.values())))  # population variance over seeds
        return var if kind == "variance" else math.sqrt(var)


@dataclass
class TableRow:
    technique: str
    backbone: str
    cells: dict[float, Cell]
    wall_s: float | None = None


@dataclass
class ComparisonTable:
    metric: str
    spread: str
    fractions: list[float]
    seeds: list[int]
    rows: list[TableRow] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)
    time_comparisons: list[dict] = field(default_factory=list)
    records: list[TableRecord] = field(default_factory=list)

    def row(self, technique: str, backbone: str) -> TableRow:
        for r in self.rows:
            if r.technique == technique and r.backbone == backbone:
                return r
        raise KeyError((technique, backbone))

    def run_ids(self) -> list[str]:
        return sorted({i for r in self.rows for c in r.cells.values() for ids in c.run_ids.values() for i in ids})


def build_table(records, *, metric: str = "f1", spread: str = "variance", fractions=None, seeds=None,
                rows=None, failures=(), time_comparisons=()) -> ComparisonTable:
    """Fold records into a table.

    Row order follows ``rows`` (pairs of technique and backbone) when given,
    else first appearance. A cell lacking any declared seed is flagged.
    """
    records = list(records)
    fractions = sorted(set(fractions if fractions is not None else (r.fraction for r in records)))
    seeds = list(seeds if seeds is not None else sorted({r.seed for r in records}))
    keys = list(rows or [])
    for r in records:
        if (r.technique, r.backbone) not in keys:
            keys.append((r.technique, r.backbone))
    table = ComparisonTable(metric, spread, fractions, seeds, failures=list(failures),
                            time_comparisons=list(time_comparisons), records=records)
    walls: dict[tuple, dict[int, float]] = {}
    for tech, bb in keys:
        table.rows.append(TableRow(tech, bb, {f: Cell(f) for f in fractions}))
    for r in records:
        row = table.row(r.technique, r.backbone)
        if r.fraction not in row.cells:
            raise ConfigError(f"record fraction {r.fraction} not among table fractions {fractions}")
        cell = row.cells[r.fraction]
        cell.values[r.seed] = float(r.value)
        cell.run_ids[r.seed] = list(r.run_ids)
        if r.wall_s is not None:
            walls.setdefault((r.technique, r.backbone), {})[r.seed] = r.wall_s
    for row in table.rows:
        for cell in row.cells.values():
            cell.missing = [s for s in seeds if s not in cell.values]
        w = walls.get((row.technique, row.backbone))
        row.wall_s = float(np.mean(list(w.values()))) if w else None
    return table


# --------------------------------------------------------------------------
# running
# --------------------------------------------------------------------------


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.source == "synthetic":
        return synth_dataset(d.n, d.classes, d.image_size, d.seed, noise=d.noise, class_weights=d.class_weights)
    result = load_image_folder(d.root, d.manifest)
    for err in result.errors:
        log.warning("skipped %s", err)
    if result.dataset is None:
        raise ConfigError("no decodable images", path="dataset.root")
    return result.dataset


def make_split(cfg: ExperimentConfig, dataset: Dataset, seed: int) -> DatasetSplit:
    if cfg.dataset.split_manifest:
        return load_split_manifest(cfg.dataset.split_manifest, dataset, seed)
    return split_dataset(dataset.samples, seed, dataset.num_classes)


def backbone_labels(specs: dict[str, BackboneSpec]) -> dict[str, str]:
    """Row labels per branch; identical variants are told apart by branch."""
    if specs["a"].variant == specs["b"].variant:
        return {k: f"{s.variant} ({k})" for k, s in specs.items()}
    return {k: s.variant for k, s in specs.items()}


def _save(out_dir, report: RunReport, ckpt: Checkpoint | None = None):
    if out_dir is None:
        return
    run_dir = Path(out_dir) / report.run_id
    report.write(run_dir / "report.jsonl")
    if ckpt is not None:
        write_checkpoint(run_dir / "checkpoint.ckpt", ckpt)


def _metric(report, name):
    return report.f1 if name == "f1" else report.balanced_accuracy


def run_seed(cfg: ExperimentConfig, dataset: Dataset, seed: int, out_dir=None,
             failures: list | None = None) -> tuple[list[TableRecord], list[dict]]:
    """Everything for one seed: pretrain, baselines, and every fine-tune."""
    failures = [] if failures is None else failures
    specs = cfg.backbones
    labels = backbone_labels(specs)
    split = make_split(cfg, dataset, seed)
    train = Dataset(dataset.subset(split.train), dataset.num_classes, dataset.multi_label)
    pcfg = replace(cfg.pretrain, seed=seed)
    records, comparisons = [], []

    def tune(technique, label, ckpt, branch, wall, pre_id=None, spec=None):
        for frac in cfg.label_fractions:
            fcfg = replace(cfg.finetune, label_fraction=frac, seed=seed, branch=branch)
            slug = re.sub(r"[^\w.]+", "-", label).strip("-")
            rid = f"{technique}-ft-{slug}-f{frac:g}-s{seed}"
            try:
                _, metrics, rep = finetune(fcfg, ckpt, dataset, split, spec, run_id=rid)
            except CassError as exc:
                failures.append({"seed": seed, "technique": technique, "backbone": label,
                                 "fraction": frac, "error": str(exc)})
                continue
            _save(out_dir, rep)
            ids = (pre_id, rid) if pre_id else (rid,)
            records.append(TableRecord(technique, label, frac, seed, _metric(metrics, cfg.metric), ids, wall))

    cass_report = None
    try:
        ckpt, cass_report = run_pretraining(pcfg, train, specs["a"], specs["b"], run_id=f"cass-pretrain-s{seed}")
    except CassError as exc:
        failures.append({"seed": seed, "technique": "cass", "error": str(exc)})
    else:
        _save(out_dir, cass_report, ckpt)
        if cass_report.summary["collapsed"]:
            log.warning("seed %d: CASS run flagged as collapsed", seed)
        for br in ("a", "b"):
            tune("cass", labels[br], ckpt, br, cass_report.summary["total_wall_s"], cass_report.run_id)

    if "dino" in cfg.baselines:
        dino_reports = {}
        for br in ("a", "b"):
            try:
                state, rep = run_dino_pretraining(pcfg, specs[br], train, seed_offset=0 if br == "a" else 1,
                                                 run_id=f"dino-pretrain-{br}-s{seed}")
            except CassError as exc:
                failures.append({"seed": seed, "technique": "dino", "backbone": labels[br], "error": str(exc)})
                continue
            dino_reports[br] = rep
            # one net per DINO pass, stored as a single-branch checkpoint
            ckpt = Checkpoint({"a": specs[br]}, {"a": state_to_numpy(state.student)}, state.step, pcfg.digest())
            _save(out_dir, rep, ckpt)
            tune("dino", labels[br], ckpt, "a", rep.summary["total_wall_s"], rep.run_id)
        if cass_report is not None and len(dino_reports) == 2:
            tc = compare_wallclock(cass_report, dino_reports["a"], dino_reports["b"])
            comparisons.append({"seed": seed, **asdict(tc)})

    if "supervised" in cfg.baselines:
        for br in ("a", "b"):
            tune("supervised", labels[br], None, br, None, spec=specs[br])
    return records, comparisons


def run_experiment(cfg: ExperimentConfig, out_dir=None, dataset: Dataset | None = None) -> ComparisonTable:
    """Seed sweep: CASS pretraining (plus the configured baselines) and
    fine-tuning of each branch at each label fraction.

    Failures are recorded per seed and never abort the sweep; affected cells
    are flagged as missing seeds.
    """
    dataset = dataset if dataset is not None else load_dataset(cfg)
    labels = backbone_labels(cfg.backbones)
    techniques = ["cass"] + [t for t in ("dino", "supervised") if t in cfg.baselines]
    rows = [(t, labels[b]) for t in techniques for b in ("a", "b")]
    records, failures, comparisons = [], [], []
    for seed in cfg.seeds:
        log.info("seed %d", seed)
        rec, comp = run_seed(cfg, dataset, seed, out_dir, failures)
        records += rec
        comparisons += comp
    return build_table(records, metric=cfg.metric, spread=cfg.spread, fractions=cfg.label_fractions,
                       seeds=cfg.seeds, rows=rows, failures=failures, time_comparisons=comparisons)


# --------------------------------------------------------------------------
# emission
# --------------------------------------------------------------------------


def fraction_label(f: float) -> str:
    return f"{f * 100:g}%"


def format_cell(cell: Cell, spread: str = "variance") -> str:
    if not cell.values:
        return "n/a"
    text = f"{cell.mean:.4f}±{cell.spread(spread):.4f}"
    return text + "*" if cell.flagged else text


def _markdown(table: ComparisonTable) -> str:
    head = ["technique", "backbone", *map(fraction_label, table.fractions), "wall-clock (s)"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for r in table.rows:
        wall = "n/a" if r.wall_s is None else f"{r.wall_s:.1f}"
        cells = [format_cell(r.cells[f], table.spread) for f in table.fractions]
        lines.append("| " + " | ".join([r.technique, r.backbone, *cells, wall]) + " |")
    if any(c.flagged for r in table.rows for c in r.cells.values()):
        lines.append("")
        lines.append("\\* missing one or more seeds")
    return "\n".join(lines) + "\n"


def _csv(table: ComparisonTable) -> str:
    head = ["technique", "backbone"]
    for f in table.fractions:
        lab = fraction_label(f)
        head += [f"{lab} mean", f"{lab} {table.spread}", f"{lab} n"]
    head.append("wall_s")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    for r in table.rows:
        row = [r.technique, r.backbone]
        for f in table.fractions:
            c = r.cells[f]
            row += [repr(c.mean), repr(c.spread(table.spread)), c.n]
        row.append("" if r.wall_s is None else repr(r.wall_s))
        w.writerow(row)
    return buf.getvalue()


def table_to_dict(table: ComparisonTable) -> dict:
    return {
        "metric": table.metric,
        "spread": table.spread,
        "fractions": table.fractions,
        "seeds": table.seeds,
        "rows": [{
            "technique": r.technique,
            "backbone": r.backbone,
            "wall_s": r.wall_s,
            "cells": [{"fraction": c.fraction, "mean": None if not c.values else c.mean,
                       table.spread: None if not c.values else c.spread(table.spread),
                       "values": {str(s): v for s, v in c.values.items()},
                       "run_ids": {str(s): ids for s, ids in c.run_ids.items()},
                       "missing_seeds": c.missing} for c in r.cells.values()],
        } for r in table.rows],
        "failures": table.failures,
        "time_comparisons": table.time_comparisons,
    }


def render_table(table: ComparisonTable, fmt: str = "markdown") -> str:
    if not table.rows or not table.fractions:
        raise EmissionError("table is empty")
    if fmt == "markdown":
        return _markdown(table)
    if fmt == "csv":
        return _csv(table)
    if fmt == "json":
        return json.dumps(table_to_dict(table), indent=2) + "\n"
    raise EmissionError(f"unknown format {fmt!r}; expected one of {FORMATS}")


def emit_table(table: ComparisonTable, fmt: str = "markdown", path=None) -> Path | str:
    """Render ``table``; write it to ``path`` when given and return the path."""
    text = render_table(table, fmt)
    if path is None:
        return text
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path
