"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, config, inputs),
2 runtime failure. Every command writes under ``--out`` in one
subdirectory per run id.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .augment import VARIANTS, build_policy, eval_transform
from .backbones import build_backbone
from .checkpoint import Checkpoint, read_checkpoint, restore_branch, state_to_numpy, write_checkpoint
from .config import BASELINES, ExperimentConfig, dump_config, load_config
from .data import Dataset, write_image_folder
from .errors import CassValidationError, ConfigError
from .experiment import FORMATS, emit_table, load_dataset, make_split, run_experiment
from .finetune import evaluate, finetune
from .introspect import average_attention_maps, conv_layers, emit_artifact, extract_feature_maps
from .pretrain import run_pretraining

log = logging.getLogger("casskit")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(CassValidationError):
    pass


class Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; here that is a validation error
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, fractions: bool = False, baseline: bool = False):
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
    p.add_argument("--out", type=Path, default=None, help="output directory")
    p.add_argument("--variant", choices=VARIANTS, help="augmentation variant")
    if fractions:
        p.add_argument("--label-fraction", type=float, action="append", help="label fraction (repeatable)")
    if baseline:
        p.add_argument("--baseline", choices=BASELINES, action="append", help="baseline (repeatable)")


def build_parser() -> Parser:
    parser = Parser(prog="casskit", description="Cross-architecture self-supervised pretraining toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("pretrain", help="CASS pretraining of both branches in one pass")
    _common(p)

    p = sub.add_parser("finetune", help="fine-tune a branch at one or more label fractions")
    _common(p, fractions=True, baseline=True)
    p.add_argument("--checkpoint", type=Path, help="pretraining checkpoint (omit with --baseline supervised)")
    p.add_argument("--branch", choices=("a", "b"), action="append", help="branch to fine-tune (repeatable)")

    p = sub.add_parser("evaluate", help="score a fine-tuned model on the test split")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="fine-tuned model checkpoint")

    p = sub.add_parser("compare", help="seed sweep and comparison table")
    _common(p, fractions=True, baseline=True)
    p.add_argument("--format", choices=FORMATS, action="append", help="table format (repeatable)")

    p = sub.add_parser("visualize", help="feature maps or averaged class-attention maps")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--branch", choices=("a", "b"), default="a")
    p.add_argument("--samples", type=int, default=30, help="images averaged for attention maps")
    p.add_argument("--block", type=int, default=1, help="attention block, 1-based")
    p.add_argument("--layers", type=int, nargs="+", help="conv layers, 1-based (default: first five)")
    p.add_argument("--top-k", type=int, default=8)
    p.add_argument("--mode", choices=("raw", "heatmap", "overlay"), default="heatmap")

    p = sub.add_parser("synth-data", help="write the synthetic dataset as an image folder")
    _common(p)
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed:
        cfg = replace(cfg, seeds=list(args.seed))
    if args.variant:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, augmentation=args.variant))
    if getattr(args, "label_fraction", None):
        cfg = replace(cfg, label_fractions=list(args.label_fraction))
    if getattr(args, "baseline", None):
        cfg = replace(cfg, baselines=list(args.baseline))
    return cfg


def _out(args, cfg) -> Path:
    out = Path(args.out or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=str) + "\n")


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    dataset = load_dataset(cfg)
    for seed in cfg.seeds:
        split = make_split(cfg, dataset, seed)
        train = Dataset(dataset.subset(split.train), dataset.num_classes, dataset.multi_label)
        run_id = f"cass-pretrain-s{seed}"
        ckpt, report = run_pretraining(replace(cfg.pretrain, seed=seed), train,
                                       cfg.backbones["a"], cfg.backbones["b"], run_id=run_id)
        run_dir = out / run_id
        write_checkpoint(run_dir / "checkpoint.ckpt", ckpt)
        report.write(run_dir / "report.jsonl")
        (run_dir / "split.json").write_text(split.to_json())
        dump_config(cfg, run_dir / "config.yaml")
        s = report.summary
        print(f"{run_id}: loss {s['initial_loss']:.4f} -> {s['final_loss']:.4f}, "
              f"collapsed={s['collapsed']}, {s['total_wall_s']:.1f}s -> {run_dir / 'checkpoint.ckpt'}")
    return EXIT_OK


def _save_model(path: Path, model, spec, num_classes: int, step: int = 0) -> Path:
    spec = replace(spec, logit_width=num_classes, init_mode="random", pretrained_path=None)
    return write_checkpoint(path, Checkpoint({"a": spec}, {"a": state_to_numpy(model)}, step))


def cmd_finetune(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    supervised = "supervised" in (args.baseline or [])
    if args.checkpoint is None and not supervised:
        raise ConfigError("--checkpoint is required unless --baseline supervised", path="checkpoint")
    ckpt = read_checkpoint(args.checkpoint) if args.checkpoint else None
    dataset = load_dataset(cfg)
    branches = args.branch or (sorted(ckpt.specs) if ckpt else ["a", "b"])
    for seed in cfg.seeds:
        split = make_split(cfg, dataset, seed)
        for br in branches:
            spec = ckpt.specs[br] if ckpt else cfg.backbones[br]
            for frac in cfg.label_fractions:
                fcfg = replace(cfg.finetune, label_fraction=frac, seed=seed, branch=br)
                init = "supervised" if ckpt is None else "cass"
                run_id = f"{init}-ft-{br}-{spec.variant}-f{frac:g}-s{seed}"
                model, metrics, report = finetune(fcfg, ckpt, dataset, split, spec, run_id=run_id)
                run_dir = out / run_id
                _save_model(run_dir / "model.ckpt", model, spec, dataset.num_classes)
                report.write(run_dir / "report.jsonl")
                (run_dir / "split.json").write_text(split.to_json())
                _write_json(run_dir / "metrics.json", metrics.to_record())
                print(f"{run_id}: f1 {metrics.f1:.4f} balanced_accuracy {metrics.balanced_accuracy:.4f}")
    return EXIT_OK


def _load_model(path: Path, branch: str = "a"):
    ckpt = read_checkpoint(path)
    if branch not in ckpt.specs:
        raise ConfigError(f"checkpoint has no branch {branch!r}", path="branch")
    spec = ckpt.specs[branch]
    if spec.init_mode == "pretrained":
        spec = replace(spec, init_mode="random", pretrained_path=None)
    net = restore_branch(build_backbone(spec, 0), ckpt.branch_params(branch))
    return net, ckpt.specs[branch]


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    model, spec = _load_model(args.checkpoint)
    dataset = load_dataset(cfg)
    if spec.logit_width != dataset.num_classes:
        raise ConfigError(f"model predicts {spec.logit_width} classes, dataset has {dataset.num_classes}",
                          path="checkpoint")
    seed = cfg.seeds[0]
    split = make_split(cfg, dataset, seed)
    metrics = evaluate(model, dataset.subset(split.test), dataset.num_classes, spec.input_size,
                       multi_label=dataset.multi_label, seed=seed)
    rec = metrics.to_record()
    print(json.dumps(rec, indent=2, default=str))
    if args.out:
        _write_json(Path(args.out) / f"eval-{args.checkpoint.stem}-s{seed}" / "metrics.json", rec)
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    table = run_experiment(cfg, out)
    suffix = {"markdown": "md", "csv": "csv", "json": "json"}
    for fmt in args.format or FORMATS:
        emit_table(table, fmt, out / f"table.{suffix[fmt]}")
    print(emit_table(table, "markdown"), end="")
    for tc in table.time_comparisons:
        print(f"seed {tc['seed']}: CASS {tc['cass_s']:.1f}s vs DINO a+b {tc['dino_total_s']:.1f}s "
              f"(ratio {tc['ratio']:.3f})")
    for f in table.failures:
        print(f"FAILED {f}", file=sys.stderr)
    return EXIT_RUNTIME if table.failures else EXIT_OK


def cmd_visualize(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg)
    net, spec = _load_model(args.checkpoint, args.branch)
    dataset = load_dataset(cfg)
    samples = dataset.samples[: max(1, args.samples)]
    policy = build_policy("cass", spec.input_size)
    x = torch.stack([eval_transform(policy, s.image) for s in samples])
    demo = np.clip(np.asarray(samples[0].image, dtype=np.float64), 0, 1)
    run_dir = out / f"viz-{args.checkpoint.parent.name or args.checkpoint.stem}-{args.branch}"
    written = []
    if spec.family == "attention":
        amap = average_attention_maps(net, x, args.block, [s.id for s in samples])
        written += emit_artifact(amap, run_dir, f"attention-block{args.block}-avg{len(samples)}", demo, args.mode)
    else:
        n_conv = len(conv_layers(net))
        layers = args.layers or list(range(1, min(5, n_conv) + 1))
        for amap in extract_feature_maps(net, x[0], layers, args.top_k, samples[0].id):
            written += emit_artifact(amap, run_dir, f"feature-l{amap.index}-c{amap.channel}", demo, args.mode)
    for p in written:
        print(p)
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    if cfg.dataset.source != "synthetic":
        raise ConfigError("synth-data needs dataset.source: synthetic", path="dataset.source")
    out = _out(args, cfg)
    manifest = write_image_folder(load_dataset(cfg), out / f"synthetic-n{cfg.dataset.n}-s{cfg.dataset.seed}")
    print(manifest)
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "visualize": cmd_visualize,
    "synth-data": cmd_synth_data,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CassValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - anything else is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
