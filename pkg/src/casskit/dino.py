"""Minimal DINO-style self-distillation baseline.

Two views per image; the student sees both, the momentum teacher sees both
under ``no_grad``. Teacher outputs are centred and sharpened, the student is
sharpened, and the cross-entropy is taken across views. The teacher only
moves by EMA of the student and the centre by EMA of teacher batch means.
Multi-crop is omitted; this exists for relative comparisons.
"""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, replace

import numpy as np
import torch
import torch.nn.functional as F

from .augment import build_policy
from .backbones import BackboneSpec, build_backbone
from .errors import ConfigError, NonFiniteLossError, ProtocolError
from .pretrain import PretrainConfig, batch_iterator, grad_norm, make_optimizer
from .reports import RunReport, dataset_digest, hardware_tag
from .schedule import cosine_lr, set_lr


@dataclass(frozen=True)
class DinoConfig:
    momentum: float = 0.996
    center_momentum: float = 0.9
    student_temp: float = 0.1
    teacher_temp: float = 0.04


class DinoBaselineState:
    def __init__(self, student: torch.nn.Module, cfg: PretrainConfig, dino: DinoConfig = DinoConfig()):
        self.student = student
        self.teacher = copy.deepcopy(student)
        for p in self.teacher.parameters():
            p.requires_grad_(False)
        width = student.head.out_features
        self.center = torch.zeros(width, dtype=torch.float64)
        self.dino = dino
        self.optimizer = make_optimizer(cfg.optimizer_a, student.parameters(), cfg.base_lr, cfg.sgd_momentum)
        self.schedule = cfg.schedule()
        self.step = 0
        self.epoch = 0


@dataclass
class DinoStepStats:
    step: int
    epoch: int
    loss: float
    lr: float
    grad_norm_student: float
    grad_norm_teacher: float
    batch_mean: np.ndarray
    center: np.ndarray
    wall_ms: float

    def to_record(self):
        return {"type": "step", "step": self.step, "epoch": self.epoch, "loss": self.loss, "lr": self.lr,
                "grad_norm_a": self.grad_norm_student, "grad_norm_b": self.grad_norm_teacher,
                "collapse_std_a": None, "collapse_std_b": None, "wall_ms": self.wall_ms}


def dino_loss(student_out, teacher_out, center, dino: DinoConfig):
    """Cross-entropy between centred/sharpened teacher and sharpened student, across views."""
    c = center.to(teacher_out[0].dtype)
    targets = [F.softmax((t - c) / dino.teacher_temp, dim=-1) for t in teacher_out]
    logps = [F.log_softmax(s / dino.student_temp, dim=-1) for s in student_out]
    terms = [-(targets[j] * logps[i]).sum(-1).mean()
             for i in range(len(logps)) for j in range(len(targets)) if i != j]
    return sum(terms) / len(terms)


def dino_baseline_step(state: DinoBaselineState, views, cfg: PretrainConfig) -> DinoStepStats:
    if len(views) != 2:
        raise ProtocolError(f"DINO baseline needs exactly two views per image, got {len(views)}")
    t0 = time.perf_counter()
    lr = cosine_lr(replace(state.schedule, step=state.epoch if cfg.schedule_unit == "epoch" else state.step))
    set_lr(state.optimizer, lr)
    state.optimizer.zero_grad(set_to_none=True)
    state.student.train()
    state.teacher.train()
    s_out = [state.student(v) for v in views]
    with torch.no_grad():
        t_out = [state.teacher(v) for v in views]
    loss = dino_loss(s_out, t_out, state.center, state.dino)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"non-finite DINO loss at step {state.step}", {"step": state.step})
    loss.backward()
    gs = grad_norm(state.student)
    gt = grad_norm(state.teacher)
    state.optimizer.step()
    m = state.dino.momentum
    with torch.no_grad():
        for pt, ps in zip(state.teacher.parameters(), state.student.parameters()):
            pt.copy_(m * pt + (1 - m) * ps)
        batch_mean = torch.cat(t_out).to(torch.float64).mean(dim=0)
        cm = state.dino.center_momentum
        state.center = cm * state.center + (1 - cm) * batch_mean
    stats = DinoStepStats(state.step, state.epoch, float(loss.detach()), lr, gs, gt,
                          batch_mean.numpy().copy(), state.center.numpy().copy(),
                          (time.perf_counter() - t0) * 1e3)
    state.step += 1
    return stats


def run_dino_pretraining(cfg: PretrainConfig, spec: BackboneSpec, dataset, dino: DinoConfig = DinoConfig(),
                         *, seed_offset: int = 0, run_id: str | None = None) -> tuple[DinoBaselineState, RunReport]:
    """One DINO pass trains one architecture; two passes are needed for two."""
    samples = dataset.samples if hasattr(dataset, "samples") else list(dataset)
    if not samples:
        raise ConfigError("dataset is empty", path="dataset")
    torch.manual_seed(cfg.seed)
    student = build_backbone(spec, cfg.seed + seed_offset)
    state = DinoBaselineState(student, cfg, dino)
    policy = build_policy("dino_like", spec.input_size)
    report = RunReport(run_id or f"dino-{spec.variant}-s{cfg.seed}")
    report.log({"type": "config", "config": cfg.to_dict(), "dino": asdict(dino), "spec": spec.to_dict()})
    t_run = time.perf_counter()
    epoch_losses = []
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        t_ep = time.perf_counter()
        losses = []
        for views in batch_iterator(samples, policy, cfg, epoch, views=2):
            st = dino_baseline_step(state, views, cfg)
            losses.append(st.loss)
            report.log(st.to_record())
        epoch_losses.append(float(np.mean(losses)))
        report.log({"type": "epoch", "epoch": epoch, "loss": epoch_losses[-1],
                    "wall_s": time.perf_counter() - t_ep})
    report.log({
        "type": "summary", "total_wall_s": time.perf_counter() - t_run, "epochs": cfg.epochs,
        "config_digest": cfg.digest(), "hardware_tag": hardware_tag(),
        "dataset_digest": dataset_digest(samples), "steps": state.step,
        "initial_loss": epoch_losses[0], "final_loss": epoch_losses[-1], "technique": "dino",
    })
    return state, report
