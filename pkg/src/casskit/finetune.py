"""End-to-end supervised fine-tuning with class-weighted focal loss."""

from __future__ import annotations

import copy
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .augment import apply, build_policy, eval_transform, sample_seed
from .backbones import BackboneSpec, build_backbone
from .checkpoint import Checkpoint, restore_branch
from .data import Dataset, DatasetSplit, label_fraction_view
from .errors import CassValidationError, ConfigError
from .metrics import MetricReport, confusion_counts, metric_report, multilabel_counts
from .reports import RunReport, digest_of, hardware_tag
from .schedule import CosineSchedule, cosine_lr, set_lr


@dataclass
class FocalConfig:
    alpha: float = 1.0
    gamma: float = 2.0
    class_weights: list[float] | None = None

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0", path="focal.gamma")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if not np.isfinite(w).all() or (w < 0).any() or not (w > 0).any():
                raise ConfigError("class weights must be finite, nonnegative, one positive",
                                  path="focal.class_weights")


def class_weights_from_distribution(counts, floor: float = 0.05, mode: str = "inverse") -> np.ndarray:
    """Min-max normalised class weights, clamped below at ``floor``.

    ``mode="inverse"`` normalises inverse class frequencies, so the rarest
    class gets 1 and the majority class the floor. ``mode="frequency"``
    normalises the raw frequencies instead. Equal counts give all ones.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ConfigError("need counts for at least 2 classes")
    if (counts < 0).any() or counts.sum() <= 0:
        raise ConfigError("counts must be nonnegative with a positive total")
    if mode == "inverse":
        with np.errstate(divide="ignore"):
            x = np.where(counts > 0, 1.0 / np.where(counts > 0, counts, 1.0), np.inf)
        finite = np.isfinite(x)
        top = x[finite].max() if finite.any() else 1.0
        x = np.where(finite, x, top)
    elif mode == "frequency":
        x = counts / counts.sum()
    else:
        raise ConfigError(f"unknown weight mode {mode!r}")
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.ones_like(x)
    return np.maximum((x - lo) / (hi - lo), floor)


def _weights(cfg: FocalConfig, k: int, like):
    if cfg.class_weights is None:
        w = np.ones(k)
    else:
        w = np.asarray(cfg.class_weights, dtype=np.float64)
        if len(w) != k:
            raise CassValidationError(f"{len(w)} class weights for {k} classes")
    if isinstance(like, torch.Tensor):
        return torch.as_tensor(w, dtype=like.dtype)
    return w


def focal_loss(probabilities, targets, cfg: FocalConfig = FocalConfig()):
    """Mean over the batch of ``w_y * alpha * (1 - p_y)**gamma * -log(p_y)``.

    With 2-D ``targets`` (binary, same shape as ``probabilities``) each
    class is an independent binary problem on element-wise probabilities and
    the mean runs over all elements.
    """
    is_t = isinstance(probabilities, torch.Tensor)
    P = probabilities if is_t else np.asarray(probabilities, dtype=np.float64)
    lib = torch if is_t else np
    if P.ndim != 2:
        raise CassValidationError("probabilities must be (B, K)")
    if ((P < 0) | (P > 1)).any():
        raise CassValidationError("probabilities outside [0, 1]")
    B, K = P.shape
    w = _weights(cfg, K, P)
    tg = targets if isinstance(targets, torch.Tensor) else np.asarray(targets)
    if tg.ndim == 2:
        if tuple(tg.shape) != (B, K) or ((tg != 0) & (tg != 1)).any():
            raise CassValidationError("multi-label targets must be a (B, K) 0/1 matrix")
        y = tg.to(P.dtype) if is_t else tg.astype(np.float64)
        pt = y * P + (1 - y) * (1 - P)
        term = w * cfg.alpha * (1 - pt) ** cfg.gamma * -lib.log(pt)
        return term.mean()
    s = P.sum(1)
    if (lib.abs(s - 1) > 1e-5).any():
        raise CassValidationError("probability rows must sum to 1 within 1e-5")
    if tg.shape != (B,) or (tg < 0).any() or (tg >= K).any():
        raise CassValidationError("targets must be class indices in [0, K)")
    idx = tg.long() if is_t else tg.astype(np.int64)
    py = P[lib.arange(B), idx]
    return (w[idx] * cfg.alpha * (1 - py) ** cfg.gamma * -lib.log(py)).mean()


def focal_loss_from_logits(logits: torch.Tensor, targets: torch.Tensor, cfg: FocalConfig = FocalConfig()):
    """Numerically stable :func:`focal_loss` on raw logits (softmax or, for 2-D targets, sigmoid)."""
    w = _weights(cfg, logits.shape[1], logits)
    if targets.ndim == 2:
        y = targets.to(logits.dtype)
        logp = F.logsigmoid(logits)
        log1mp = F.logsigmoid(-logits)
        logpt = y * logp + (1 - y) * log1mp
        term = w * cfg.alpha * (1 - logpt.exp()) ** cfg.gamma * -logpt
        return term.mean()
    logpt = F.log_softmax(logits, dim=1).gather(1, targets.long()[:, None])[:, 0]
    return (w[targets.long()] * cfg.alpha * (1 - logpt.exp()) ** cfg.gamma * -logpt).mean()


class EarlyStopping:
    """Validation-loss patience; epochs are 1-based.

    An epoch improves when its loss is below the best by at least ``min_delta``.
    """

    def __init__(self, patience: int = 5, min_delta: float = 1e-6):
        if patience < 1:
            raise ConfigError("patience must be >= 1", path="finetune.patience")
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = 0
        self.epoch = 0
        self.stale = 0

    def update(self, val_loss: float) -> bool:
        self.epoch += 1
        if val_loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.stale = val_loss, self.epoch, 0
        else:
            self.stale += 1
        return self.should_stop

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class FinetuneConfig:
    max_epochs: int = 50
    patience: int = 5
    lr: float = 3e-4
    lr_min: float = 0.0
    batch_size: int = 16
    focal: FocalConfig = field(default_factory=FocalConfig)
    weight_floor: float = 0.05
    weight_mode: str = "inverse"
    label_fraction: float = 1.0
    seed: int = 0
    branch: str = "a"
    use_swa: bool = True
    augmentation: str | None = "cass"
    multi_label: bool = False
    min_delta: float = 1e-6

    def __post_init__(self):
        if isinstance(self.focal, dict):
            self.focal = FocalConfig(**self.focal)
        if not 0 < self.label_fraction <= 1:
            raise ConfigError("must be in (0, 1]", path="finetune.label_fraction")
        if self.patience < 1:
            raise ConfigError("must be >= 1", path="finetune.patience")
        if self.max_epochs < 1:
            raise ConfigError("must be >= 1", path="finetune.max_epochs")
        if self.branch not in ("a", "b"):
            raise ConfigError("must be 'a' or 'b'", path="finetune.branch")

    def to_dict(self):
        return asdict(self)


def build_classifier(spec: BackboneSpec, num_classes: int, params: dict | None = None, seed: int = 0) -> nn.Module:
    """Backbone (optionally with pretrained weights) plus a fresh ``num_classes`` head."""
    if params is not None and spec.init_mode == "pretrained":
        spec = BackboneSpec(**{**spec.to_dict(), "init_mode": "random", "pretrained_path": None})
    net = build_backbone(spec, seed)
    if params is not None:
        restore_branch(net, params)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed + 7919)
        net.head = nn.Linear(net.feature_dim, num_classes)
    net.spec = spec
    return net


def _targets(samples, num_classes, multi_label):
    if multi_label:
        y = torch.zeros(len(samples), num_classes)
        for i, s in enumerate(samples):
            y[i, list(s.label if isinstance(s.label, tuple) else (s.label,))] = 1
        return y
    return torch.tensor([int(s.label) for s in samples], dtype=torch.long)


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, multi_label: bool = False, batch_size: int = 64):
    model.eval()
    logits = torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])
    return logits, ((logits > 0).long() if multi_label else logits.argmax(1))


def evaluate(model: nn.Module, samples, num_classes: int, input_size: int, *, multi_label: bool = False,
             label_fraction=None, seed=None) -> MetricReport:
    policy = build_policy("cass", input_size)
    x = torch.stack([eval_transform(policy, s.image) for s in samples])
    _, pred = predict(model, x, multi_label)
    y = _targets(samples, num_classes, multi_label)
    counts = multilabel_counts(y.numpy(), pred.numpy()) if multi_label else \
        confusion_counts(y.numpy(), pred.numpy(), num_classes)
    return metric_report(counts, label_fraction=label_fraction, seed=seed)


def finetune(cfg: FinetuneConfig, checkpoint: Checkpoint | None, dataset: Dataset, split: DatasetSplit,
             spec: BackboneSpec | None = None, *, run_id: str | None = None):
    """Train every parameter of one branch on a labelled fraction of the training split.

    ``checkpoint=None`` gives the random-init supervised baseline (then
    ``spec`` is required). Training stops at ``max_epochs`` or after
    ``patience`` epochs without validation improvement; the best-validation
    weights are restored and scored on the test split.

    Returns ``(model, MetricReport, RunReport)``.
    """
    if checkpoint is not None:
        spec = checkpoint.specs[cfg.branch]
        params = checkpoint.branch_params(cfg.branch, cfg.use_swa)
        source = "pretrained"
    elif spec is None:
        raise ConfigError("need a checkpoint or a backbone spec")
    else:
        params, source = None, "random"
    view = label_fraction_view(split, cfg.label_fraction, cfg.seed)
    if not view.ids:
        raise ConfigError("label-fraction view is empty", path="finetune.label_fraction")
    K = dataset.num_classes
    train_s = dataset.subset(view.ids)
    val_s = dataset.subset(split.val) if split.val else train_s
    test_s = dataset.subset(split.test)

    focal = cfg.focal
    if focal.class_weights is None:
        focal = FocalConfig(focal.alpha, focal.gamma, list(class_weights_from_distribution(
            np.maximum(dataset.class_counts(view.ids), 0), cfg.weight_floor, cfg.weight_mode)))

    torch.manual_seed(cfg.seed)
    model = build_classifier(spec, K, params, cfg.seed)
    for p in model.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    sched = CosineSchedule(cfg.lr, cfg.lr_min, cfg.max_epochs)
    policy = build_policy(cfg.augmentation or "cass", spec.input_size)
    if cfg.augmentation is None:
        policy = policy.with_probabilities(0.0)
    x_val = torch.stack([eval_transform(policy, s.image) for s in val_s])
    y_val = _targets(val_s, K, cfg.multi_label)
    y_train = _targets(train_s, K, cfg.multi_label)

    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best_state = copy.deepcopy(model.state_dict())
    report = RunReport(run_id or f"ft-{source}-{spec.variant}-f{cfg.label_fraction}-s{cfg.seed}")
    report.log({"type": "config", "config": cfg.to_dict(), "spec": spec.to_dict(), "init": source,
                "class_weights": focal.class_weights})
    step = 0
    t_run = time.perf_counter()
    for epoch in range(cfg.max_epochs):
        lr = sched.lr(epoch)
        set_lr(opt, lr)
        model.train()
        order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(train_s))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb = torch.stack([apply(policy, train_s[i].image, sample_seed(cfg.seed, 1000 + epoch, int(i))).image
                              for i in idx])
            if len(idx) == 1:
                # batchnorm needs two samples per channel in training mode
                model.eval()
            t0 = time.perf_counter()
            loss = focal_loss_from_logits(model(xb), y_train[idx], focal)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.train()
            losses.append(float(loss.detach()))
            report.log({"type": "step", "step": step, "epoch": epoch, "loss": losses[-1], "lr": lr,
                        "grad_norm_a": None, "grad_norm_b": None, "collapse_std_a": None,
                        "collapse_std_b": None, "wall_ms": (time.perf_counter() - t0) * 1e3})
            step += 1
        with torch.no_grad():
            logits, _ = predict(model, x_val, cfg.multi_label)
            val_loss = float(focal_loss_from_logits(logits, y_val, focal))
        stop = stopper.update(val_loss)
        if stopper.best_epoch == stopper.epoch:
            best_state = copy.deepcopy(model.state_dict())
        report.log({"type": "epoch", "epoch": epoch, "train_loss": float(np.mean(losses)),
                    "val_loss": val_loss, "lr": lr})
        if stop:
            break
    model.load_state_dict(best_state)
    metrics = evaluate(model, test_s, K, spec.input_size, multi_label=cfg.multi_label,
                       label_fraction=cfg.label_fraction, seed=cfg.seed)
    report.log({"type": "summary", "total_wall_s": time.perf_counter() - t_run, "epochs": stopper.epoch,
                "best_epoch": stopper.best_epoch, "config_digest": digest_of(cfg.to_dict()),
                "hardware_tag": hardware_tag(), "init": source})
    report.log(metrics.to_record())
    return model, metrics, report

