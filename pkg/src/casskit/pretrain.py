"""Cross-architecture self-supervised pretraining.

One augmented view per image goes through both branches; the normalized
logit loss is back-propagated into both (no stop-gradient), each branch with
its own optimizer but the same settings and learning-rate schedule.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from .augment import VARIANTS, apply, apply_views, build_policy, sample_seed
from .backbones import BackboneSpec, DualBackbone, pair_backbones
from .checkpoint import Checkpoint, checkpoint_from_pair, state_to_numpy
from .errors import CassValidationError, ComparisonError, ConfigError, NonFiniteLossError
from .loss import LossConfig, cass_loss
from .reports import RunReport, dataset_digest, digest_of, hardware_tag
from .schedule import CosineSchedule, SWAState, cosine_lr, set_lr, swa_start_epoch, swa_update

OPTIMIZERS = {"adam": "adam", "adaptive_moment": "adam", "sgd": "sgd"}
COLLAPSE_STD = 1e-4
COLLAPSE_COS = 0.999
COLLAPSE_EPOCHS = 3


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 16
    optimizer_a: str = "adam"
    optimizer_b: str = "adam"
    base_lr: float = 1e-3
    lr_min: float = 1e-6
    t_max: int = 16
    schedule_unit: str = "epoch"
    warm_restarts: bool = False
    sgd_momentum: float = 0.9
    swa_enabled: bool = True
    swa_start_fraction: float = 0.75
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: str = "cass"
    seed: int = 0
    loader_workers: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.epochs < 1:
            raise ConfigError("must be >= 1", path="pretrain.epochs")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", path="pretrain.batch_size")
        if not self.base_lr > 0:
            raise ConfigError("must be > 0", path="pretrain.base_lr")
        for name in ("optimizer_a", "optimizer_b"):
            if getattr(self, name) not in OPTIMIZERS:
                raise ConfigError(f"unknown optimizer {getattr(self, name)!r}", path=f"pretrain.{name}")
        if self.schedule_unit not in ("epoch", "step"):
            raise ConfigError("must be 'epoch' or 'step'", path="pretrain.schedule_unit")
        if self.augmentation not in VARIANTS:
            raise ConfigError(f"unknown variant {self.augmentation!r}", path="pretrain.augmentation")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return digest_of(self.to_dict())

    def schedule(self) -> CosineSchedule:
        return CosineSchedule(self.base_lr, self.lr_min, self.t_max, self.warm_restarts)


# --------------------------------------------------------------------------
# collapse monitor
# --------------------------------------------------------------------------


@dataclass
class CollapseStats:
    std_a: float
    std_b: float
    cos_a: float
    cos_b: float

    @property
    def flagged(self) -> bool:
        return min(self.std_a, self.std_b) < COLLAPSE_STD or max(self.cos_a, self.cos_b) > COLLAPSE_COS


def _branch_stats(logits) -> tuple[float, float]:
    x = torch.as_tensor(np.asarray(logits) if not isinstance(logits, torch.Tensor) else logits)
    u = F.normalize(x.detach().to(torch.float64), dim=-1, eps=1e-8)
    B = u.shape[0]
    std = u.std(dim=0, unbiased=False).mean().item()
    gram = u @ u.T
    cos = ((gram.sum() - gram.diagonal().sum()) / (B * (B - 1))).item()
    return std, cos


def collapse_metric(logits_a, logits_b) -> CollapseStats:
    """Across-batch spread of each branch's normalized logits.

    ``std`` is the per-dimension population standard deviation over the batch,
    averaged over dimensions; ``cos`` is the mean off-diagonal cosine.
    """
    for x in (logits_a, logits_b):
        if x.shape[0] < 2:
            raise CassValidationError("collapse statistics need a batch of at least 2")
    sa, ca = _branch_stats(logits_a)
    sb, cb = _branch_stats(logits_b)
    return CollapseStats(sa, sb, ca, cb)


class CollapseMonitor:
    """Flags a run once per-epoch stats are degenerate for 3 epochs in a row."""

    def __init__(self, patience: int = COLLAPSE_EPOCHS):
        self.patience = patience
        self.streak = 0
        self.collapsed = False
        self.history: list[CollapseStats] = []

    def update(self, stats: CollapseStats) -> bool:
        self.history.append(stats)
        self.streak = self.streak + 1 if stats.flagged else 0
        self.collapsed |= self.streak >= self.patience
        return self.collapsed


def mean_stats(stats: list[CollapseStats]) -> CollapseStats:
    return CollapseStats(*(float(np.mean([getattr(s, f) for s in stats]))
                           for f in ("std_a", "std_b", "cos_a", "cos_b")))


# --------------------------------------------------------------------------
# steps
# --------------------------------------------------------------------------


@dataclass
class StepStats:
    step: int
    epoch: int
    loss: float
    lr: float
    grad_norm_a: float
    grad_norm_b: float
    collapse: CollapseStats | None = None
    wall_ms: float = 0.0
    logits_a: np.ndarray | None = field(default=None, repr=False)
    logits_b: np.ndarray | None = field(default=None, repr=False)

    def to_record(self) -> dict:
        return {
            "type": "step", "step": self.step, "epoch": self.epoch, "loss": self.loss, "lr": self.lr,
            "grad_norm_a": self.grad_norm_a, "grad_norm_b": self.grad_norm_b,
            "collapse_std_a": self.collapse.std_a if self.collapse else None,
            "collapse_std_b": self.collapse.std_b if self.collapse else None,
            "wall_ms": self.wall_ms,
        }


def make_optimizer(kind: str, params, lr: float, momentum: float = 0.9) -> torch.optim.Optimizer:
    if OPTIMIZERS[kind] == "adam":
        return torch.optim.Adam(params, lr=lr)
    return torch.optim.SGD(params, lr=lr, momentum=momentum)


@dataclass
class TrainState:
    optimizers: dict[str, torch.optim.Optimizer]
    schedule: CosineSchedule
    swa: dict[str, SWAState] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0

    def lr(self, unit: str) -> float:
        return cosine_lr(replace(self.schedule, step=self.epoch if unit == "epoch" else self.step))


def init_train_state(pair: DualBackbone, cfg: PretrainConfig) -> TrainState:
    opts = {
        "a": make_optimizer(cfg.optimizer_a, pair.branch_a.parameters(), cfg.base_lr, cfg.sgd_momentum),
        "b": make_optimizer(cfg.optimizer_b, pair.branch_b.parameters(), cfg.base_lr, cfg.sgd_momentum),
    }
    return TrainState(opts, cfg.schedule())


def grad_norm(module: torch.nn.Module) -> float:
    sq = [p.grad.detach().pow(2).sum() for p in module.parameters() if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


def pretrain_step(pair: DualBackbone, batch: torch.Tensor, cfg: PretrainConfig,
                  state: TrainState | None = None) -> StepStats:
    """Forward one batch of augmented views through both branches and update both."""
    if batch.ndim != 4 or batch.shape[0] == 0:
        raise CassValidationError(f"expected a nonempty (B, C, H, W) batch, got {tuple(batch.shape)}")
    state = state or init_train_state(pair, cfg)
    t0 = time.perf_counter()
    lr = state.lr(cfg.schedule_unit)
    for opt in state.optimizers.values():
        set_lr(opt, lr)
        opt.zero_grad(set_to_none=True)
    pair.train()
    R = pair.branch_a(batch)
    T = pair.branch_b(batch)
    finite = bool(torch.isfinite(R).all() and torch.isfinite(T).all())
    loss = cass_loss(R, T, cfg.loss) if finite else torch.tensor(float("nan"))
    if not torch.isfinite(loss):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}",
            snapshot={"step": state.step, "epoch": state.epoch, "lr": lr,
                      "logits_a": R.detach().numpy(), "logits_b": T.detach().numpy()},
        )
    loss.backward()
    gna, gnb = grad_norm(pair.branch_a), grad_norm(pair.branch_b)
    for opt in state.optimizers.values():
        opt.step()
    la, lb = R.detach().numpy().copy(), T.detach().numpy().copy()
    collapse = collapse_metric(la, lb) if batch.shape[0] >= 2 else None
    stats = StepStats(state.step, state.epoch, float(loss.detach()), lr, gna, gnb, collapse,
                      (time.perf_counter() - t0) * 1e3, la, lb)
    state.step += 1
    return stats


# --------------------------------------------------------------------------
# runs
# --------------------------------------------------------------------------


def _images(dataset):
    return dataset.samples if hasattr(dataset, "samples") else list(dataset)


def batch_iterator(samples, policy, cfg: PretrainConfig, epoch: int, views: int = 1):
    """Yield augmented batches for one epoch.

    Order and per-sample seeds depend only on (seed, epoch, index); a thread
    pool may augment ahead, unless ``CASSKIT_DETERMINISTIC=1``. A final
    batch of one image is merged into the batch before it.
    """
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
    workers = 0 if os.environ.get("CASSKIT_DETERMINISTIC") == "1" else cfg.loader_workers

    def aug(i):
        seed = sample_seed(cfg.seed, epoch, int(i))
        if views == 1:
            return [apply(policy, samples[i].image, seed).image]
        return [v.image for v in apply_views(policy, samples[i].image, seed)]

    if len(order) < 2:
        raise CassValidationError("pretraining needs at least 2 images")
    starts = list(range(0, len(order), cfg.batch_size))
    if len(order) - starts[-1] == 1 and len(starts) > 1:
        # a lone trailing image would break batchnorm; fold it into the previous batch
        starts.pop()
    bounds = list(zip(starts, starts[1:] + [len(order)]))

    pool = ThreadPoolExecutor(workers) if workers > 0 else None
    try:
        for start, stop in bounds:
            idx = order[start:stop]
            out = list(pool.map(aug, idx)) if pool else [aug(i) for i in idx]
            yield [torch.stack([o[v] for o in out]) for v in range(views)]
    finally:
        if pool:
            pool.shutdown()


def run_pretraining(cfg: PretrainConfig, dataset, spec_a: BackboneSpec | None = None,
                    spec_b: BackboneSpec | None = None, *, pair: DualBackbone | None = None,
                    run_id: str | None = None, keep_logits: bool = False) -> tuple[Checkpoint, RunReport]:
    """Train both branches in a single pass.

    Returns a checkpoint with both trained parameter sets (plus their SWA
    averages when enabled) and the run report.
    """
    samples = _images(dataset)
    if not samples:
        raise ConfigError("dataset is empty", path="dataset")
    if pair is None:
        if spec_a is None or spec_b is None:
            raise ConfigError("need either a pair or both backbone specs")
        pair = pair_backbones(spec_a, spec_b, cfg.seed)
    policy = build_policy(cfg.augmentation, pair.spec_a.input_size)
    torch.manual_seed(cfg.seed)
    state = init_train_state(pair, cfg)
    swa_start = swa_start_epoch(cfg.epochs, cfg.swa_start_fraction)
    swa = {"a": SWAState(swa_start), "b": SWAState(swa_start)}
    monitor = CollapseMonitor()
    report = RunReport(run_id or f"cass-{cfg.digest()}-s{cfg.seed}")
    hw = hardware_tag()
    report.log({"type": "config", "config": cfg.to_dict(), "policy": policy.to_json(),
                "specs": {"a": pair.spec_a.to_dict(), "b": pair.spec_b.to_dict()}})
    logged_logits = []
    t_run = time.perf_counter()
    for epoch in range(cfg.epochs):
        state.epoch = epoch
        t_ep = time.perf_counter()
        losses, cstats = [], []
        for (batch,) in batch_iterator(samples, policy, cfg, epoch):
            st = pretrain_step(pair, batch, cfg, state)
            losses.append(st.loss)
            if st.collapse is not None:
                cstats.append(st.collapse)
            report.log(st.to_record())
            if keep_logits:
                logged_logits.append((st.logits_a, st.logits_b))
        epoch_wall = time.perf_counter() - t_ep
        if cfg.swa_enabled and epoch >= swa_start:
            swa = {k: swa_update(swa[k], net) for k, net in pair.branches()}
        ep = mean_stats(cstats) if cstats else None
        if ep is not None:
            monitor.update(ep)
        report.log({"type": "epoch", "epoch": epoch, "loss": float(np.mean(losses)), "wall_s": epoch_wall,
                    "lr": state.lr(cfg.schedule_unit),
                    "collapse": asdict(ep) if ep else None, "collapse_flagged": bool(ep and ep.flagged)})
    total = time.perf_counter() - t_run
    epoch_losses = [r["loss"] for r in report.of_type("epoch")]
    report.log({
        "type": "summary", "total_wall_s": total, "epochs": cfg.epochs, "config_digest": cfg.digest(),
        "hardware_tag": hw, "dataset_digest": dataset_digest(samples), "steps": state.step,
        "initial_loss": epoch_losses[0], "final_loss": epoch_losses[-1], "collapsed": monitor.collapsed,
        "technique": "cass",
    })
    swa_params = None
    if cfg.swa_enabled and swa["a"].count:
        swa_params = {k: swa[k].average_as(state_to_numpy(net)) for k, net in pair.branches()}
    ckpt = checkpoint_from_pair(
        pair, state.step, cfg.digest(),
        {"schedule": replace(state.schedule, step=state.epoch if cfg.schedule_unit == "epoch" else state.step).to_dict(),
         "swa": {"count": swa["a"].count, "start_epoch": swa_start},
         "epochs": cfg.epochs, "config": cfg.to_dict()},
        swa_params,
    )
    if keep_logits:
        report.logits = logged_logits
    return ckpt, report


@dataclass
class TimeComparison:
    cass_s: float
    dino_total_s: float
    ratio: float

    def to_record(self):
        return {"type": "time_comparison", **asdict(self)}


def _report_key(report: RunReport):
    s = report.summary
    return s.get("epochs"), s.get("dataset_digest"), s.get("hardware_tag")


def compare_wallclock(cass_report, dino_report_a, dino_report_b) -> TimeComparison:
    """CASS time against the two separate DINO passes needed for the same two networks.

    Accepts reports or plain seconds (numbers skip the comparability check).
    """
    vals = [cass_report, dino_report_a, dino_report_b]
    if all(isinstance(v, RunReport) for v in vals):
        keys = [_report_key(v) for v in vals]
        labels = ("epochs", "dataset", "hardware")
        for i, lab in enumerate(labels):
            if len({k[i] for k in keys}) != 1:
                raise ComparisonError(f"reports differ in {lab}: {[k[i] for k in keys]}")
        vals = [v.summary["total_wall_s"] for v in vals]
    cass_s, a, b = (float(v) for v in vals)
    total = a + b
    if total <= 0:
        raise ComparisonError("DINO time must be positive")
    return TimeComparison(cass_s, total, cass_s / total)
