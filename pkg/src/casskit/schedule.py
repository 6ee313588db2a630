"""Cosine learning-rate schedule and stochastic weight averaging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import StateError


@dataclass
class CosineSchedule:
    lr_max: float = 1e-3
    lr_min: float = 1e-6
    t_max: int = 16
    warm_restarts: bool = False
    step: int = 0

    def lr(self, step: int | None = None) -> float:
        return cosine_lr(self if step is None else CosineSchedule(
            self.lr_max, self.lr_min, self.t_max, self.warm_restarts, step))

    def advance(self) -> float:
        self.step += 1
        return self.lr()

    def to_dict(self):
        return {"lr_max": self.lr_max, "lr_min": self.lr_min, "t_max": self.t_max,
                "warm_restarts": self.warm_restarts, "step": self.step}


def cosine_lr(state: CosineSchedule) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at ``t_max``.

    Past ``t_max`` the rate stays at ``lr_min`` unless ``warm_restarts`` is
    set, in which case the cycle restarts. Written as a convex blend so both
    endpoints are exact in floating point.
    """
    if state.step < 0:
        raise StateError(f"schedule step must be >= 0, got {state.step}")
    if state.t_max <= 0:
        return state.lr_max
    s = state.step % state.t_max if state.warm_restarts else min(state.step, state.t_max)
    w = 0.5 * (1.0 + math.cos(math.pi * s / state.t_max))
    lr = w * state.lr_max + (1.0 - w) * state.lr_min
    return min(max(lr, state.lr_min), state.lr_max)


def set_lr(optimizer: torch.optim.Optimizer, lr: float):
    for g in optimizer.param_groups:
        g["lr"] = lr


@dataclass
class SWAState:
    """Running arithmetic mean of parameter snapshots.

    Sums are kept in float64 and divided on read, so the average after ``k``
    snapshots is the plain mean ``sum / k``.
    """

    start_epoch: int = 0
    count: int = 0
    sums: dict[str, np.ndarray] = field(default_factory=dict)

    def average(self) -> dict[str, np.ndarray]:
        if not self.count:
            raise StateError("no snapshots recorded")
        return {k: v / self.count for k, v in self.sums.items()}

    def average_as(self, like: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Average cast back to the dtypes of ``like`` (integer buffers keep ``like``'s value)."""
        avg = self.average()
        out = {}
        for k, ref in like.items():
            ref = np.asarray(ref)
            out[k] = ref.copy() if not np.issubdtype(ref.dtype, np.floating) else avg[k].astype(ref.dtype)
        return out


def _to_numpy(params) -> dict[str, np.ndarray]:
    if isinstance(params, torch.nn.Module):
        params = params.state_dict()
    return {k: (v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v))
            for k, v in params.items()}


def swa_update(state: SWAState, params) -> SWAState:
    """Fold one snapshot (mapping name -> array, or a module) into ``state``."""
    snap = _to_numpy(params)
    if state.count:
        if set(snap) != set(state.sums):
            raise StateError("snapshot parameter names differ from the running average")
        for k, v in snap.items():
            if v.shape != state.sums[k].shape:
                raise StateError(f"shape mismatch for {k}: {v.shape} vs {state.sums[k].shape}")
    sums = {k: (state.sums[k] if state.count else 0.0) + v.astype(np.float64) for k, v in snap.items()}
    return SWAState(state.start_epoch, state.count + 1, sums)


def swa_start_epoch(epochs: int, fraction: float = 0.75) -> int:
    return min(epochs - 1, int(math.floor(fraction * epochs)))
