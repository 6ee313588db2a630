"""Normalized-logit similarity loss between the two branches.

Per sample the loss is ``2 - 2 * <F(r), F(t)>`` with
``F(x) = x / max(||x||_2, eps)``; the batch value is the mean over samples.
Numpy inputs go through a float64 numpy path (which also accepts extra
leading axes); torch inputs stay in autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import CassValidationError

HEADS = ("none", "softmax", "sigmoid")


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 1e-8
    head: str = "none"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise CassValidationError(f"epsilon must be > 0, got {self.epsilon}")
        if self.head not in HEADS:
            raise CassValidationError(f"unknown head {self.head!r}; expected one of {HEADS}")


def _check(x, name="logits"):
    finite = torch.isfinite(x).all() if isinstance(x, torch.Tensor) else np.isfinite(x).all()
    if not finite:
        raise CassValidationError(f"{name} contain non-finite values")
    if x.ndim < 2:
        raise CassValidationError(f"{name} must be (B, N), got shape {tuple(x.shape)}")


def _as_array(x):
    return x if isinstance(x, torch.Tensor) else np.asarray(x, dtype=np.float64)


def normalize_logits(x, epsilon: float = 1e-8):
    """Divide each row by ``max(||row||_2, epsilon)``."""
    x = _as_array(x)
    _check(x)
    if isinstance(x, torch.Tensor):
        return F.normalize(x, dim=-1, eps=epsilon)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), epsilon)


def apply_head(x, head: str):
    if head == "none":
        return x
    if isinstance(x, torch.Tensor):
        return x.softmax(dim=-1) if head == "softmax" else torch.sigmoid(x)
    if head == "softmax":
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    return 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-free sigmoid


def per_sample_loss(R, T, cfg: LossConfig = LossConfig()):
    R, T = _as_array(R), _as_array(T)
    _check(R, "R")
    _check(T, "T")
    if R.shape != T.shape:
        raise CassValidationError(f"shape mismatch: R {tuple(R.shape)} vs T {tuple(T.shape)}")
    u = normalize_logits(apply_head(R, cfg.head), cfg.epsilon)
    v = normalize_logits(apply_head(T, cfg.head), cfg.epsilon)
    cos = (u * v).sum(-1)
    # rounding can push |cos| a hair past 1
    cos = cos.clamp(-1.0, 1.0) if isinstance(cos, torch.Tensor) else np.clip(cos, -1.0, 1.0)
    return 2.0 - 2.0 * cos


def cass_loss(R, T, cfg: LossConfig = LossConfig()):
    """Mean over the batch axis (the second to last axis) of the per-sample loss."""
    return per_sample_loss(R, T, cfg).mean(-1)


def _normalize_backward(x, u, g, eps):
    """Vector-Jacobian product of ``x -> x / max(||x||, eps)``."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    big = n > eps
    proj = g - (u * g).sum(-1, keepdims=True) * u
    return np.where(big, proj / np.where(big, n, 1.0), g / eps)


def _head_backward(x, z, g, head):
    if head == "none":
        return g
    if head == "softmax":
        return z * (g - (z * g).sum(-1, keepdims=True))
    return g * z * (1.0 - z)


def cass_loss_gradients(R, T, cfg: LossConfig = LossConfig()) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form gradients of :func:`cass_loss` with respect to both inputs.

    There is no stop-gradient: both gradients are generically nonzero.
    """
    R = np.asarray(R, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    per_sample_loss(R, T, cfg)  # validation
    B = R.shape[-2]
    zr, zt = apply_head(R, cfg.head), apply_head(T, cfg.head)
    u, v = normalize_logits(zr, cfg.epsilon), normalize_logits(zt, cfg.epsilon)
    cos = (u * v).sum(-1, keepdims=True)
    # the clip in the forward pass is flat outside [-1, 1]
    live = (np.abs(cos) <= 1.0).astype(np.float64)
    gu = -2.0 / B * v * live
    gv = -2.0 / B * u * live
    gr = _head_backward(R, zr, _normalize_backward(zr, u, gu, cfg.epsilon), cfg.head)
    gt = _head_backward(T, zt, _normalize_backward(zt, v, gv, cfg.epsilon), cfg.head)
    return gr, gt
