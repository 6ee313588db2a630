"""Independent reference computations used by the unit and acceptance tests.

Nothing here imports the package code it is checking: each oracle recomputes
the quantity from its definition, usually by brute force.
"""

from __future__ import annotations

import math

import numpy as np


# -- normalized-logit loss ----------------------------------------------------


def loss_by_definition(R, T, eps=1e-8, head="none"):
    """Per-row loops: 2 - 2 cos between eps-clamped normalized rows, batch mean."""
    R = np.asarray(R, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    total = 0.0
    for r, t in zip(R, T):
        if head == "softmax":
            r = np.exp(r - r.max()) / np.exp(r - r.max()).sum()
            t = np.exp(t - t.max()) / np.exp(t - t.max()).sum()
        elif head == "sigmoid":
            with np.errstate(over="ignore"):
                r, t = 1 / (1 + np.exp(-r)), 1 / (1 + np.exp(-t))
        nr = max(math.sqrt(sum(v * v for v in r)), eps)
        nt = max(math.sqrt(sum(v * v for v in t)), eps)
        cos = sum(a * b for a, b in zip(r / nr, t / nt))
        total += 2 - 2 * min(1.0, max(-1.0, cos))
    return total / len(R)


def central_differences(f, X, h=1e-5):
    """Gradient of scalar ``f`` at ``X`` by central differences.

    ``f`` must accept a stack of inputs with one extra leading axis and return
    one value per stacked input, so all 2*X.size evaluations run at once.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.size
    eye = np.eye(n).reshape(n, *X.shape) * h
    plus = f(X[None] + eye)
    minus = f(X[None] - eye)
    return ((plus - minus) / (2 * h)).reshape(X.shape)


def relative_error(analytic, numeric, floor=1e-8):
    """Max abs deviation scaled by the largest reference component (floored)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return float(np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), floor))


# -- schedule and weight averaging ---------------------------------------------


def cosine_by_formula(step, lr_max=1e-3, lr_min=1e-6, t_max=16):
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * min(step, t_max) / t_max))


def brute_force_mean(snapshots):
    """Arithmetic mean of a list of {name: array} snapshots, summed in order in float64."""
    out = {}
    for name in snapshots[0]:
        total = np.zeros(np.shape(snapshots[0][name]), dtype=np.float64)
        for snap in snapshots:
            total = total + np.asarray(snap[name], dtype=np.float64)
        out[name] = total / len(snapshots)
    return out


# -- collapse statistics -----------------------------------------------------------


def collapse_by_definition(logits):
    """(mean over dims of the population std of normalized rows, mean off-diagonal cosine)."""
    X = np.asarray(logits, dtype=np.float64)
    U = [x / max(np.linalg.norm(x), 1e-8) for x in X]
    B, N = len(U), len(U[0])
    stds = []
    for j in range(N):
        col = [u[j] for u in U]
        m = sum(col) / B
        stds.append(math.sqrt(sum((c - m) ** 2 for c in col) / B))
    cos = [float(np.dot(U[i], U[k])) for i in range(B) for k in range(B) if i != k]
    return sum(stds) / N, sum(cos) / len(cos)


# -- baseline centering --------------------------------------------------------------


def center_sequence(batch_means, momentum=0.9):
    """Center after each step, starting from zeros, via the recurrence written out."""
    c = np.zeros_like(np.asarray(batch_means[0], dtype=np.float64))
    out = []
    for b in batch_means:
        c = momentum * c + (1 - momentum) * np.asarray(b, dtype=np.float64)
        out.append(c.copy())
    return out


# -- fine-tuning ------------------------------------------------------------------------


def focal_by_definition(P, y, weights, alpha=1.0, gamma=2.0):
    total = 0.0
    for row, t in zip(np.asarray(P, dtype=np.float64), y):
        p = row[int(t)]
        total += weights[int(t)] * alpha * (1 - p) ** gamma * -math.log(p)
    return total / len(P)


def weighted_ce_by_definition(P, y, weights):
    return sum(weights[int(t)] * -math.log(row[int(t)]) for row, t in zip(np.asarray(P, dtype=np.float64), y)) / len(P)


def stop_epoch_by_replay(losses, patience=5):
    """1-based epoch at which training stops, and the best epoch, by scanning the curve."""
    best, best_ep = float("inf"), 0
    for ep, v in enumerate(losses, start=1):
        if v < best:
            best, best_ep = v, ep
        if ep - best_ep >= patience:
            return ep, best_ep
    return len(losses), best_ep


# -- metrics --------------------------------------------------------------------------


def macro_f1_by_counting(y_true, y_pred, k):
    scores = []
    for c in range(k):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        scores.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
    return sum(scores) / k


def balanced_accuracy_by_counting(y_true, y_pred, k):
    recalls = []
    for c in range(k):
        idx = [i for i, t in enumerate(y_true) if t == c]
        recalls.append(0.0 if not idx else sum(1 for i in idx if y_pred[i] == c) / len(idx))
    return sum(recalls) / k


# -- attention introspection ------------------------------------------------------------


def _layer_norm(x, w, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def first_block_cls_attention(state, image, patch, heads):
    """Head-averaged CLS-to-patch attention of the first block, from raw weights in numpy."""
    p = {k: v.detach().double().numpy() for k, v in state.items()}
    C, H, W = image.shape
    g = H // patch
    # patch embedding as a matrix product over flattened patches
    patches = image.reshape(C, g, patch, g, patch).transpose(1, 3, 0, 2, 4).reshape(g * g, -1)
    w = p["patch_embed.weight"].reshape(p["patch_embed.weight"].shape[0], -1)
    tokens = patches @ w.T + p["patch_embed.bias"]
    x = np.concatenate([p["cls_token"][0], tokens]) + p["pos_embed"][0]
    h = _layer_norm(x, p["blocks.0.norm1.weight"], p["blocks.0.norm1.bias"])
    qkv = h @ p["blocks.0.attn.qkv.weight"].T + p["blocks.0.attn.qkv.bias"]
    D = x.shape[1]
    d = D // heads
    maps = []
    for i in range(heads):
        q = qkv[:, i * d:(i + 1) * d]
        k = qkv[:, D + i * d:D + (i + 1) * d]
        s = q[0] @ k.T / math.sqrt(d)
        e = np.exp(s - s.max())
        maps.append((e / e.sum())[1:])
    return np.mean(maps, axis=0).reshape(g, g)
