"""Feature-map and class-attention extraction, averaging and rendering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CassValidationError, LayerRangeError, UnsupportedArchitectureError


@dataclass
class ActivationMap:
    kind: str  # "feature" | "attention"
    index: int  # 1-based conv layer or attention block
    map: np.ndarray
    sample_ids: list[str] = field(default_factory=list)
    channel: int | None = None
    raw: np.ndarray | None = field(default=None, repr=False)
    stats: dict = field(default_factory=dict)

    def sidecar(self) -> dict:
        key = "layer" if self.kind == "feature" else "block"
        out = {"kind": self.kind, key: self.index, "sample_ids": list(self.sample_ids),
               "shape": list(self.map.shape), "statistics": dict(self.stats)}
        if self.channel is not None:
            out["channel"] = self.channel
        return out


def map_statistics(m: np.ndarray) -> dict:
    m = np.asarray(m, dtype=np.float64)
    total = m.sum()
    if total > 0 and (m >= 0).all():
        p = m.ravel() / total
        nz = p[p > 0]
        entropy = float(-(nz * np.log(nz)).sum())
    else:
        entropy = 0.0
    flat = int(np.argmax(m))
    return {"entropy": entropy, "max": float(m.max()), "argmax": [int(i) for i in np.unravel_index(flat, m.shape)]}


def minmax_normalize(m: np.ndarray) -> np.ndarray:
    """Scale to [0, 1]; a constant map becomes 0.5 everywhere."""
    lo, hi = float(m.min()), float(m.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.full_like(m, 0.5, dtype=np.float64)
    return (m - lo) / (hi - lo)


def _batch(image) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image, dtype=torch.float32)
    return x[None] if x.ndim == 3 else x


def conv_layers(net: nn.Module) -> list[nn.Conv2d]:
    if hasattr(net, "conv_layers"):
        return list(net.conv_layers())
    return [m for m in net.modules() if isinstance(m, nn.Conv2d)]


@torch.no_grad()
def extract_feature_maps(net: nn.Module, image, layers=(1,), top_k: int = 8,
                         sample_id: str = "") -> list[ActivationMap]:
    """Conv outputs for the given 1-based layers; per layer the ``top_k``
    channels by mean absolute activation (ties keep channel order)."""
    convs = conv_layers(net)
    bad = [l for l in layers if not 1 <= l <= len(convs)]
    if bad:
        raise LayerRangeError(f"layers {bad} outside 1..{len(convs)}")
    captured = {}
    hooks = [convs[l - 1].register_forward_hook(
        lambda m, inp, out, l=l: captured.__setitem__(l, out.detach())) for l in layers]
    try:
        net.eval()
        net(_batch(image))
    finally:
        for h in hooks:
            h.remove()
    maps = []
    for l in layers:
        act = captured[l][0].to(torch.float64).numpy()  # (C, H', W')
        score = np.abs(act).mean(axis=(1, 2))
        for c in np.argsort(-score, kind="stable")[:top_k]:
            m = act[c]
            maps.append(ActivationMap("feature", l, m, [sample_id], int(c), stats=map_statistics(np.abs(m))))
    return maps


def _check_attention_net(net):
    if not hasattr(net, "capture_attention") or not hasattr(net, "cls_token"):
        raise UnsupportedArchitectureError(f"{type(net).__name__} has no CLS-token attention to extract")


def cls_attention(net: nn.Module, images: torch.Tensor, block: int, head="mean"):
    """CLS-to-patch attention grids (B, g, g) of a 1-based block, plus the
    largest deviation of any attention row sum from 1."""
    _check_attention_net(net)
    if not 1 <= block <= len(net.blocks):
        raise LayerRangeError(f"block {block} outside 1..{len(net.blocks)}")
    net.eval()
    with torch.no_grad(), net.capture_attention() as caps:
        net(images)
    attn = caps[block - 1][0].to(torch.float64)  # (B, heads, T, T)
    row_err = float((attn.sum(-1) - 1).abs().max())
    cls = attn[:, :, 0, 1:]
    cls = cls.mean(1) if head == "mean" else cls[:, int(head)]
    g = net.grid
    return cls.reshape(-1, g, g), row_err


def resize_maps(grids: torch.Tensor, size: int) -> torch.Tensor:
    return F.interpolate(grids[:, None], size=(size, size), mode="bilinear", align_corners=False)[:, 0]


def extract_attention_map(net: nn.Module, image, block: int = 1, head="mean",
                          sample_id: str = "") -> ActivationMap:
    x = _batch(image)
    grids, row_err = cls_attention(net, x, block, head)
    raw = resize_maps(grids, x.shape[-1])[0].numpy()
    norm = minmax_normalize(raw)
    return ActivationMap("attention", block, norm, [sample_id], raw=raw,
                         stats={**map_statistics(norm), "row_sum_max_error": row_err,
                                "grid": list(grids.shape[1:])})


def average_attention_maps(net: nn.Module, images, block: int = 1, sample_ids=None,
                           head="mean", batch_size: int = 64) -> ActivationMap:
    """Pixel-wise mean of the resized per-sample maps, normalised afterwards."""
    x = images if isinstance(images, torch.Tensor) else torch.stack([_batch(i)[0] for i in images])
    if len(x) == 0:
        raise CassValidationError("need at least one sample to average")
    ids = list(sample_ids) if sample_ids is not None else [str(i) for i in range(len(x))]
    total, err = None, 0.0
    for s in range(0, len(x), batch_size):
        grids, e = cls_attention(net, x[s:s + batch_size], block, head)
        part = resize_maps(grids, x.shape[-1]).sum(0)
        total = part if total is None else total + part
        err = max(err, e)
    raw = (total / len(x)).numpy()
    norm = minmax_normalize(raw)
    return ActivationMap("attention", block, norm, ids, raw=raw,
                         stats={**map_statistics(norm), "row_sum_max_error": err, "n_samples": len(x)})


def render_png(amap: ActivationMap, path, image=None, mode: str = "raw", cmap: str = "inferno") -> Path:
    """``raw``: grayscale map; ``heatmap``: colour-mapped; ``overlay``: heatmap
    blended over ``image`` (a (C, H, W) array in [0, 1])."""
    from PIL import Image

    m = minmax_normalize(amap.map) if amap.kind == "feature" else np.clip(amap.map, 0, 1)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if mode == "raw":
        Image.fromarray(np.round(m * 255).astype(np.uint8), mode="L").save(path)
        return path
    import matplotlib

    rgb = matplotlib.colormaps[cmap](m)[..., :3]
    if mode == "overlay":
        if image is None:
            raise CassValidationError("overlay mode needs the input image")
        img = np.asarray(image, dtype=np.float64)
        img = np.repeat(img, 3, 0) if img.shape[0] == 1 else img[:3]
        img = img.transpose(1, 2, 0)
        if img.shape[:2] != rgb.shape[:2]:
            img = np.asarray(Image.fromarray(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
                             .resize(rgb.shape[1::-1], Image.BILINEAR), dtype=np.float64) / 255
        rgb = 0.5 * rgb + 0.5 * np.clip(img, 0, 1)
    elif mode != "heatmap":
        raise CassValidationError(f"unknown render mode {mode!r}")
    Image.fromarray(np.round(rgb * 255).astype(np.uint8)).save(path)
    return path


def emit_artifact(amap: ActivationMap, out_dir, name: str, image=None, mode: str = "raw") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    png = render_png(amap, out_dir / f"{name}.png", image, mode)
    side = out_dir / f"{name}.json"
    side.write_text(json.dumps({**amap.sidecar(), "render_mode": mode, "png": png.name}, indent=2))
    return png, side
