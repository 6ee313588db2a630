"""Branch networks, the backbone registry, and pairing.

Two tiny desk-scale variants ship with the package:

* ``tiny-conv4``: four stride-2 conv blocks (conv -> batchnorm -> relu),
  global average pool, linear logit head.
* ``tiny-vit2``: patch embedding, CLS token, two pre-norm attention blocks,
  linear logit head on the CLS token.

Full-size networks can be plugged in with :func:`register_backbone`.
"""

from __future__ import annotations

import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import PairingError, RegistryError, SpecError

FAMILIES = ("conv", "attention")
INIT_MODES = ("random", "pretrained")


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    variant: str
    input_size: int = 64
    patch_size: int | None = None
    logit_width: int = 32
    init_mode: str = "random"
    pretrained_path: str | None = None
    in_channels: int = 3

    def validate(self) -> "BackboneSpec":
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.init_mode not in INIT_MODES:
            raise SpecError(f"unknown init_mode {self.init_mode!r}")
        if self.init_mode == "pretrained" and not self.pretrained_path:
            raise SpecError("init_mode 'pretrained' needs pretrained_path")
        if self.logit_width < 2:
            raise SpecError(f"logit_width must be >= 2, got {self.logit_width}")
        if self.input_size < 1:
            raise SpecError(f"input_size must be positive, got {self.input_size}")
        if self.family == "attention":
            if not self.patch_size or self.patch_size < 1:
                raise SpecError("attention family needs a positive patch_size")
            if self.input_size % self.patch_size:
                raise SpecError(
                    f"patch_size {self.patch_size} does not divide input_size {self.input_size}"
                )
        entry = _REGISTRY.get(self.variant)
        if entry is None:
            raise RegistryError(f"unknown backbone variant {self.variant!r}")
        if entry.family != self.family:
            raise SpecError(
                f"variant {self.variant!r} is a {entry.family} backbone, spec says {self.family}"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------
# tiny conv
# --------------------------------------------------------------------------


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 2):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class TinyConvNet(nn.Module):
    family = "conv"

    def __init__(self, in_channels: int = 3, widths=(16, 32, 64, 64), logit_width: int = 32):
        super().__init__()
        chans = (in_channels, *widths)
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(len(widths)))
        self.feature_dim = widths[-1]
        self.head = nn.Linear(self.feature_dim, logit_width)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def conv_layers(self) -> list[nn.Conv2d]:
        return [b.conv for b in self.blocks]

    def features(self, x):
        for b in self.blocks:
            x = b(x)
        return x.mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))


# --------------------------------------------------------------------------
# tiny vit
# --------------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise SpecError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.captured: list[torch.Tensor] | None = None

    def forward(self, x):
        B, T, D = x.shape
        qkv = self.qkv(x).reshape(B, T, 3, self.heads, D // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        if self.captured is not None:
            self.captured.append(attn.detach())
        out = (attn @ v).transpose(1, 2).reshape(B, T, D)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * mlp_ratio), nn.GELU(), nn.Linear(dim * mlp_ratio, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    family = "attention"

    def __init__(
        self,
        input_size: int = 64,
        patch_size: int = 16,
        in_channels: int = 3,
        dim: int = 64,
        depth: int = 2,
        heads: int = 4,
        logit_width: int = 32,
    ):
        super().__init__()
        self.patch_size = patch_size
        self.grid = input_size // patch_size
        self.patch_embed = nn.Conv2d(in_channels, dim, patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + self.grid**2, dim))
        self.blocks = nn.ModuleList(Block(dim, heads) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        self.feature_dim = dim
        self.head = nn.Linear(dim, logit_width)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        # Linear layers keep torch's default init. The usual 0.02 truncated
        # normal leaves the CLS output almost input-independent at this size.

    def features(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x)[:, 0]

    def forward(self, x):
        return self.head(self.features(x))

    @contextmanager
    def capture_attention(self):
        """Record the softmax attention of every block during forward passes.

        Yields a list with one entry per block; each entry is a list of
        (B, heads, tokens, tokens) tensors, one per forward call.
        """
        for blk in self.blocks:
            blk.attn.captured = []
        try:
            yield [blk.attn.captured for blk in self.blocks]
        finally:
            for blk in self.blocks:
                blk.attn.captured = None


# --------------------------------------------------------------------------
# registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RegistryEntry:
    family: str
    factory: Callable[[BackboneSpec], nn.Module]


_REGISTRY: dict[str, RegistryEntry] = {}


def register_backbone(variant: str, family: str, factory: Callable[[BackboneSpec], nn.Module]):
    """Register a backbone factory under ``variant``.

    The factory receives the spec and must return a module exposing
    ``features(x) -> (B, feature_dim)``, a ``feature_dim`` attribute and a
    linear ``head``. :class:`HeadAdapter` wraps arbitrary feature extractors.
    """
    if family not in FAMILIES:
        raise RegistryError(f"unknown family {family!r}")
    _REGISTRY[variant] = RegistryEntry(family, factory)


def registered_variants() -> dict[str, str]:
    return {k: v.family for k, v in _REGISTRY.items()}


class HeadAdapter(nn.Module):
    """Attach a linear logit head to an externally supplied feature extractor."""

    def __init__(self, body: nn.Module, feature_dim: int, logit_width: int, family: str):
        super().__init__()
        self.body = body
        self.family = family
        self.feature_dim = feature_dim
        self.head = nn.Linear(feature_dim, logit_width)

    def features(self, x):
        return self.body(x).flatten(1)

    def forward(self, x):
        return self.head(self.features(x))


register_backbone(
    "tiny-conv4",
    "conv",
    lambda s: TinyConvNet(s.in_channels, (16, 32, 64, 64), s.logit_width),
)
register_backbone(
    "tiny-conv2",
    "conv",
    lambda s: TinyConvNet(s.in_channels, (16, 32), s.logit_width),
)
register_backbone(
    "tiny-vit2",
    "attention",
    lambda s: TinyViT(s.input_size, s.patch_size, s.in_channels, 64, 2, 4, s.logit_width),
)
register_backbone(
    "tiny-vit1",
    "attention",
    lambda s: TinyViT(s.input_size, s.patch_size, s.in_channels, 32, 1, 2, s.logit_width),
)


def build_backbone(spec: BackboneSpec, seed: int = 0) -> nn.Module:
    """Build a branch network; random init is a pure function of ``(spec, seed)``."""
    spec.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = _REGISTRY[spec.variant].factory(spec)
    net.spec = spec
    if spec.init_mode == "pretrained":
        from .checkpoint import load_parameter_file

        load_pretrained(net, load_parameter_file(spec.pretrained_path, variant=spec.variant))
    return net


def load_pretrained(net: nn.Module, params: dict[str, np.ndarray]) -> list[str]:
    """Copy externally provided parameters into ``net``.

    Head entries whose shape disagrees with the net are skipped so the freshly
    initialised head of ``logit_width`` stays in place. Any other missing or
    mis-shaped entry is an error. Returns the names left at their fresh init.
    """
    state = net.state_dict()
    kept_fresh, bad = [], []
    for name, tensor in state.items():
        src = params.get(name)
        if src is None or tuple(src.shape) != tuple(tensor.shape):
            if name.startswith("head."):
                kept_fresh.append(name)
                continue
            bad.append(name)
            continue
        tensor.copy_(torch.as_tensor(np.asarray(src)).to(tensor.dtype))
    if bad:
        raise SpecError(f"pretrained parameter file is missing or mis-shapes: {bad[:5]}")
    net.load_state_dict(state)
    return kept_fresh


# --------------------------------------------------------------------------
# pairing
# --------------------------------------------------------------------------


@dataclass
class DualBackbone:
    branch_a: nn.Module
    branch_b: nn.Module
    spec_a: BackboneSpec
    spec_b: BackboneSpec
    seeds: tuple[int, int] = field(default=(0, 1))

    def branches(self):
        return (("a", self.branch_a), ("b", self.branch_b))

    def train(self, mode: bool = True):
        self.branch_a.train(mode)
        self.branch_b.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def spec_digest(self) -> str:
        return pair_spec_digest(self.spec_a, self.spec_b)


def specs_digest(specs: dict[str, BackboneSpec]) -> str:
    blob = json.dumps({k: s.to_dict() for k, s in specs.items()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pair_spec_digest(spec_a: BackboneSpec, spec_b: BackboneSpec) -> str:
    return specs_digest({"a": spec_a, "b": spec_b})


def branch_seeds(seed: int) -> tuple[int, int]:
    a, b = np.random.SeedSequence(seed).generate_state(2)
    return int(a), int(b)


def pair_backbones(spec_a: BackboneSpec, spec_b: BackboneSpec, seed: int = 0) -> DualBackbone:
    """Build two unshared branches.

    Any family combination is accepted. Each branch gets its own derived
    seed, so even a same-variant pair starts from different weights.
    """
    spec_a.validate()
    spec_b.validate()
    if spec_a.logit_width != spec_b.logit_width:
        raise PairingError(
            f"logit widths differ: {spec_a.logit_width} vs {spec_b.logit_width}"
        )
    if spec_a.input_size != spec_b.input_size:
        raise PairingError(f"input sizes differ: {spec_a.input_size} vs {spec_b.input_size}")
    sa, sb = branch_seeds(seed)
    pair = DualBackbone(build_backbone(spec_a, sa), build_backbone(spec_b, sb), spec_a, spec_b, (sa, sb))
    assert_disjoint(pair)
    return pair


def assert_disjoint(pair: DualBackbone):
    ids_a = {id(p) for p in pair.branch_a.parameters()}
    ids_b = {id(p) for p in pair.branch_b.parameters()}
    if ids_a & ids_b:
        raise PairingError("branches share parameters")


def default_spec(family: str, logit_width: int = 32, input_size: int = 64, **kw) -> BackboneSpec:
    if family == "conv":
        return BackboneSpec("conv", kw.pop("variant", "tiny-conv4"), input_size, None, logit_width, **kw)
    patch = kw.pop("patch_size", 16 if input_size % 16 == 0 else math.gcd(input_size, 16))
    return BackboneSpec("attention", kw.pop("variant", "tiny-vit2"), input_size, patch, logit_width, **kw)
