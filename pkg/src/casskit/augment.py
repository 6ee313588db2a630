"""Single-view augmentation policies.

Every random decision is drawn from ``numpy.random.default_rng(seed)`` and the
pixel work is done by torchvision's functional ops with explicit parameters,
so ``apply(policy, image, seed)`` is a pure function.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

from .errors import CassValidationError, ConfigError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

KINDS = (
    "resize_bilinear",
    "color_jitter_or_perspective",
    "color_jitter_or_affine",
    "hflip",
    "vflip",
    "solarize",
    "gaussian_blur",
    "normalize",
)
VARIANTS = ("cass", "cass_solarize", "cass_blur", "cass_blur_solarize", "dino_like")

DEFAULT_JITTER = {"brightness": 0.4, "contrast": 0.4, "saturation": 0.4, "hue": 0.1}


@dataclass(frozen=True)
class TransformStep:
    kind: str
    p: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"probability {self.p} outside [0, 1]", path=self.kind)
        _check_params(self.kind, self.params)

    def to_dict(self):
        return {"kind": self.kind, "p": self.p, "params": dict(self.params)}


_REQUIRED = {
    "resize_bilinear": ("size",),
    "color_jitter_or_perspective": ("distortion", "brightness", "contrast", "saturation", "hue"),
    "color_jitter_or_affine": ("degrees", "brightness", "contrast", "saturation", "hue"),
    "solarize": ("threshold",),
    "gaussian_blur": ("kernel_size", "sigma"),
    "normalize": ("mean", "std"),
}


def _check_params(kind, params):
    missing = [k for k in _REQUIRED.get(kind, ()) if k not in params]
    if missing:
        raise ConfigError(f"missing params {missing}", path=kind)
    if "distortion" in params and not 0.0 <= params["distortion"] <= 1.0:
        raise ConfigError("distortion must be in [0, 1]", path=kind)
    if "hue" in params and not 0.0 <= params["hue"] <= 0.5:
        raise ConfigError("hue must be in [0, 0.5]", path=kind)
    if kind == "gaussian_blur":
        k = params["kernel_size"]
        if k < 1 or k % 2 == 0:
            raise ConfigError("kernel_size must be a positive odd integer", path=kind)
        lo, hi = params["sigma"]
        if not 0 < lo <= hi:
            raise ConfigError("sigma range must satisfy 0 < lo <= hi", path=kind)
    if kind == "normalize":
        if len(params["mean"]) != len(params["std"]):
            raise ConfigError("mean and std lengths differ", path=kind)
        if min(params["std"]) <= 0:
            raise ConfigError("std must be strictly positive", path=kind)


@dataclass(frozen=True)
class AugmentationPolicy:
    name: str
    steps: tuple[TransformStep, ...]
    input_size: int
    views: int = 1

    @property
    def mean(self):
        return tuple(self.steps[-1].params["mean"])

    @property
    def std(self):
        return tuple(self.steps[-1].params["std"])

    def with_probabilities(self, p: float) -> "AugmentationPolicy":
        """Copy with every stochastic step's probability set to ``p``."""
        steps = tuple(
            s if s.kind in ("resize_bilinear", "normalize") else replace(s, p=p) for s in self.steps
        )
        return replace(self, steps=steps)

    def to_json(self) -> str:
        return json.dumps([s.to_dict() for s in self.steps])

    @classmethod
    def from_json(cls, text: str, name: str = "custom", views: int = 1) -> "AugmentationPolicy":
        steps = tuple(
            TransformStep(d["kind"], d["p"], {k: tuple(v) if isinstance(v, list) else v
                                              for k, v in d.get("params", {}).items()})
            for d in json.loads(text)
        )
        if not steps or steps[-1].kind != "normalize":
            raise ConfigError("the last step must be normalize")
        size = next((s.params["size"] for s in steps if s.kind == "resize_bilinear"), None)
        if size is None:
            raise ConfigError("policy needs a resize_bilinear step")
        return cls(name, steps, size, views)


def blur_kernel_size(input_size: int) -> int:
    k = int(round(0.1 * input_size))
    return max(3, k if k % 2 else k + 1)


def build_policy(variant: str = "cass", input_size: int = 64, *, p: float = 0.3,
                 jitter: dict | None = None, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> AugmentationPolicy:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown augmentation variant {variant!r}; expected one of {VARIANTS}")
    jit = {**DEFAULT_JITTER, **(jitter or {})}
    steps = [
        TransformStep("resize_bilinear", 1.0, {"size": input_size}),
        TransformStep("color_jitter_or_perspective", p, {"distortion": 0.2, **jit}),
        TransformStep("color_jitter_or_affine", p, {"degrees": 10.0, **jit}),
        TransformStep("hflip", p),
        TransformStep("vflip", p),
    ]
    if variant in ("cass_blur", "cass_blur_solarize", "dino_like"):
        steps.append(TransformStep("gaussian_blur", p, {"kernel_size": blur_kernel_size(input_size),
                                                         "sigma": (0.1, 2.0)}))
    if variant in ("cass_solarize", "cass_blur_solarize", "dino_like"):
        steps.append(TransformStep("solarize", p, {"threshold": 0.5}))
    steps.append(TransformStep("normalize", 1.0, {"mean": tuple(mean), "std": tuple(std)}))
    return AugmentationPolicy(variant, tuple(steps), input_size, 2 if variant == "dino_like" else 1)


@dataclass
class AugmentedView:
    image: torch.Tensor
    applied: tuple[str, ...]
    seed: int


def as_image_tensor(image) -> torch.Tensor:
    """Validate a (C, H, W) image with 1 or 3 channels; grayscale becomes RGB."""
    t = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    t = t.to(torch.float32)
    if t.ndim == 2:
        t = t.unsqueeze(0)
    if t.ndim != 3 or t.shape[0] not in (1, 3):
        raise CassValidationError(f"expected image of shape (1|3, H, W), got {tuple(t.shape)}")
    if not torch.isfinite(t).all():
        raise CassValidationError("image has non-finite pixel values")
    if t.shape[0] == 1:
        t = t.expand(3, -1, -1).contiguous()
    return t


def _jitter(img, rng, prm):
    b = rng.uniform(1 - prm["brightness"], 1 + prm["brightness"])
    c = rng.uniform(1 - prm["contrast"], 1 + prm["contrast"])
    s = rng.uniform(1 - prm["saturation"], 1 + prm["saturation"])
    h = rng.uniform(-prm["hue"], prm["hue"])
    img = TF.adjust_brightness(img, b)
    img = TF.adjust_contrast(img, c)
    img = TF.adjust_saturation(img, s)
    return TF.adjust_hue(img, h)


def _perspective(img, rng, distortion):
    _, h, w = img.shape
    hh, hw = h // 2, w // 2
    dx, dy = int(distortion * hw) + 1, int(distortion * hh) + 1
    tl = [int(rng.integers(0, dx)), int(rng.integers(0, dy))]
    tr = [w - int(rng.integers(0, dx)) - 1, int(rng.integers(0, dy))]
    br = [w - int(rng.integers(0, dx)) - 1, h - int(rng.integers(0, dy)) - 1]
    bl = [int(rng.integers(0, dx)), h - int(rng.integers(0, dy)) - 1]
    start = [[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]]
    return TF.perspective(img, start, [tl, tr, br, bl], InterpolationMode.BILINEAR)


def apply(policy: AugmentationPolicy, image, seed: int) -> AugmentedView:
    """Produce exactly one augmented view of ``image``."""
    img = as_image_tensor(image)
    rng = np.random.default_rng(seed)
    applied = []
    for step in policy.steps:
        fire = rng.random() < step.p
        if not fire:
            continue
        prm = step.params
        k = step.kind
        if k == "resize_bilinear":
            if tuple(img.shape[1:]) != (prm["size"], prm["size"]):
                img = TF.resize(img, [prm["size"], prm["size"]], InterpolationMode.BILINEAR, antialias=True)
        elif k == "color_jitter_or_perspective":
            if rng.random() < 0.5:
                img, k = _jitter(img, rng, prm), "color_jitter"
            else:
                img, k = _perspective(img, rng, prm["distortion"]), "perspective"
        elif k == "color_jitter_or_affine":
            if rng.random() < 0.5:
                img, k = _jitter(img, rng, prm), "color_jitter"
            else:
                angle = float(rng.uniform(-prm["degrees"], prm["degrees"]))
                img = TF.affine(img, angle, [0, 0], 1.0, [0.0, 0.0], InterpolationMode.BILINEAR)
                k = "affine"
        elif k == "hflip":
            img = TF.hflip(img)
        elif k == "vflip":
            img = TF.vflip(img)
        elif k == "gaussian_blur":
            sigma = float(rng.uniform(*prm["sigma"]))
            img = TF.gaussian_blur(img, [prm["kernel_size"]] * 2, [sigma, sigma])
        elif k == "solarize":
            img = TF.solarize(img.clamp(0.0, 1.0), prm["threshold"])
        elif k == "normalize":
            mean = torch.tensor(prm["mean"], dtype=img.dtype).view(-1, 1, 1)
            std = torch.tensor(prm["std"], dtype=img.dtype).view(-1, 1, 1)
            img = (img - mean) / std
        applied.append(k)
    return AugmentedView(img.contiguous(), tuple(applied), seed)


def apply_views(policy: AugmentationPolicy, image, seed: int) -> list[AugmentedView]:
    """``policy.views`` independent views (two for ``dino_like``, else one)."""
    if policy.views == 1:
        return [apply(policy, image, seed)]
    seeds = np.random.SeedSequence(seed).generate_state(policy.views)
    return [apply(policy, image, int(s)) for s in seeds]


def eval_transform(policy: AugmentationPolicy, image) -> torch.Tensor:
    """Deterministic resize + normalize, used for validation and test passes."""
    return apply(policy.with_probabilities(0.0), image, 0).image


def sample_seed(run_seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([run_seed, epoch, index]).generate_state(1)[0])
