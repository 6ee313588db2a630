"""Datasets: synthetic generator, image-folder ingestion, stratified splits
and nested label-fraction views."""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CassValidationError, ConfigError

SPLIT_FRACTIONS = (0.7, 0.1, 0.2)
SPLIT_NAMES = ("train", "val", "test")


@dataclass
class LabeledSample:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    label: int | tuple[int, ...]
    id: str

    @property
    def stratum(self) -> int:
        """Class used for stratification (first positive class for multi-label)."""
        if isinstance(self.label, tuple):
            return self.label[0] if self.label else -1
        return int(self.label)


@dataclass
class Dataset:
    samples: list[LabeledSample]
    num_classes: int
    multi_label: bool = False
    class_names: list[str] | None = None

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise CassValidationError("sample ids must be unique")
        for s in self.samples:
            labels = s.label if isinstance(s.label, tuple) else (s.label,)
            if any(not 0 <= l < self.num_classes for l in labels):
                raise CassValidationError(f"label of {s.id} outside [0, {self.num_classes})")
        self._by_id = {s.id: s for s in self.samples}

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, sid: str) -> LabeledSample:
        return self._by_id[sid]

    def subset(self, ids) -> list[LabeledSample]:
        return [self._by_id[i] for i in ids]

    def class_counts(self, ids=None) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for s in (self.samples if ids is None else self.subset(ids)):
            for l in (s.label if isinstance(s.label, tuple) else (s.label,)):
                counts[l] += 1
        return counts


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    num_classes: int
    strata: dict[str, int] = field(repr=False, default_factory=dict)

    def class_distribution(self) -> dict[str, list[int]]:
        out = {}
        for name in SPLIT_NAMES:
            c = Counter(self.strata[i] for i in getattr(self, name))
            out[name] = [c.get(k, 0) for k in range(self.num_classes)]
        return out

    def to_json(self) -> str:
        return json.dumps({"train": self.train, "val": self.val, "test": self.test})


def _largest_remainder_total(n: int, fractions) -> list[int]:
    ideal = [f * n for f in fractions]
    sizes = [math.floor(x + 0.5) for x in ideal[:-1]]
    sizes.append(n - sum(sizes))
    return sizes


def _max_flow_ups(supply: dict, demand: dict, allowed: set) -> set:
    """Pick (class, split) pairs to round up, one per pair, meeting exact supplies
    and demands. Tiny Edmonds-Karp on source -> class -> split -> sink."""
    cap = defaultdict(lambda: defaultdict(int))
    for c, k in supply.items():
        cap["S"][("c", c)] = k
    for (c, s) in allowed:
        cap[("c", c)][("s", s)] = 1
    for s, d in demand.items():
        cap[("s", s)]["T"] = d
    while True:
        parent = {"S": None}
        q = deque(["S"])
        while q and "T" not in parent:
            u = q.popleft()
            for v in sorted(cap[u], key=repr):
                if cap[u][v] > 0 and v not in parent:
                    parent[v] = u
                    q.append(v)
        if "T" not in parent:
            break
        v = "T"
        while parent[v] is not None:
            u = parent[v]
            cap[u][v] -= 1
            cap[v][u] += 1
            v = u
    return {(c, s) for (c, s) in allowed if cap[("c", c)][("s", s)] == 0}


def stratified_allocation(class_counts: dict[int, int], fractions=SPLIT_FRACTIONS) -> dict[int, list[int]]:
    """Per-class split sizes.

    Split totals match the overall rounded sizes exactly, and every per-class
    size is the floor or the ceiling of its ideal share. Such a rounding always
    exists; it is found with a max-flow over the fractional parts.
    """
    n = sum(class_counts.values())
    totals = _largest_remainder_total(n, fractions)
    ideal = {c: [f * k for f in fractions] for c, k in class_counts.items()}
    floors = {c: [math.floor(x + 1e-9) for x in v] for c, v in ideal.items()}
    supply = {c: class_counts[c] - sum(floors[c]) for c in class_counts}
    demand = {s: totals[s] - sum(floors[c][s] for c in class_counts) for s in range(len(fractions))}
    allowed = {(c, s) for c in class_counts for s in range(len(fractions))
               if ideal[c][s] - floors[c][s] > 1e-9}
    ups = _max_flow_ups(supply, demand, allowed)
    alloc = {c: [floors[c][s] + ((c, s) in ups) for s in range(len(fractions))] for c in class_counts}
    if any(sum(v) != class_counts[c] for c, v in alloc.items()):
        # infeasible rounding (cannot happen for consistent totals); fall back to train-absorbs-rest
        for c, v in alloc.items():
            v[0] += class_counts[c] - sum(v)
    return alloc


def split_dataset(samples, seed: int, num_classes: int | None = None,
                  fractions=SPLIT_FRACTIONS) -> DatasetSplit:
    """Stratified, seed-deterministic train/val/test split (70/10/20 by default)."""
    if isinstance(samples, Dataset):
        num_classes = samples.num_classes if num_classes is None else num_classes
        samples = samples.samples
    if len(samples) < 10:
        raise CassValidationError(f"need at least 10 samples to split, got {len(samples)}")
    strata = {s.id: s.stratum for s in samples}
    by_class = defaultdict(list)
    for s in samples:
        by_class[s.stratum].append(s.id)
    if num_classes is None:
        num_classes = max(by_class) + 1
    empty = [c for c in range(num_classes) if not by_class.get(c)]
    if empty:
        raise CassValidationError(f"classes with zero samples: {empty}")
    if len(by_class) < 2:
        raise CassValidationError("need at least 2 classes")
    alloc = stratified_allocation({c: len(v) for c, v in by_class.items()}, fractions)
    rng = np.random.default_rng(seed)
    parts = {name: [] for name in SPLIT_NAMES}
    for c in sorted(by_class):
        ids = sorted(by_class[c])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for name, k in zip(SPLIT_NAMES, alloc[c]):
            parts[name].extend(ids[start:start + k])
            start += k
    for name in SPLIT_NAMES:
        parts[name] = [parts[name][i] for i in rng.permutation(len(parts[name]))]
    return DatasetSplit(parts["train"], parts["val"], parts["test"], num_classes, strata)


def load_split_manifest(path, dataset: Dataset, seed: int = 0) -> DatasetSplit:
    """Predefined split from JSON ``{train: [...], val: [...], test: [...]}``.

    When ``val`` is missing or empty, one eighth of ``train`` is carved out
    (stratified) as validation.
    """
    d = json.loads(Path(path).read_text())
    for key in ("train", "test"):
        if key not in d:
            raise ConfigError("missing list", path=f"split_manifest.{key}")
    strata = {s.id: s.stratum for s in dataset.samples}
    unknown = [i for k in SPLIT_NAMES for i in d.get(k, []) if i not in strata]
    if unknown:
        raise ConfigError(f"unknown sample ids {unknown[:5]}", path="split_manifest")
    train, val, test = list(d["train"]), list(d.get("val") or []), list(d["test"])
    if len(set(train) | set(val) | set(test)) != len(train) + len(val) + len(test):
        raise ConfigError("splits overlap", path="split_manifest")
    if not val:
        counts = Counter(strata[i] for i in train)
        alloc = stratified_allocation(dict(counts), (7 / 8, 1 / 8))
        rng = np.random.default_rng(seed)
        keep, val = [], []
        for c in sorted(counts):
            ids = sorted(i for i in train if strata[i] == c)
            ids = [ids[j] for j in rng.permutation(len(ids))]
            keep += ids[:alloc[c][0]]
            val += ids[alloc[c][0]:]
        train = keep
    return DatasetSplit(train, val, test, dataset.num_classes, strata)


# --------------------------------------------------------------------------
# label fractions
# --------------------------------------------------------------------------


@dataclass
class LabelFractionView:
    train: list[str]
    fraction: float
    ids: list[str]
    seed: int

    def __len__(self):
        return len(self.ids)


def fraction_size(n: int, fraction: float) -> int:
    return math.floor(fraction * n + 0.5)


def priority_order(split: DatasetSplit, seed: int) -> list[str]:
    """Seeded, stratified ordering of the training ids.

    One id per class comes first, then ids interleave by within-class rank so
    that every prefix is close to the class proportions. Views are prefixes,
    hence nested across fractions.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    by_class = defaultdict(list)
    for i in sorted(split.train):
        by_class[split.strata[i]].append(i)
    heads, rest = [], []
    for c in sorted(by_class):
        ids = by_class[c]
        ids = [ids[j] for j in rng.permutation(len(ids))]
        heads.append(ids[0])
        n_c = len(ids)
        rest += [((j + 0.5) / n_c, c, ids[j]) for j in range(1, n_c)]
    rest.sort()
    return heads + [i for *_, i in rest]


def label_fraction_view(split: DatasetSplit, fraction: float, seed: int) -> LabelFractionView:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"label fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return LabelFractionView(split.train, fraction, list(split.train), seed)
    k = fraction_size(len(split.train), fraction)
    if k == 0:
        raise ConfigError(
            f"label fraction {fraction} of {len(split.train)} training samples selects nothing"
        )
    return LabelFractionView(split.train, fraction, priority_order(split, seed)[:k], seed)


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def _grating(yy, xx, angle, freq, phase):
    return 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)


def _blobs(yy, xx, rng, count, radius):
    img = np.zeros_like(xx)
    for _ in range(count):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        img += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
    return np.clip(img, 0, 1)


def _pattern(cls: int, yy, xx, rng):
    kind = cls % 8
    jitter = rng.normal(0, 0.12)
    if kind == 0:
        return _grating(yy, xx, 0.0 + jitter, rng.uniform(3, 6), rng.uniform(0, 2 * np.pi))
    if kind == 1:
        return _grating(yy, xx, np.pi / 2 + jitter, rng.uniform(3, 6), rng.uniform(0, 2 * np.pi))
    if kind == 2:
        return _blobs(yy, xx, rng, int(rng.integers(3, 6)), rng.uniform(0.05, 0.08))
    if kind == 3:
        return _grating(yy, xx, np.pi / 4 + jitter, rng.uniform(3, 6), rng.uniform(0, 2 * np.pi))
    if kind == 4:
        f = rng.uniform(3, 5)
        return 0.5 + 0.5 * np.sign(np.sin(2 * np.pi * f * xx + rng.uniform(0, 6)) * np.sin(2 * np.pi * f * yy))
    if kind == 5:
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = np.hypot(yy - cy, xx - cx)
        return 0.5 + 0.5 * np.cos(2 * np.pi * rng.uniform(4, 7) * r)
    if kind == 6:
        return _blobs(yy, xx, rng, 1, rng.uniform(0.15, 0.22))
    return _grating(yy, xx, 3 * np.pi / 4 + jitter, rng.uniform(3, 6), rng.uniform(0, 2 * np.pi))


def synth_dataset(n: int, classes: int, image_size: int = 64, seed: int = 0, *,
                  noise: float = 0.15, channels: int = 3, class_weights=None) -> Dataset:
    """Class-conditional structured images.

    Classes differ in structure (grating orientation, blob count and size,
    checkerboards, rings), never in colour: each image gets a random tint,
    contrast and background level plus Gaussian pixel noise. Photometric
    variation is kept mild: strong tints give two branches that see the same
    view an easier thing to agree on than structure. ``class_weights``
    skews the label distribution; every class still appears at least once.
    """
    if classes < 2 or n < classes or image_size < 4 or channels not in (1, 3):
        raise ConfigError(f"invalid synthetic dataset request n={n} classes={classes} "
                          f"size={image_size} channels={channels}")
    rng = np.random.default_rng(seed)
    if class_weights is None:
        labels = np.arange(n) % classes
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if len(w) != classes or (w < 0).any() or w.sum() <= 0:
            raise ConfigError("class_weights must be nonnegative, one per class")
        labels = np.concatenate([np.arange(classes), rng.choice(classes, n - classes, p=w / w.sum())])
    labels = labels[rng.permutation(n)]
    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    samples = []
    for i, c in enumerate(labels):
        pat = _pattern(int(c), yy, xx, rng)
        contrast = rng.uniform(0.7, 1.0)
        base = rng.uniform(0.0, 1.0 - contrast)
        tint = rng.uniform(0.85, 1.0, size=(channels, 1, 1))
        img = (base + contrast * pat)[None] * tint
        img = img + rng.normal(0, noise, size=img.shape)
        samples.append(LabeledSample(np.clip(img, 0, 1).astype(np.float32), int(c), f"syn{i:05d}"))
    return Dataset(samples, classes)


# --------------------------------------------------------------------------
# image folders
# --------------------------------------------------------------------------


@dataclass
class FolderLoadResult:
    dataset: Dataset | None
    errors: list[tuple[str, str]]


def read_manifest(path) -> list[tuple[str, list[str]]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if [c.strip().lower() for c in row[:2]] == ["path", "label"]:
                continue
            if len(row) < 2:
                raise ConfigError(f"manifest row {row!r} needs 'path,label'")
            rows.append((row[0].strip(), [l.strip() for l in row[1].split(";") if l.strip()]))
    return rows


def decode_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        if im.mode.startswith("I;16"):
            return (np.asarray(im, dtype=np.float32) / 65535.0)[None]
        if im.mode in ("L", "1", "LA"):
            return (np.asarray(im.convert("L"), dtype=np.float32) / 255.0)[None]
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        return arr.transpose(2, 0, 1).copy()


def load_image_folder(root, manifest=None) -> FolderLoadResult:
    """Load images listed in a ``path,label`` CSV manifest (paths relative to root).

    Labels may be class names or integers; ``a;b`` marks a multi-label row.
    Undecodable or missing files are collected in ``errors`` and skipped.
    Grayscale files stay single-channel.
    """
    root = Path(root)
    rows = read_manifest(manifest if manifest is not None else root / "manifest.csv")
    multi = any(len(ls) != 1 for _, ls in rows)
    names = sorted({l for _, ls in rows for l in ls}, key=lambda s: (not s.isdigit(), int(s) if s.isdigit() else 0, s))
    index = {n: i for i, n in enumerate(names)}
    samples, errors = [], []
    for rel, labels in rows:
        try:
            img = decode_image(root / rel)
        except Exception as exc:  # noqa: BLE001 - any decoder failure is a per-file error
            errors.append((rel, f"{type(exc).__name__}: {exc}"))
            continue
        label = tuple(sorted(index[l] for l in labels)) if multi else index[labels[0]]
        samples.append(LabeledSample(img, label, rel))
    ds = Dataset(samples, len(names), multi, names) if samples else None
    return FolderLoadResult(ds, errors)


def write_image_folder(dataset: Dataset, root) -> Path:
    """Write a dataset as PNG files plus ``manifest.csv``."""
    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    names = dataset.class_names or [str(i) for i in range(dataset.num_classes)]
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label"])
        for s in dataset.samples:
            rel = f"images/{s.id}.png"
            arr = np.round(np.clip(s.image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)).save(root / rel)
            labels = s.label if isinstance(s.label, tuple) else (s.label,)
            w.writerow([rel, ";".join(names[l] for l in labels)])
    return root / "manifest.csv"
