"""Synthetic shape datasets, trigger injection and dataset files."""

from __future__ import annotations

import colorsys
import struct
from dataclasses import dataclass, field, replace

import numpy as np

SHAPES = ("square", "disk", "cross", "triangle")
HUES = ("warm", "cool")
MAX_CLASSES = len(SHAPES) * len(HUES)

DS_MAGIC = b"NPDS"
DS_VERSION = 1
_DS_HEADER = struct.Struct("<4sHIHHHH")


class FormatError(ValueError):
    """Malformed or incompatible artifact file."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    poison_mask: np.ndarray = None
    split: str = "train"

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.poison_mask is None:
            self.poison_mask = np.zeros(len(self.labels), dtype=bool)
        self.poison_mask = np.asarray(self.poison_mask, dtype=bool)
        if not (len(self.images) == len(self.labels) == len(self.poison_mask)):
            raise ValueError("images, labels and poison_mask lengths differ")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       poison_mask=self.poison_mask[idx])

    def validate(self):
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels outside [0, C)")


@dataclass
class Trigger:
    kind: str = "patch"
    size: int = 3
    value: float = 1.0
    alpha: float = 0.2
    pattern: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("patch", "blended"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "blended" and not 0 < self.alpha < 1:
            raise ValueError("blend coefficient must lie in (0, 1)")
        if self.kind == "patch" and self.size < 1:
            raise ValueError("patch size must be positive")


@dataclass
class PoisonSpec:
    trigger: Trigger = field(default_factory=Trigger)
    ratio: float = 0.1
    mode: str = "all2one"
    target: int = 0

    def __post_init__(self):
        if self.mode not in ("all2one", "all2all"):
            raise ValueError(f"unknown poisoning mode {self.mode!r}")
        if not 0 <= self.ratio <= 1:
            raise ValueError("poisoning ratio must lie in [0, 1]")


def default_blend_pattern(shape, seed=1337):
    """Fixed noise image used as the blended trigger."""
    rng = np.random.default_rng(seed)
    return rng.random(shape).astype(np.float32)


# generation ----------------------------------------------------------------

def _shape_mask(kind, h, w, cy, cx, r):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "cross":
        arm = max(r * 0.35, 0.9)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "triangle":
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    raise ValueError(kind)


def _render(rng, cls, h, w):
    shape = SHAPES[cls // 2]
    warm = cls % 2 == 0
    hue = rng.uniform(-0.06, 0.12) % 1.0 if warm else rng.uniform(0.48, 0.68)
    rgb = colorsys.hsv_to_rgb(hue, rng.uniform(0.65, 1.0), rng.uniform(0.7, 1.0))
    r = rng.uniform(0.22, 0.32) * min(h, w)
    cy = rng.uniform(r + 0.5, h - r - 0.5)
    cx = rng.uniform(r + 0.5, w - r - 0.5)
    bg = rng.uniform(0.0, 0.3)
    img = np.full((3, h, w), bg, dtype=np.float32)
    mask = _shape_mask(shape, h, w, cy, cx, r)
    for ch in range(3):
        img[ch][mask] = rgb[ch]
    img += rng.normal(0.0, 0.04, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def gen_shapes_dataset(seed, num_classes=8, n_train=4000, n_test=1000, height=16, width=16):
    """Balanced (shape x hue) classification data; returns ``(train, test)``."""
    if not 2 <= num_classes <= MAX_CLASSES:
        raise ValueError(f"num_classes must lie in [2, {MAX_CLASSES}]")
    rng = np.random.default_rng(seed)
    out = []
    for split, n in (("train", n_train), ("test", n_test)):
        labels = rng.permutation(np.arange(n) % num_classes)
        images = np.stack([_render(rng, int(c), height, width) for c in labels]) if n else \
            np.zeros((0, 3, height, width), np.float32)
        out.append(Dataset(images, labels, num_classes, split=split))
    return tuple(out)


# triggers ------------------------------------------------------------------

def apply_trigger(x, trigger):
    """Stamp ``trigger`` onto one image (C,H,W) or a batch (N,C,H,W); returns a copy."""
    x = np.array(x, dtype=np.float32, copy=True)
    h, w = x.shape[-2:]
    if trigger.kind == "patch":
        k = trigger.size
        if k > h or k > w:
            raise ValueError(f"{k}x{k} patch does not fit a {h}x{w} image")
        x[..., h - k:, w - k:] = trigger.value
        return x
    pattern = trigger.pattern
    if pattern is None:
        pattern = default_blend_pattern(x.shape[-3:])
    if pattern.shape != x.shape[-3:]:
        raise ValueError("blend pattern shape does not match image")
    a = np.float32(trigger.alpha)
    return np.clip((np.float32(1) - a) * x + a * pattern, 0.0, 1.0).astype(np.float32)


def target_label(y, mode, num_classes, target=0):
    if mode == "all2one":
        return np.full_like(np.asarray(y), target) if np.ndim(y) else int(target)
    return (np.asarray(y) + 1) % num_classes if np.ndim(y) else (int(y) + 1) % num_classes


def poison_dataset(ds, spec, seed):
    """Trigger and relabel a seeded ``floor(ratio * N)`` sample of ``ds``."""
    n = len(ds)
    k = int(np.floor(spec.ratio * n))
    if spec.ratio > 0 and k < 1:
        raise ValueError("poisoning ratio selects no samples")
    if spec.mode == "all2one" and not 0 <= spec.target < ds.num_classes:
        raise ValueError("target label outside [0, C)")
    out = ds.subset(np.arange(n))
    if k == 0:
        return out
    rng = np.random.default_rng(seed)
    pool = np.arange(n)
    if spec.mode == "all2one":
        pool = pool[ds.labels != spec.target]
    if k > len(pool):
        raise ValueError("not enough eligible samples for the poisoning ratio")
    idx = np.sort(rng.choice(pool, size=k, replace=False))
    out.images[idx] = apply_trigger(ds.images[idx], spec.trigger)
    out.labels[idx] = target_label(ds.labels[idx], spec.mode, ds.num_classes, spec.target)
    out.poison_mask[idx] = True
    return out


def make_asr_eval_set(test, spec):
    """Triggered copies of the test samples an attack could flip.

    Labels keep the original class; use :func:`asr_targets` for the attack
    target of each sample.
    """
    if spec.mode == "all2one":
        keep = np.flatnonzero(test.labels != spec.target)
    else:
        keep = np.arange(len(test))
    if len(keep) == 0:
        raise ValueError("no non-target samples to evaluate")
    out = test.subset(keep)
    out.images = apply_trigger(out.images, spec.trigger)
    out.poison_mask[:] = True
    out.split = "asr"
    return out


def asr_targets(ds, spec):
    return target_label(ds.labels, spec.mode, ds.num_classes, spec.target)


def stratified_subset(ds, fraction, seed):
    """Seeded class-stratified index sample of ``round(fraction * n_c)`` per class."""
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        k = int(round(fraction * len(members)))
        picks.append(rng.choice(members, size=k, replace=False))
    return np.sort(np.concatenate(picks))


# files ---------------------------------------------------------------------

def _record_dtype(c, h, w):
    return np.dtype([("image", "<f4", (c, h, w)), ("label", "<u2"), ("flag", "u1")])


def dataset_bytes(ds):
    n = len(ds)
    c, h, w = ds.images.shape[1:] if ds.images.ndim == 4 else (3, 0, 0)
    rec = np.zeros(n, dtype=_record_dtype(c, h, w))
    rec["image"] = ds.images
    rec["label"] = ds.labels
    rec["flag"] = ds.poison_mask
    return _DS_HEADER.pack(DS_MAGIC, DS_VERSION, n, ds.num_classes, c, h, w) + rec.tobytes()


def save_dataset(ds, path):
    with open(path, "wb") as f:
        f.write(dataset_bytes(ds))


def dataset_from_bytes(buf, split="train"):
    if len(buf) < _DS_HEADER.size:
        raise FormatError("dataset file truncated")
    magic, version, n, num_classes, c, h, w = _DS_HEADER.unpack_from(buf)
    if magic != DS_MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != DS_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    dt = _record_dtype(c, h, w)
    body = buf[_DS_HEADER.size:]
    if len(body) != n * dt.itemsize:
        raise FormatError("dataset file truncated or has trailing bytes")
    rec = np.frombuffer(body, dtype=dt, count=n)
    return Dataset(rec["image"].copy(), rec["label"].astype(np.int64), num_classes,
                   rec["flag"].astype(bool), split)


def load_dataset(path, split="train"):
    with open(path, "rb") as f:
        return dataset_from_bytes(f.read(), split)
