"""Datasets: IDX loading and writing, synthetic blob/stripe images, normalization, splits, resizing."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IdxCountMismatchError, IdxMagicError, IdxTruncatedError, SpecError, ValidationError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # float32 [N, C, H, W]
    labels: np.ndarray  # int64 [N], values in {0, 1}
    normalization: str = "raw"
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise SpecError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise SpecError(f"{len(self.images)} images but {len(self.labels)} labels")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValidationError("labels must be binary")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.images.shape).encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx: np.ndarray) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.normalization, {**self.meta, "indices": idx})

    def class_counts(self) -> tuple[int, int]:
        n1 = int(self.labels.sum())
        return len(self) - n1, n1


# -- IDX -------------------------------------------------------------------------
def _read_idx(path, expected_magic: int) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise IdxTruncatedError(f"{path}: file shorter than the magic number")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    size = int(np.prod(dims))
    if len(blob) < header + size:
        raise IdxTruncatedError(f"{path}: payload has {len(blob) - header} bytes, expected {size}")
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, classes: Sequence[int] = (0, 1)) -> Dataset:
    """Load an IDX image/label pair, keeping two classes remapped to 0 and 1 in ``classes`` order."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if raw.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    a, b = classes
    keep = (labels == a) | (labels == b)
    if not np.any(labels[keep] == a) or not np.any(labels[keep] == b):
        raise ValidationError(f"class filter {tuple(classes)} leaves a single class")
    images = raw[keep].astype(np.float32)
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images, (labels[keep] == b).astype(np.int64), "raw",
                   {"source": "idx", "classes": [int(a), int(b)]})


def write_idx(images_path, labels_path, ds: Dataset) -> None:
    """Write images as unsigned bytes (values are rounded and clipped to 0..255)."""
    images = np.clip(np.rint(ds.images), 0, 255).astype(np.uint8)
    if images.shape[1] == 1:
        images = images[:, 0]
    dims = images.shape
    head = struct.pack(">I", 0x800 | len(dims)) + struct.pack(f">{len(dims)}I", *dims)
    Path(images_path).write_bytes(head + images.tobytes())
    labels = ds.labels.astype(np.uint8)
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# -- synthetic ----------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSpec:
    n_per_class: int = 200
    size: int = 32
    blob_width: float = 0.18  # Gaussian std as a fraction of image size
    center_jitter: float = 0.15  # max center offset as a fraction of image size
    stripe_period: float = 6.0  # pixels
    orientation_jitter: float = math.pi  # orientations drawn from [0, this)
    noise: float = 0.0
    seed: int = 0


def blob_pattern(size: int, cx: float, cy: float, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * width ** 2))


def stripe_pattern(size: int, period: float, theta: float, phase: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return 0.5 + 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)


def gen_synthetic(spec: SyntheticSpec) -> Dataset:
    """Class 0: jittered Gaussian blob. Class 1: sinusoidal stripes with random phase and orientation.

    Samples are ordered class 0 first. Per-sample pattern parameters are kept
    in ``meta["params"]``.
    """
    if spec.size < 8:
        raise SpecError(f"image size must be at least 8 px, got {spec.size}")
    if spec.n_per_class < 1:
        raise SpecError("n_per_class must be positive")
    if spec.noise < 0:
        raise SpecError("noise must be non-negative")
    rng = np.random.default_rng(spec.seed)
    s = spec.size
    images, params = [], []
    for _ in range(spec.n_per_class):
        cx, cy = (s - 1) / 2 + rng.uniform(-1, 1, size=2) * spec.center_jitter * s
        width = spec.blob_width * s
        images.append(blob_pattern(s, cx, cy, width))
        params.append({"kind": "blob", "cx": float(cx), "cy": float(cy), "width": float(width)})
    for _ in range(spec.n_per_class):
        theta = rng.uniform(0, spec.orientation_jitter)
        phase = rng.uniform(0, 2 * np.pi)
        images.append(stripe_pattern(s, spec.stripe_period, theta, phase))
        params.append({"kind": "stripes", "period": spec.stripe_period, "theta": float(theta), "phase": float(phase)})
    x = np.stack(images)[:, None]
    if spec.noise > 0:
        x = x + rng.normal(0, spec.noise, size=x.shape)
    labels = np.repeat(np.array([0, 1], dtype=np.int64), spec.n_per_class)
    return Dataset(x.astype(np.float32), labels, "raw", {"source": "synthetic", "params": params})


# -- transforms -------------------------------------------------------------------------
def normalize(ds: Dataset, mode: str = "zero_one", mean=None, std=None) -> Dataset:
    """``zero_one`` maps the dataset min/max to 0/1 (constant data -> zeros); ``mean_std`` is per channel."""
    x = ds.images
    if mode == "zero_one":
        lo, hi = x.min(), x.max()
        out = np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)
        tag = "zero_one"
    elif mode == "mean_std":
        c = x.shape[1]
        mu = np.broadcast_to(np.asarray(mean, dtype=np.float32), (c,)).reshape(1, c, 1, 1)
        sd = np.broadcast_to(np.asarray(std, dtype=np.float32), (c,)).reshape(1, c, 1, 1)
        if np.any(sd <= 0):
            raise SpecError("mean_std normalization needs std > 0")
        out = (x - mu) / sd
        tag = "mean_std"
    else:
        raise SpecError(f"unknown normalization {mode!r}")
    return replace(ds, images=out.astype(np.float32), normalization=tag)


def _bilinear_axis(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.array([(n_in - 1) / 2])
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize(ds: Dataset, height: int, width: int) -> Dataset:
    """Bilinear resize with corner-aligned sampling (output corners hit input corners)."""
    if height < 1 or width < 1:
        raise SpecError("resize target must be at least 1x1")
    x = ds.images
    h, w = x.shape[2:]
    if (h, w) == (height, width):
        return replace(ds, images=x.copy())
    x = x.astype(np.float64)
    y0, y1, fy = _bilinear_axis(h, height)
    x0, x1, fx = _bilinear_axis(w, width)
    rows = x[:, :, y0, :] + fy[:, None] * (x[:, :, y1, :] - x[:, :, y0, :])
    out = rows[:, :, :, x0] + fx * (rows[:, :, :, x1] - rows[:, :, :, x0])
    return replace(ds, images=out.astype(np.float32))


# -- splitting -------------------------------------------------------------------------------
@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.6
    val: float = 0.2
    test: float = 0.2
    seed: int = 0
    stratified: bool = True


def _allocate(n: int, spec: SplitSpec, total: int) -> list[int]:
    """Per-split quotas for ``n`` items; fractions if all values <= 1, else absolute counts out of ``total``."""
    parts = [spec.train, spec.val, spec.test]
    frac = all(p <= 1 for p in parts)
    if frac and abs(sum(parts) - 1) < 1e-9:
        a = int(round(n * parts[0]))
        b = min(int(round(n * parts[1])), n - a)
        return [a, b, n - a - b]
    wanted = [p * n if frac else p * n / total for p in parts]
    base = [int(math.floor(v)) for v in wanted]
    rema = sorted(range(3), key=lambda k: (-(wanted[k] - base[k]), k))
    short = int(round(sum(wanted))) - sum(base)
    for k in rema[:short]:
        base[k] += 1
    return base


def split_indices(ds: Dataset, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(ds)
    parts = [spec.train, spec.val, spec.test]
    if any(p < 0 for p in parts):
        raise SpecError("split sizes must be non-negative")
    if all(p <= 1 for p in parts):
        if sum(parts) > 1 + 1e-9:
            raise SpecError(f"split fractions sum to {sum(parts)} > 1")
    elif sum(parts) > n:
        raise SpecError(f"split counts {parts} exceed dataset size {n}")
    rng = np.random.default_rng(spec.seed)
    out: list[list[np.ndarray]] = [[], [], []]
    groups = [np.flatnonzero(ds.labels == c) for c in (0, 1)] if spec.stratified else [np.arange(n)]
    for members in groups:
        members = rng.permutation(members)
        quotas = _allocate(len(members), spec, n)
        start = 0
        for k, q in enumerate(quotas):
            out[k].append(members[start:start + q])
            start += q
    return tuple(np.sort(np.concatenate(o)).astype(np.int64) for o in out)


def split(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    return tuple(ds.subset(idx) for idx in split_indices(ds, spec))
