"""Datasets: CIFAR binary records, a synthetic texture task, splits and batch streams."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .masking import mask_images


class DatasetFormatError(ValueError):
    """Malformed dataset file; the message names the byte offset."""


@dataclass
class ImageDataset:
    """Raw images in [0, 1] plus labels; standardization is attached on demand."""

    images: np.ndarray  # [n, C, H, W] float32
    labels: np.ndarray  # [n] int64
    num_classes: int
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    mirror_invariant: bool = True  # labels survive a horizontal flip

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx: np.ndarray) -> "ImageDataset":
        return ImageDataset(self.images[idx], self.labels[idx], self.num_classes,
                            self.mean, self.std, self.lo, self.hi, self.mirror_invariant)

    def fit_normalization(self) -> "ImageDataset":
        """Per-channel mean/std and standardized min/max computed from these images."""
        mean = self.images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = self.images.std(axis=(0, 2, 3), dtype=np.float64)
        std = np.where(std > 0, std, 1.0)
        z = (self.images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
        lo = z.min(axis=(0, 2, 3))
        hi = z.max(axis=(0, 2, 3))
        hi = np.where(hi > lo, hi, lo + 1.0)
        self.mean, self.std = mean.astype(np.float32), std.astype(np.float32)
        self.lo, self.hi = lo.astype(np.float32), hi.astype(np.float32)
        return self

    def with_normalization(self, other: "ImageDataset") -> "ImageDataset":
        self.mean, self.std, self.lo, self.hi = other.mean, other.std, other.lo, other.hi
        return self

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean.reshape(1, -1, 1, 1)) / self.std.reshape(1, -1, 1, 1)).astype(np.float32)

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return (z * self.std.reshape(1, -1, 1, 1) + self.mean.reshape(1, -1, 1, 1)).astype(np.float32)


# ---------------------------------------------------------------------------
# CIFAR binary format
# ---------------------------------------------------------------------------

@dataclass
class CifarMeta:
    num_classes: int = 10
    height: int = 32
    width: int = 32
    channels: int = 3
    label_bytes: int = 1

    @property
    def record_size(self) -> int:
        return self.label_bytes + self.height * self.width * self.channels

    @classmethod
    def read(cls, path) -> "CifarMeta":
        """Parse a ``key = value`` sidecar; unknown keys are ignored."""
        meta = cls()
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key in ("num_classes", "height", "width", "channels", "label_bytes"):
                setattr(meta, key, int(value))
            elif key in ("H", "W", "C"):
                setattr(meta, {"H": "height", "W": "width", "C": "channels"}[key], int(value))
        return meta

    def write(self, path) -> None:
        Path(path).write_text(
            f"num_classes = {self.num_classes}\nheight = {self.height}\nwidth = {self.width}\n"
            f"channels = {self.channels}\nlabel_bytes = {self.label_bytes}\n"
            "record_layout = label,channel-planar row-major uint8 pixels\n"
        )


def decode_cifar_bytes(raw: bytes, meta: CifarMeta) -> Tuple[np.ndarray, np.ndarray]:
    """Return uint8 pixels [n, C, H, W] and labels [n]."""
    size = meta.record_size
    if len(raw) % size:
        offset = (len(raw) // size) * size
        raise DatasetFormatError(f"truncated record at byte offset {offset} (record size {size})")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, size)
    labels = buf[:, meta.label_bytes - 1].astype(np.int64)
    bad = np.nonzero(labels >= meta.num_classes)[0]
    if bad.size:
        offset = int(bad[0]) * size
        raise DatasetFormatError(f"label {labels[bad[0]]} >= {meta.num_classes} at byte offset {offset}")
    pixels = buf[:, meta.label_bytes:].reshape(-1, meta.channels, meta.height, meta.width)
    return pixels, labels


def load_cifar_binary(path, meta: CifarMeta | None = None) -> ImageDataset:
    """Load one or more record files (a file path or a list of paths)."""
    meta = meta or CifarMeta()
    paths = [path] if isinstance(path, (str, os.PathLike)) else list(path)
    pix, lab = [], []
    for p in paths:
        try:
            pixels, labels = decode_cifar_bytes(Path(p).read_bytes(), meta)
        except DatasetFormatError as exc:
            raise DatasetFormatError(f"{p}: {exc}") from None
        pix.append(pixels)
        lab.append(labels)
    pixels = np.concatenate(pix)
    images = pixels.astype(np.float32) / np.float32(255.0)
    return ImageDataset(images, np.concatenate(lab), meta.num_classes)


def encode_cifar_bytes(images: np.ndarray, labels: np.ndarray, meta: CifarMeta | None = None) -> bytes:
    """Inverse of the decoder for images in [0, 1] (rounded to the nearest byte)."""
    meta = meta or CifarMeta()
    pixels = np.clip(np.rint(np.asarray(images, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    n = len(labels)
    out = np.zeros((n, meta.record_size), dtype=np.uint8)
    out[:, meta.label_bytes - 1] = np.asarray(labels, dtype=np.uint8)
    out[:, meta.label_bytes:] = pixels.reshape(n, -1)
    return out.tobytes()


def write_cifar_binary(dataset: ImageDataset, path, meta: CifarMeta | None = None) -> None:
    Path(path).write_bytes(encode_cifar_bytes(dataset.images, dataset.labels, meta))


# ---------------------------------------------------------------------------
# synthetic textures
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_classes: int = 10
    size: int = 4000
    height: int = 32
    width: int = 32
    channels: int = 3
    seed: int = 0
    noise: float = 0.35
    phase_jitter: bool = True
    contrast_jitter: float = 0.3


def _class_patterns(k: int) -> List[Tuple[float, float]]:
    """(orientation, spatial frequency in cycles per 16 px) per class."""
    n_orient = max(1, (k + 1) // 2)
    out = []
    for c in range(k):
        theta = np.pi * (c % n_orient) / n_orient
        freq = 2.0 if c < n_orient else 4.0
        out.append((theta, freq))
    return out


def make_synthetic(spec: SyntheticSpec | None = None, **overrides) -> ImageDataset:
    """Class-conditional oriented gratings with random phase, tint and noise.

    Each class is one (orientation, frequency) pair.  Random phase means the
    class is carried by local texture energy rather than by any fixed pixel
    pattern, so the task needs nonlinear spatial filtering.
    """
    spec = spec or SyntheticSpec()
    for key, value in overrides.items():
        setattr(spec, key, value)
    rng = np.random.default_rng(spec.seed)
    n, h, w, c = spec.size, spec.height, spec.width, spec.channels
    labels = np.arange(n) % spec.num_classes
    labels = rng.permutation(labels)
    patterns = _class_patterns(spec.num_classes)
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    theta = np.array([patterns[l][0] for l in labels])
    freq = np.array([patterns[l][1] for l in labels]) / 16.0
    phase = rng.uniform(0, 2 * np.pi, n) if spec.phase_jitter else np.zeros(n)
    proj = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
    wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
    amp = 1.0 + spec.contrast_jitter * rng.uniform(-1, 1, n)
    tint = rng.uniform(0.5, 1.0, (n, c)) if spec.phase_jitter else np.ones((n, c))
    base = 0.5 + 0.25 * amp[:, None, None, None] * tint[:, :, None, None] * wave[:, None]
    noise = spec.noise * 0.25 * rng.standard_normal((n, c, h, w))
    images = np.clip(base + noise, 0.0, 1.0).astype(np.float32)
    # a flip maps orientation theta to pi - theta, i.e. onto another class
    return ImageDataset(images, labels.astype(np.int64), spec.num_classes, mirror_invariant=False)


# ---------------------------------------------------------------------------
# splits and batches
# ---------------------------------------------------------------------------

@dataclass
class SplitPlan:
    """Index sets for the search (train/val) and evaluation (train/test) phases.

    ``eval_train`` is the union of the two search splits: the final network
    trains on the whole training pool.
    """

    search_train: np.ndarray
    search_val: np.ndarray
    eval_test: np.ndarray
    seed: int = 0

    @property
    def eval_train(self) -> np.ndarray:
        return np.concatenate([self.search_train, self.search_val])

    @classmethod
    def make(cls, n: int, seed: int = 0, test_fraction: float = 0.2, search_fraction: float = 0.5) -> "SplitPlan":
        perm = np.random.default_rng(seed).permutation(n)
        n_test = int(round(n * test_fraction))
        pool, test = perm[: n - n_test], perm[n - n_test:]
        n_train = int(round(len(pool) * search_fraction))
        return cls(pool[:n_train], pool[n_train:], test, seed)

    def validate(self, n: int) -> None:
        parts = [self.search_train, self.search_val, self.eval_test]
        joined = np.concatenate(parts)
        if len(np.unique(joined)) != len(joined):
            raise ValueError("split index sets overlap")
        if joined.size and (joined.min() < 0 or joined.max() >= n):
            raise ValueError("split indices out of range")


@dataclass
class Splits:
    search_train: ImageDataset
    search_val: ImageDataset
    eval_train: ImageDataset
    eval_test: ImageDataset


def split(dataset: ImageDataset, plan: SplitPlan) -> Splits:
    """Apply ``plan``; normalization constants come from the training pool only."""
    plan.validate(len(dataset))
    pool = dataset.subset(plan.eval_train).fit_normalization()
    parts = [dataset.subset(idx).with_normalization(pool)
             for idx in (plan.search_train, plan.search_val, plan.eval_train, plan.eval_test)]
    return Splits(*parts)


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Random crop with zero padding, then (if ``flip``) a random horizontal flip."""
    b, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, b)
    dx = rng.integers(0, 2 * pad + 1, b)
    flip = rng.random(b) < 0.5 if flip else np.zeros(b, dtype=bool)
    out = np.empty_like(x)
    for i in range(b):
        crop = padded[i, :, dy[i]: dy[i] + h, dx[i]: dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


@dataclass
class Batch:
    """One prepared minibatch; ``split`` tags which data stream it came from."""

    split: str
    x: np.ndarray  # standardized (and augmented) clean image: the reconstruction target
    x_input: np.ndarray  # network input (masked or clean)
    pixel_mask: np.ndarray  # 1 where the reconstruction loss is evaluated
    labels: np.ndarray
    index: np.ndarray


class BatchStream:
    """Seeded epoch iterator over one split.

    The stream owns its RNG; shuffling, augmentation and masking draw from
    it in a fixed order so the batch sequence depends only on the seed.
    """

    def __init__(self, name: str, data: ImageDataset, batch_size: int, rng: np.random.Generator,
                 augment: bool = False, shuffle: bool = True, drop_last: bool = False):
        self.name = name
        self.data = data
        self.batch_size = batch_size
        self.rng = rng
        self.augment = augment
        self.shuffle = shuffle
        self.drop_last = drop_last

    def __len__(self) -> int:
        n = len(self.data)
        return n // self.batch_size if self.drop_last else -(-n // self.batch_size)

    def epoch(self, masking: Optional[Tuple[int, float]] = None, mim_target: str = "masked") -> Iterator[Batch]:
        """Yield batches; ``masking=(patch, ratio)`` zeroes patches of the input.

        ``mim_target`` selects where the reconstruction loss is evaluated:
        ``"masked"`` patches only, or ``"all"`` pixels (clean reconstruction).
        """
        n = len(self.data)
        order = self.rng.permutation(n) if self.shuffle else np.arange(n)
        for i in range(len(self)):
            idx = order[i * self.batch_size: (i + 1) * self.batch_size]
            raw = self.data.images[idx]
            if self.augment:
                raw = augment(raw, self.rng, flip=self.data.mirror_invariant)
            x = self.data.standardize(raw)
            if masking is not None:
                patch, ratio = masking
                x_input, m_pix, _ = mask_images(x, patch, ratio, self.rng)
            else:
                x_input = x
                m_pix = np.ones_like(x) if mim_target == "all" else np.zeros_like(x)
            if masking is not None and mim_target == "all":
                m_pix = np.ones_like(x)
            yield Batch(self.name, x, x_input.astype(np.float32), m_pix.astype(np.float32),
                        self.data.labels[idx], idx)


# ---------------------------------------------------------------------------
# configured loading
# ---------------------------------------------------------------------------

@dataclass
class DataConfig:
    """Dataset selection shared by search and evaluation configs."""

    dataset: str = "synthetic"  # synthetic | cifar
    data_path: str = ""  # comma-separated record files for cifar
    dataset_size: int = 4000
    image_size: int = 32
    num_classes: int = 10
    data_seed: int = 0
    noise: float = 0.35

    def data_errors(self) -> List[str]:
        errs = []
        if self.dataset not in ("synthetic", "cifar"):
            errs.append(f"dataset: unknown dataset {self.dataset!r}")
        if self.dataset == "cifar" and not self.data_path:
            errs.append("data_path: required for the cifar dataset")
        if self.dataset_size < 10:
            errs.append("dataset_size: must be at least 10")
        if self.image_size < 4 or self.image_size % 4:
            errs.append("image_size: must be a positive multiple of 4")
        if self.num_classes < 2:
            errs.append("num_classes: must be at least 2")
        return errs


_CACHE: Dict[tuple, Tuple[ImageDataset, SplitPlan]] = {}


def load_dataset(cfg: DataConfig) -> Splits:
    """Build (or reuse) the configured dataset and split it."""
    key = (cfg.dataset, cfg.data_path, cfg.dataset_size, cfg.image_size, cfg.num_classes,
           cfg.data_seed, cfg.noise)
    if key not in _CACHE:
        if cfg.dataset == "synthetic":
            ds = make_synthetic(SyntheticSpec(num_classes=cfg.num_classes, size=cfg.dataset_size,
                                              height=cfg.image_size, width=cfg.image_size,
                                              seed=cfg.data_seed, noise=cfg.noise))
        else:
            meta_path = Path(cfg.data_path.split(",")[0]).with_suffix(".meta")
            meta = CifarMeta.read(meta_path) if meta_path.exists() else CifarMeta(num_classes=cfg.num_classes)
            ds = load_cifar_binary([p for p in cfg.data_path.split(",") if p], meta)
        _CACHE.clear()
        _CACHE[key] = (ds, SplitPlan.make(len(ds), seed=cfg.data_seed))
    ds, plan = _CACHE[key]
    return split(ds, plan)
