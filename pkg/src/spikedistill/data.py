"""Datasets for desk-scale experiments: a synthetic pattern task, IDX / tensor-file loading,
label-noise injection and seeded mini-batching."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor_io
from .tensor import DomainError

LABEL_MAGIC = b"STLB"
IDX_IMAGES_3D = 0x00000803
IDX_IMAGES_4D = 0x00000804
IDX_LABELS = 0x00000801
_IDX_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4"), 0x0E: np.dtype(">f8")}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, c, h, w) in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        n = self.images.shape[0]
        if n == 0:
            raise DomainError("empty dataset")
        if self.labels.shape != (n,):
            raise DatasetFormatError(f"{n} images but labels shaped {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# -- synthetic patterns ---------------------------------------------------------------
def _grid(size: int):
    c = (np.arange(size) + 0.5) / size - 0.5
    return np.meshgrid(c, c, indexing="ij")


def _bars(rng, yy, xx, variant):
    theta = rng.uniform(0, np.pi)
    freq = rng.uniform(2.0, 3.5) * (1 + 0.5 * variant)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return (wave > 0.3).astype(float)


def _blobs(rng, yy, xx, variant):
    out = np.zeros_like(xx)
    for _ in range(int(rng.integers(2, 4))):
        cy, cx = rng.uniform(-0.35, 0.35, size=2)
        r = rng.uniform(0.08, 0.14) / (1 + 0.3 * variant)
        out = np.maximum(out, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r)))
    return out


def _checker(rng, yy, xx, variant):
    f = rng.uniform(2.5, 4.0) * (1 + 0.5 * variant)
    py, px = rng.uniform(0, 2 * np.pi, size=2)
    return (np.sin(2 * np.pi * f * yy + py) * np.sin(2 * np.pi * f * xx + px) > 0).astype(float)


_FAMILIES = (_bars, _blobs, _checker)


def _render(rng, label: int, num_classes: int, size: int, channels: int, yy, xx) -> np.ndarray:
    fam, variant = label % 3, label // 3
    signal = _FAMILIES[fam](rng, yy, xx, variant)
    # a weaker pattern from another class; it never outshines the class signal
    other = int(rng.integers(0, num_classes - 1))
    other += other >= label
    distractor = _FAMILIES[other % 3](rng, yy, xx, other // 3)
    amp_s = rng.uniform(0.25, 0.55)
    amp_d = amp_s * rng.uniform(0.0, 0.6)
    col_s = rng.uniform(0.4, 1.0, size=channels)[:, None, None]
    col_d = rng.uniform(0.4, 1.0, size=channels)[:, None, None]
    base = rng.uniform(0.15, 0.45)
    img = base + amp_s * col_s * signal[None] + amp_d * col_d * distractor[None]
    return img


def synth_generate(num_classes: int = 3, per_class: int = 200, size: int = 16, seed: int = 0,
                   channels: int = 3, noise_std: float = 0.1, split: str = "train") -> Dataset:
    """Class-conditional bars / blobs / checkerboards with Gaussian pixel noise, clamped to [0, 1]."""
    if num_classes < 2:
        raise DomainError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    yy, xx = _grid(size)
    labels = np.repeat(np.arange(num_classes), per_class)
    rng.shuffle(labels)
    images = np.empty((labels.size, channels, size, size))
    for i, y in enumerate(labels):
        images[i] = _render(rng, int(y), num_classes, size, channels, yy, xx)
    images += rng.normal(0.0, noise_std, size=images.shape)
    np.clip(images, 0.0, 1.0, out=images)
    return Dataset(images, labels.astype(np.int64), num_classes, split)


def synth_splits(num_classes: int = 3, train_per_class: int = 200, test_per_class: int = 100,
                 size: int = 16, seed: int = 0, channels: int = 3, noise_std: float = 0.1) -> tuple[Dataset, Dataset]:
    train_seed, test_seed = np.random.SeedSequence(seed).generate_state(2)
    train = synth_generate(num_classes, train_per_class, size, int(train_seed), channels, noise_std, "train")
    test = synth_generate(num_classes, test_per_class, size, int(test_seed), channels, noise_std, "test")
    return train, test


# -- label noise & batching ---------------------------------------------------------------
def corrupt_labels(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Give exactly round(fraction * n) instances a uniformly drawn wrong label."""
    if not 0.0 <= fraction <= 1.0:
        raise DomainError(f"noise fraction must be in [0, 1], got {fraction}")
    n = len(ds)
    k = int(np.floor(fraction * n + 0.5))
    if k == 0:
        return ds
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    labels = ds.labels.copy()
    shift = rng.integers(1, ds.num_classes, size=k)
    labels[idx] = (labels[idx] + shift) % ds.num_classes
    return replace(ds, labels=labels)


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = True
    shuffle: bool = True


def num_batches(n: int, plan: BatchPlan) -> int:
    return n // plan.batch_size if plan.drop_last else -(-n // plan.batch_size)


def iterate_batches(ds: Dataset, plan: BatchPlan, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    n, b = len(ds), plan.batch_size
    if b < 1 or b > n:
        raise DomainError(f"batch size {b} is not in [1, {n}]")
    order = np.random.default_rng([plan.seed, epoch]).permutation(n) if plan.shuffle else np.arange(n)
    for k in range(num_batches(n, plan)):
        idx = order[k * b:(k + 1) * b]
        yield ds.images[idx], ds.labels[idx]


def batch_indices(n: int, plan: BatchPlan, epoch: int = 0) -> list[np.ndarray]:
    order = np.random.default_rng([plan.seed, epoch]).permutation(n) if plan.shuffle else np.arange(n)
    b = plan.batch_size
    return [order[k * b:(k + 1) * b] for k in range(num_batches(n, plan))]


# -- file formats ---------------------------------------------------------------------------
def _read_idx(path: Path, expect_labels: bool) -> np.ndarray:
    buf = path.read_bytes()
    if len(buf) < 4:
        raise DatasetFormatError(f"{path}: truncated IDX header at byte 0")
    zero, dtype_code, ndim = struct.unpack_from(">HBB", buf, 0)
    magic = struct.unpack_from(">I", buf, 0)[0]
    if zero != 0 or dtype_code not in _IDX_TYPES:
        raise DatasetFormatError(f"{path}: bad IDX magic 0x{magic:08x} at byte 0")
    if expect_labels and (ndim != 1 or dtype_code != 0x08):
        raise DatasetFormatError(f"{path}: expected label magic 0x{IDX_LABELS:08x}, got 0x{magic:08x} at byte 0")
    if not expect_labels and ndim not in (3, 4):
        raise DatasetFormatError(f"{path}: expected image magic 0x{IDX_IMAGES_3D:08x}/0x{IDX_IMAGES_4D:08x}, "
                                 f"got 0x{magic:08x} at byte 0")
    if len(buf) < 4 + 4 * ndim:
        raise DatasetFormatError(f"{path}: truncated dimension header at byte 4")
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    start = 4 + 4 * ndim
    dtype = _IDX_TYPES[dtype_code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(buf) - start < need:
        raise DatasetFormatError(f"{path}: truncated payload; need {need} bytes from byte {start}, "
                                 f"have {len(buf) - start}")
    return np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims)), offset=start).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    """Write a uint8 IDX file (images as (n, h, w) or (n, c, h, w), labels as (n,))."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise DatasetFormatError("write_idx only emits unsigned-byte payloads")
    header = struct.pack(">HBB", 0, 0x08, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def write_labels(path: str | Path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype="<u4")
    Path(path).write_bytes(LABEL_MAGIC + struct.pack("<I", labels.size) + labels.tobytes())


def read_labels(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != LABEL_MAGIC:
        raise DatasetFormatError(f"{path}: bad label magic {buf[:4]!r} at byte 0")
    if len(buf) < 8:
        raise DatasetFormatError(f"{path}: truncated label count at byte 4")
    (count,) = struct.unpack_from("<I", buf, 4)
    if len(buf) - 8 < 4 * count:
        raise DatasetFormatError(f"{path}: truncated labels; need {4 * count} bytes from byte 8, have {len(buf) - 8}")
    return np.frombuffer(buf, dtype="<u4", count=count, offset=8).astype(np.int64)


def _to_unit(images: np.ndarray, path: Path) -> np.ndarray:
    if images.dtype.kind == "u":
        return images.astype(np.float64) / 255.0
    out = images.astype(np.float64)
    if not (np.all(np.isfinite(out)) and out.min() >= 0.0 and out.max() <= 1.0):
        raise DatasetFormatError(f"{path}: floating-point images must lie in [0, 1]")
    return out


def load_dataset(images_path: str | Path, labels_path: str | Path, fmt: str = "idx",
                 num_classes: int | None = None, split: str = "train") -> Dataset:
    """Load ``idx`` (IDX images + IDX labels) or ``raw-tensor`` (tensor file + label file)."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    if fmt == "idx":
        images = _read_idx(images_path, expect_labels=False)
        labels = _read_idx(labels_path, expect_labels=True).astype(np.int64)
    elif fmt == "raw-tensor":
        try:
            images = tensor_io.load(images_path)
        except tensor_io.TensorFormatError as exc:
            raise DatasetFormatError(f"{images_path}: {exc}") from exc
        labels = read_labels(labels_path)
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4:
        raise DatasetFormatError(f"{images_path}: images must be rank 3 or 4, got {images.shape}")
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(f"image/label count mismatch: {images.shape[0]} images in {images_path}, "
                                 f"{labels.shape[0]} labels in {labels_path}")
    n_cls = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(_to_unit(images, images_path), labels, n_cls, split)


def save_dataset(ds: Dataset, images_path: str | Path, labels_path: str | Path, fmt: str = "raw-tensor") -> None:
    if fmt == "raw-tensor":
        tensor_io.save(images_path, ds.images.astype(np.float64))
        write_labels(labels_path, ds.labels)
    elif fmt == "idx":
        write_idx(images_path, np.round(ds.images * 255).astype(np.uint8))
        write_idx(labels_path, ds.labels.astype(np.uint8))
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
