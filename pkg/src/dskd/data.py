"""Seeded synthetic image classes and a tiny raster container format.

Raster layout (all integers little-endian uint32)::

    offset 0   magic  b"DSKR"
    offset 4   K      number of classes
    offset 8   N      number of images
    offset 12  C, H, W
    offset 24  N label bytes (uint8, each < K)
    ...        N*C*H*W pixel bytes (uint8, row-major N×C×H×W)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Tuple

import numpy as np

RASTER_MAGIC = b"DSKR"
_HEADER = struct.Struct("<4s5I")


class RasterFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    images: np.ndarray  # N×C×H×W in [0, 1]
    labels: np.ndarray  # N×K one-hot
    split: str = "train"

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {self.images.shape}")
        if self.labels.ndim != 2 or self.labels.shape[0] != self.images.shape[0]:
            raise ValueError(f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def class_count(self) -> int:
        return self.labels.shape[1]

    @property
    def class_index(self) -> np.ndarray:
        return self.labels.argmax(axis=1)


def one_hot(indices, num_classes: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.size, num_classes))
    out[np.arange(idx.size), idx] = 1.0
    return out


def generate_synthetic(num_classes: int = 10, per_class: int = 50, image_size: int = 16, seed: int = 0,
                       channels: int = 3, noise: float = 0.6, orientation_jitter: float = 0.25,
                       phase_jitter: float = 1.0, contrast: float = 0.3,
                       colour_shift: float = 0.1) -> Tuple[LabeledDataset, LabeledDataset]:
    """Oriented gratings, one family per class, split 80/20 per class.

    Class k has a fixed orientation, spatial frequency, phase and colour
    tint; samples jitter orientation and phase and add Gaussian pixel noise.
    ``colour_shift`` adds a weak class-specific mean colour, an easy cue
    that gets small networks off the chance-level plateau quickly.
    """
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if image_size < 8:
        raise ValueError(f"image_size must be >= 8, got {image_size}")
    if per_class < 5:
        raise ValueError(f"per_class must be >= 5 for an 80/20 split, got {per_class}")

    class_rng = np.random.default_rng([seed, 0])
    thetas = np.pi * np.arange(num_classes) / num_classes
    freqs = 1.5 + (np.arange(num_classes) % 3) * 0.75  # cycles per image
    phases = class_rng.uniform(0, 2 * np.pi, num_classes)
    tints = class_rng.uniform(0.6, 1.0, (num_classes, channels))
    offsets = class_rng.uniform(-1.0, 1.0, (num_classes, channels))

    coords = (np.arange(image_size) + 0.5) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    rng = np.random.default_rng([seed, 1])
    n_test = per_class // 5
    train_x, train_y, test_x, test_y = [], [], [], []
    for k in range(num_classes):
        theta = thetas[k] + rng.normal(0, orientation_jitter, per_class)
        phase = phases[k] + rng.uniform(-phase_jitter, phase_jitter, per_class)
        u = xx[None] * np.cos(theta)[:, None, None] + yy[None] * np.sin(theta)[:, None, None]
        wave = np.cos(2 * np.pi * freqs[k] * u + phase[:, None, None])
        img = 0.5 + colour_shift * offsets[k][None, :, None, None]
        img = img + contrast * tints[k][None, :, None, None] * wave[:, None]
        img = img + rng.normal(0, noise, img.shape)
        img = np.clip(img, 0.0, 1.0)
        train_x.append(img[n_test:])
        test_x.append(img[:n_test])
        train_y += [k] * (per_class - n_test)
        test_y += [k] * n_test

    train = LabeledDataset(np.concatenate(train_x), one_hot(train_y, num_classes), "train")
    test = LabeledDataset(np.concatenate(test_x), one_hot(test_y, num_classes), "test")
    return train, test


def batch_iter(ds: LabeledDataset, batch_size: int,
               shuffle_seed=None) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; the last batch may be short."""
    for idx in batch_indices(len(ds), batch_size, shuffle_seed):
        yield ds.images[idx], ds.labels[idx]


def batch_indices(n: int, batch_size: int, shuffle_seed=None) -> List[np.ndarray]:
    """Index batches of a seeded permutation of range(n); no shuffle when seed is None."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    return [order[s:s + batch_size] for s in range(0, n, batch_size)]


# ------------------------------------------------------------------ raster container


def save_raster_dataset(ds: LabeledDataset, path) -> Path:
    n, c, h, w = ds.images.shape
    k = ds.class_count
    if k > 256:
        raise ValueError("raster format stores labels as bytes; at most 256 classes")
    pixels = np.clip(np.rint(ds.images * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(RASTER_MAGIC, k, n, c, h, w))
        f.write(ds.class_index.astype(np.uint8).tobytes())
        f.write(pixels.tobytes())
    return path


def load_raster_dataset(path, split: str = "train") -> LabeledDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise RasterFormatError(f"{path}: truncated header: {len(raw)} bytes, need {_HEADER.size} at byte offset 0")
    magic, k, n, c, h, w = _HEADER.unpack_from(raw, 0)
    if magic != RASTER_MAGIC:
        raise RasterFormatError(f"{path}: bad magic {magic!r} at byte offset 0, expected {RASTER_MAGIC!r}")
    if k < 2 or min(c, h, w) < 1:
        raise RasterFormatError(f"{path}: invalid header K={k} C={c} H={h} W={w}")
    label_end = _HEADER.size + n
    pixel_end = label_end + n * c * h * w
    if len(raw) < label_end:
        raise RasterFormatError(f"{path}: truncated labels at byte offset {len(raw)}, expected {label_end} bytes")
    if len(raw) < pixel_end:
        raise RasterFormatError(f"{path}: truncated pixels at byte offset {len(raw)}, expected {pixel_end} bytes")
    if len(raw) > pixel_end:
        raise RasterFormatError(f"{path}: {len(raw) - pixel_end} trailing bytes at byte offset {pixel_end}")
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=_HEADER.size)
    bad = np.nonzero(labels >= k)[0]
    if bad.size:
        i = int(bad[0])
        raise RasterFormatError(
            f"{path}: label {labels[i]} >= K={k} for image {i} at byte offset {_HEADER.size + i}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * c * h * w, offset=label_end)
    images = pixels.reshape(n, c, h, w).astype(np.float64) / 255.0
    return LabeledDataset(images, one_hot(labels, k), split)
