"""Datasets: IDX files, synthetic generators, splits and augmentation."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
SYNTH_KINDS = ("gaussian_blobs", "striped_textures", "glyphs")


class IdxError(ValueError):
    """Base class for malformed IDX input."""


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class IdxCountMismatchError(IdxError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, C, H, W] float32, standardized
    labels: np.ndarray  # [n] int64
    num_classes: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if not self.splits:
            self.splits = {"train": np.arange(len(self.labels))}
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def split(self, tag: str) -> tuple[np.ndarray, np.ndarray]:
        if tag not in self.splits:
            raise KeyError(f"dataset has no {tag!r} split (has {sorted(self.splits)})")
        idx = self.splits[tag]
        return self.images[idx], self.labels[idx]

    def batches(self, tag: str, batch_size: int, rng: np.random.Generator | None = None):
        """Yield ``(x, y)`` minibatches; shuffled when ``rng`` is given, last partial batch dropped then."""
        idx = self.splits[tag]
        if rng is not None:
            idx = idx[rng.permutation(len(idx))]
            stop = len(idx) - len(idx) % batch_size if len(idx) >= batch_size else len(idx)
        else:
            stop = len(idx)
        for start in range(0, stop, batch_size):
            sel = idx[start:start + batch_size]
            yield self.images[sel], self.labels[sel]


def standardize(images: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel zero mean, unit variance."""
    mean = images.mean(axis=(0, 2, 3))
    std = images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)
    out = (images - mean[None, :, None, None]) / std[None, :, None, None]
    return out.astype(np.float32), mean, std


# -- IDX -----------------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, expected_magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IdxTruncatedError(f"{what} file is truncated (no header)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{what} file has magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{what} file is truncated inside the dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxTruncatedError(f"{what} file holds {len(raw) - header} data bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, "image")
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, "label")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float32)[:, None] / 255.0
    x, mean, std = standardize(x)
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if len(y) else 0
    return Dataset(x, y, num_classes, mean=mean, std=std)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (handy for fixtures and exports)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# -- synthetic data ----------------------------------------------------------------------


def _balanced_labels(n: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def synth_dataset(
    kind: str, n: int, classes: int = 10, size: int = 16, seed: int = 0, channels: int = 1, noise: float | None = None
) -> Dataset:
    """Deterministic toy image classification data.

    ``gaussian_blobs``: each class is a fixed random template plus isotropic
    noise, so the classes are linearly separable in pixel space.
    ``striped_textures``: each class is a (orientation, frequency) pair of
    sinusoidal stripes with random phase, contrast and additive noise inside a
    random window, so only convolutional features with a wide enough
    receptive field separate them.
    ``glyphs``: each class is a random 6x6 binary shape placed anywhere in
    the image among 3x3 fragments cut from other shapes. Unlike the two
    kinds above, accuracy after a short schedule depends strongly on network
    capacity, which makes it the better probe for ranking architectures.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if n < classes:
        raise ValueError(f"need n >= classes ({n} < {classes})")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, classes, rng)
    if kind == "gaussian_blobs":
        templates = rng.standard_normal((classes, channels, size, size))
        noise = 0.5 if noise is None else noise
        images = templates[labels] + noise * rng.standard_normal((n, channels, size, size))
    elif kind == "glyphs":
        images = _glyphs(labels, classes, size, channels, rng, 0.3 if noise is None else noise)
    else:
        images = _stripes(labels, classes, size, channels, rng, 1.0 if noise is None else noise)
    images, mean, std = standardize(images.astype(np.float32))
    return Dataset(images, labels.astype(np.int64), classes, mean=mean, std=std)


def _stripes(labels, classes, size, channels, rng, noise: float) -> np.ndarray:
    n = len(labels)
    n_freq = 2
    n_orient = -(-classes // n_freq)
    angle = np.pi * (labels % n_orient) / n_orient
    freq = np.where(labels // n_orient == 0, 1.0, 1.4)
    angle = angle + rng.normal(0, 0.12, n)
    freq = freq * np.exp(rng.normal(0, 0.06, n))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    proj = np.cos(angle)[:, None, None] * xx + np.sin(angle)[:, None, None] * yy
    phase = rng.uniform(0, 2 * np.pi, n)
    wave = np.sin(freq[:, None, None] * proj + phase[:, None, None])

    # random soft window so the texture covers only part of the image
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, (2, n))
    radius = rng.uniform(0.3 * size, 0.6 * size, n)
    dist2 = (yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2
    window = np.exp(-dist2 / (2 * radius[:, None, None] ** 2))
    contrast = rng.uniform(0.6, 1.4, n)
    img = contrast[:, None, None] * window * wave
    out = img[:, None].repeat(channels, axis=1)
    out = out + noise * rng.standard_normal(out.shape)
    return out


def _glyphs(labels, classes, size, channels, rng, noise: float, glyph: int = 6, clutter: int = 3) -> np.ndarray:
    if size < glyph:
        raise ValueError(f"glyphs need size >= {glyph}")
    n = len(labels)
    shapes = (rng.random((classes, glyph, glyph)) < 0.45).astype(np.float64)
    img = np.zeros((n, size, size))
    for i in range(n):
        for _ in range(clutter):
            u, v = rng.integers(0, glyph - 2, 2)
            piece = shapes[rng.integers(classes), u:u + 3, v:v + 3]
            y, x = rng.integers(0, size - 2, 2)
            img[i, y:y + 3, x:x + 3] += piece * rng.uniform(0.5, 1.0)
        y, x = rng.integers(0, size - glyph + 1, 2)
        img[i, y:y + glyph, x:x + glyph] += shapes[labels[i]] * rng.uniform(0.7, 1.3)
    out = img[:, None].repeat(channels, axis=1)
    return out + noise * rng.standard_normal(out.shape)


# -- splits and augmentation ---------------------------------------------------------------


def split_dataset(d: Dataset, val_fraction: float, seed: int, source: str = "train") -> Dataset:
    """Carve a validation split out of ``source`` by a seeded shuffle."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    idx = d.splits[source]
    perm = idx[np.random.default_rng(seed).permutation(len(idx))]
    n_val = int(round(val_fraction * len(idx)))
    if n_val == 0 or n_val == len(idx):
        raise EmptySplitError(f"val_fraction={val_fraction} on {len(idx)} samples leaves an empty split")
    splits = {k: v for k, v in d.splits.items() if k != source}
    splits["train"] = np.sort(perm[n_val:])
    splits["val"] = np.sort(perm[:n_val])
    return Dataset(d.images, d.labels, d.num_classes, splits, d.mean, d.std)


def with_test_split(d: Dataset, test_fraction: float, seed: int) -> Dataset:
    """Hold out a test split from train (used for synthetic data that has none)."""
    tmp = split_dataset(d, test_fraction, seed)
    splits = dict(tmp.splits)
    splits["test"] = splits.pop("val")
    if "val" in d.splits:
        splits["val"] = d.splits["val"]
    return Dataset(d.images, d.labels, d.num_classes, splits, d.mean, d.std)


def augment(
    x: np.ndarray,
    policy: str = "none",
    rng: np.random.Generator | None = None,
    flip_p: float = 0.5,
    pad: int = 4,
) -> np.ndarray:
    """``crop_flip``: reflect-pad by ``pad``, random crop back to size, horizontal flip with ``flip_p``."""
    if policy == "none":
        return x
    if policy != "crop_flip":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    rng = rng or np.random.default_rng()
    B, C, H, W = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="reflect")
    dy = rng.integers(0, 2 * pad + 1, B)
    dx = rng.integers(0, 2 * pad + 1, B)
    out = np.empty_like(x)
    for i in range(B):
        out[i] = padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W]
    flip = rng.random(B) < flip_p
    out[flip] = out[flip][..., ::-1]
    return out
