"""Synthetic datasets, the ``.ebmd`` container, CSV/IDX input and image grids."""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "Dataset", "DatasetFormatError", "gen_mixture", "gen_pinwheel", "gen_rings", "grid_centers",
    "save_dataset", "load_dataset", "load_csv", "save_csv", "load_idx", "write_image_grid",
]

MAGIC = b"EBMD"
VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class Dataset:
    data: np.ndarray                 # (n, *shape) float32
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim < 2:
            raise ValueError("data must have shape (n, *example_shape)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint32)
            if self.labels.shape != (self.data.shape[0],):
                raise ValueError("labels must hold one entry per example")

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape[1:]

    @property
    def image_like(self) -> bool:
        return len(self.shape) == 2 or (len(self.shape) == 3 and self.shape[2] == 3)

    def flat(self) -> np.ndarray:
        return self.data.reshape(self.n, -1)

    def subset(self, mask) -> "Dataset":
        return Dataset(self.data[mask], None if self.labels is None else self.labels[mask])


# --------------------------------------------------------------------------
# generators

def gen_mixture(n: int, centers, std: float, rng: np.random.Generator) -> Dataset:
    """Equal-weight isotropic Gaussian mixture labelled by component."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.size == 0:
        raise ValueError("need at least one center")
    if not std > 0:
        raise ValueError("std must be positive")
    labels = rng.integers(0, centers.shape[0], size=n)
    x = centers[labels] + std * rng.standard_normal((n, centers.shape[1]))
    return Dataset(x.reshape(n, centers.shape[1]), labels)


def grid_centers(m: int, spacing: float = 4.0) -> np.ndarray:
    """``m`` 2-D centers on a square grid, centred at the origin."""
    side = int(np.ceil(np.sqrt(m)))
    pts = np.array([(i % side, i // side) for i in range(m)], dtype=np.float64)
    return spacing * (pts - pts.mean(axis=0))


def gen_pinwheel(n: int, arms: int, rng: np.random.Generator, radial_std: float = 0.3,
                 tangential_std: float = 0.1, rate: float = 0.25) -> Dataset:
    """Spiral arms in 2-D; labels give the arm index."""
    if arms < 1:
        raise ValueError("arms must be >= 1")
    labels = rng.integers(0, arms, size=n)
    feats = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
    feats[:, 0] += 1.0
    angles = 2 * np.pi * labels / arms + rate * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    x = np.stack([c * feats[:, 0] - s * feats[:, 1], s * feats[:, 0] + c * feats[:, 1]], axis=1)
    return Dataset((2.0 * x).reshape(n, 2), labels)


def gen_rings(n: int, radii: Sequence[float], rng: np.random.Generator, std: float = 0.05) -> Dataset:
    """Concentric noisy circles; labels give the ring index."""
    radii = np.asarray(radii, dtype=np.float64)
    if radii.size == 0 or np.any(radii <= 0):
        raise ValueError("radii must be positive and non-empty")
    labels = rng.integers(0, radii.size, size=n)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    r = radii[labels] + std * rng.standard_normal(n)
    return Dataset(np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(n, 2), labels)


# --------------------------------------------------------------------------
# .ebmd container

def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def save_dataset(ds: Dataset, path) -> None:
    dims = ds.shape
    parts = [MAGIC, struct.pack("<III", VERSION, ds.n, len(dims)), struct.pack(f"<{len(dims)}I", *dims),
             struct.pack("<B", 1 if ds.labels is not None else 0), ds.data.astype("<f4").tobytes()]
    if ds.labels is not None:
        parts.append(ds.labels.astype("<u4").tobytes())
    _atomic_write(path, b"".join(parts))


def _take(buf: bytes, pos: int, size: int, what: str) -> bytes:
    if pos + size > len(buf):
        raise DatasetFormatError(f"truncated file while reading {what}", len(buf))
    return buf[pos:pos + size]


def load_dataset(path) -> Dataset:
    """Read ``.ebmd`` (or headerless CSV when the suffix is ``.csv``)."""
    if str(path).lower().endswith(".csv"):
        return load_csv(path)
    buf = Path(path).read_bytes()
    if _take(buf, 0, 4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic", 0)
    version, n, rank = struct.unpack("<III", _take(buf, 4, 12, "header"))
    if version != VERSION:
        raise DatasetFormatError(f"unsupported version {version}", 4)
    if rank < 1:
        raise DatasetFormatError("rank must be >= 1", 12)
    pos = 16
    dims = struct.unpack(f"<{rank}I", _take(buf, pos, 4 * rank, "dims"))
    pos += 4 * rank
    flag = _take(buf, pos, 1, "label flag")[0]
    if flag not in (0, 1):
        raise DatasetFormatError(f"bad label flag {flag}", pos)
    pos += 1
    count = n * int(np.prod(dims))
    data = np.frombuffer(_take(buf, pos, 4 * count, "values"), dtype="<f4").astype(np.float32)
    pos += 4 * count
    labels = None
    if flag:
        labels = np.frombuffer(_take(buf, pos, 4 * n, "labels"), dtype="<u4").astype(np.uint32)
        pos += 4 * n
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes", pos)
    return Dataset(data.reshape((n, *dims)), labels)


def load_csv(path) -> Dataset:
    rows = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    return Dataset(rows.astype(np.float32))


def save_csv(ds: Dataset, path) -> None:
    np.savetxt(path, ds.flat(), delimiter=",", fmt="%.9g")


def load_idx(path) -> Dataset:
    """Greyscale IDX images (magic 0x00000803) scaled to [-1, 1]."""
    buf = Path(path).read_bytes()
    magic = struct.unpack(">I", _take(buf, 0, 4, "magic"))[0]
    if magic != 0x00000803:
        raise DatasetFormatError(f"unexpected IDX magic {magic:#010x}", 0)
    n, h, w = struct.unpack(">III", _take(buf, 4, 12, "header"))
    pix = np.frombuffer(_take(buf, 16, n * h * w, "pixels"), dtype=np.uint8)
    return Dataset((pix.astype(np.float32) / 127.5 - 1.0).reshape(n, h, w))


# --------------------------------------------------------------------------
# image grids

def to_pixels(values: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255] with rounding and clipping."""
    return np.clip(np.rint((np.asarray(values, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def write_image_grid(samples, rows: int, cols: int, path) -> tuple[int, int]:
    """Tile ``rows * cols`` images with 1-pixel black separators into PGM or PPM.

    Returns the (height, width) of the written grid.
    """
    samples = np.asarray(samples)
    if samples.ndim not in (3, 4) or (samples.ndim == 4 and samples.shape[3] != 3):
        raise ValueError(f"samples must be (n, H, W) or (n, H, W, 3), got {samples.shape}")
    if rows < 1 or cols < 1 or samples.shape[0] < rows * cols:
        raise ValueError(f"need at least {rows * cols} samples for a {rows}x{cols} grid")
    h, w = samples.shape[1:3]
    color = samples.ndim == 4
    gh, gw = rows * h + rows + 1, cols * w + cols + 1
    grid = np.zeros((gh, gw, 3) if color else (gh, gw), dtype=np.uint8)
    pix = to_pixels(samples[:rows * cols])
    for idx in range(rows * cols):
        r, c = divmod(idx, cols)
        y, x = 1 + r * (h + 1), 1 + c * (w + 1)
        grid[y:y + h, x:x + w] = pix[idx]
    header = f"{'P6' if color else 'P5'}\n{gw} {gh}\n255\n".encode()
    _atomic_write(path, header + grid.tobytes())
    return gh, gw
