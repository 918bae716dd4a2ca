"""Toy image datasets and binary PGM/PPM I/O.

Images are float64 arrays [C, H, W] in [-1, 1]; files store 8-bit values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

KINDS = ("blocks-and-edges", "piecewise-smooth", "checkerboard", "folder")


@dataclass
class ImageSet:
    images: np.ndarray  # [N, C, H, W]
    labels: np.ndarray  # [N]
    num_classes: int

    def __len__(self):
        return len(self.images)

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.images[idx], self.labels[idx]


def _ramp(rng, h, w, channels):
    """Linear colour ramp between two random colours along a random direction."""
    c0 = rng.uniform(-0.9, 0.9, size=channels)
    c1 = rng.uniform(-0.9, 0.9, size=channels)
    theta = rng.uniform(0, 2 * np.pi)
    ys, xs = np.mgrid[0:h, 0:w]
    proj = np.cos(theta) * xs + np.sin(theta) * ys
    span = proj.max() - proj.min()
    u = (proj - proj.min()) / span if span > 0 else np.zeros_like(proj)
    return c0[:, None, None] * (1 - u) + c1[:, None, None] * u


def blocks_and_edges(n: int, seed: int = 0, size: int = 32, channels: int = 3, max_rects: int = 3) -> ImageSet:
    """Smooth background plus 0..max_rects axis-aligned gradient rectangles.

    The class label is the rectangle count.
    """
    rng = np.random.default_rng(seed)
    images = np.empty((n, channels, size, size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        img = 0.5 * _ramp(rng, size, size, channels)
        count = int(rng.integers(0, max_rects + 1))
        lo = max(2, size // 8)
        for _ in range(count):
            h = int(rng.integers(lo, size // 2 + 1))
            w = int(rng.integers(lo, size // 2 + 1))
            top = int(rng.integers(0, size - h + 1))
            left = int(rng.integers(0, size - w + 1))
            img[:, top : top + h, left : left + w] = _ramp(rng, h, w, channels)
        images[i] = img
        labels[i] = count
    return ImageSet(np.clip(images, -1.0, 1.0), labels, max_rects + 1)


def _smooth_field(rng, ys, xs, channels, waves=3):
    f = np.zeros((channels,) + ys.shape)
    for _ in range(waves):
        kx, ky = rng.uniform(-1.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.normal(0.0, 0.3, size=(channels, 1, 1))
        f += amp * np.cos(2 * np.pi * (kx * xs + ky * ys) + phase)
    return f


def piecewise_smooth(n: int, seed: int = 0, size: int = 32, channels: int = 3, max_edges: int = 2) -> ImageSet:
    """Smooth low-frequency cosine fields cut by 0..max_edges straight discontinuities.

    Each cut replaces one side of a random line with a fresh smooth field.
    The class label is the number of cuts.
    """
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size] / size
    images = np.empty((n, channels, size, size))
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        img = _smooth_field(rng, ys, xs, channels)
        cuts = int(rng.integers(0, max_edges + 1))
        for _ in range(cuts):
            theta = rng.uniform(0, 2 * np.pi)
            cy, cx = rng.uniform(0.3, 0.7, size=2)
            side = np.cos(theta) * (xs - cx) + np.sin(theta) * (ys - cy) > 0
            img = np.where(side, _smooth_field(rng, ys, xs, channels), img)
        images[i] = img
        labels[i] = cuts
    return ImageSet(np.clip(images, -1.0, 1.0), labels, max_edges + 1)


def checkerboard(n: int, seed: int = 0, size: int = 32, channels: int = 3, block_sizes=(2, 4, 8)) -> ImageSet:
    """Two-colour checkerboards; the class indexes the block size."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, channels, size, size))
    labels = np.empty(n, dtype=np.int64)
    ys, xs = np.mgrid[0:size, 0:size]
    for i in range(n):
        k = int(rng.integers(0, len(block_sizes)))
        b = block_sizes[k]
        pattern = ((ys // b + xs // b) % 2).astype(float)
        c0 = rng.uniform(-1, 1, size=channels)
        c1 = rng.uniform(-1, 1, size=channels)
        images[i] = c0[:, None, None] * (1 - pattern) + c1[:, None, None] * pattern
        labels[i] = k
    return ImageSet(images, labels, len(block_sizes))


def load_folder(path, n: int | None = None) -> ImageSet:
    """Read every .pgm/.ppm in a folder; a leading ``<int>_`` in the name is the label."""
    files = sorted(p for p in Path(path).iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise FileNotFoundError(f"no PGM/PPM files in {path}")
    if n is not None:
        files = files[:n]
    images, labels = [], []
    for f in files:
        img = read_pnm(f)
        if images and img.shape != images[0].shape:
            raise ValueError(f"{f.name}: size {img.shape} differs from {images[0].shape}")
        images.append(img)
        head = f.stem.split("_", 1)[0]
        labels.append(int(head) if head.isdigit() else 0)
    labels = np.asarray(labels, dtype=np.int64)
    return ImageSet(np.stack(images), labels, int(labels.max()) + 1)


def dataset_synthesize(kind: str, n: int, seed: int = 0, size: int = 32, path=None) -> ImageSet:
    if kind == "blocks-and-edges":
        return blocks_and_edges(n, seed, size)
    if kind == "piecewise-smooth":
        return piecewise_smooth(n, seed, size)
    if kind == "checkerboard":
        return checkerboard(n, seed, size)
    if kind == "folder":
        if path is None:
            raise ValueError("folder datasets need a path")
        return load_folder(path, n)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


# -- netpbm ------------------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    return arr.astype(np.float64) / 127.5 - 1.0


def write_pnm(path, img: np.ndarray) -> None:
    """Write a [C, H, W] image in [-1, 1] as binary P5 (C=1) or P6 (C=3)."""
    img = np.asarray(img)
    C, H, W = img.shape
    if C not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {C}")
    magic = b"P5" if C == 1 else b"P6"
    body = to_uint8(img).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(magic + f"\n{W} {H}\n255\n".encode() + body)


def _tokens(buf: bytes, count: int):
    out, pos = [], 2
    while len(out) < count:
        while buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos : pos + 1].isspace():
            pos += 1
        out.append(int(buf[start:pos]))
    return out, pos + 1


def read_pnm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    (W, H, maxval), pos = _tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported")
    C = 1 if magic == b"P5" else 3
    data = np.frombuffer(buf, dtype=np.uint8, count=W * H * C, offset=pos)
    return from_uint8(data.reshape(H, W, C).transpose(2, 0, 1))
