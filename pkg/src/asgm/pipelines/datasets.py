"""Synthetic image sources: a seeded shapes corpus, a structured test card, k-means guides."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.cluster.vq import kmeans2

from ..errors import DatasetError
from ..grid import read_image

SUPERSAMPLE = 4


def _coverage(inside, height: int, width: int) -> np.ndarray:
    """Fraction of each pixel covered by ``inside(r, c)``, from a supersampled grid."""
    s = SUPERSAMPLE
    r = (np.arange(height * s) + 0.5) / s
    c = (np.arange(width * s) + 0.5) / s
    mask = inside(r[:, None], c[None, :]).astype(np.float64)
    return mask.reshape(height, s, width, s).mean(axis=(1, 3))


def _disk(cy, cx, rad):
    return lambda r, c: (r - cy) ** 2 + (c - cx) ** 2 <= rad * rad


def _rect(y0, x0, y1, x1):
    return lambda r, c: (r >= y0) & (r <= y1) & (c >= x0) & (c <= x1)


def _triangle(pts):
    (ay, ax), (by, bx), (cy, cx) = pts

    def inside(r, c):
        d1 = (r - by) * (ax - bx) - (ay - by) * (c - bx)
        d2 = (r - cy) * (bx - cx) - (by - cy) * (c - cx)
        d3 = (r - ay) * (cx - ax) - (cy - ay) * (c - ax)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)

    return inside


def shapes_image(rng: np.random.Generator, size: int = 32, channels: int = 1) -> np.ndarray:
    """One image: a flat background with one to three anti-aliased disks, rectangles or triangles."""
    img = np.ones((channels, size, size)) * rng.uniform(-0.9, 0.9, (channels, 1, 1))
    for _ in range(rng.integers(1, 4)):
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0.2 * size, 0.8 * size, 2)
        ext = rng.uniform(0.12 * size, 0.3 * size)
        if kind == 0:
            inside = _disk(cy, cx, ext)
        elif kind == 1:
            hy, hx = ext * rng.uniform(0.5, 1.0, 2)
            inside = _rect(cy - hy, cx - hx, cy + hy, cx + hx)
        else:
            ang = rng.uniform(0, 2 * np.pi) + np.array([0, 2 * np.pi / 3, 4 * np.pi / 3])
            inside = _triangle(list(zip(cy + ext * np.sin(ang), cx + ext * np.cos(ang))))
        a = _coverage(inside, size, size)
        color = rng.uniform(-1, 1, (channels, 1, 1))
        img = (1 - a) * img + a * color
    return img


def shapes_dataset(n: int, size: int = 32, channels: int = 1, seed: int = 0) -> np.ndarray:
    """``n`` shapes images of shape ``(channels, size, size)``; image ``i`` depends only on ``(seed, i)``."""
    out = np.empty((n, channels, size, size))
    for i in range(n):
        out[i] = shapes_image(np.random.default_rng([seed, i]), size, channels)
    return out


def checkerboard_disk(size: int = 64, cells: int = 4, level: float = 0.6) -> np.ndarray:
    """Checkerboard of ``cells x cells`` squares at ``+-level`` with a bright disk in the middle."""
    idx = np.arange(size) * cells // size
    board = np.where((idx[:, None] + idx[None, :]) % 2 == 0, level, -level)
    a = _coverage(_disk(size / 2, size / 2, size * 0.28), size, size)
    return ((1 - a) * board + a * 1.0)[None]


def kmeans_guide(image, k: int = 8, seed: int = 0, iterations: int = 25) -> np.ndarray:
    """Replace each pixel by its cluster center after Lloyd iterations in color space."""
    img = np.asarray(image, dtype=np.float64)
    C = img.shape[0]
    pix = img.reshape(C, -1).T
    if k <= 1:
        return np.broadcast_to(pix.mean(axis=0)[:, None, None], img.shape).copy()
    k = min(k, len(np.unique(pix, axis=0)))
    centers, labels = kmeans2(pix, k, iter=iterations, minit="++", seed=np.random.default_rng(seed),
                              missing="warn")
    return centers[labels].T.reshape(img.shape)


def load_image_dir(directory) -> np.ndarray:
    """All ``.pgm``/``.ppm`` images of a directory in name order, as an ``(n, C, H, W)`` array."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"dataset directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))
    if not files:
        raise DatasetError(f"no PGM/PPM images in {d}")
    imgs = [read_image(p) for p in files]
    shape = imgs[0].shape
    for p, im in zip(files, imgs):
        if im.shape != shape:
            raise DatasetError(f"{p.name} has shape {im.shape}, expected {shape}")
    return np.stack(imgs)


def gaussian_mean_field(size: int = 8, channels: int = 1) -> np.ndarray:
    """Smooth deterministic pattern in ``[-0.5, 0.5]`` used as the mean of Gaussian test data."""
    g = np.linspace(-1, 1, size)
    base = 0.5 * np.sin(2 * g)[:, None] * np.cos(3 * g)[None, :]
    return np.stack([np.roll(base, c, axis=1) for c in range(channels)])


def gaussian_dataset(n: int, size: int = 8, channels: int = 1, var: float = 0.1, seed: int = 0) -> np.ndarray:
    """``n`` draws from ``Normal(gaussian_mean_field, var I)``."""
    m = gaussian_mean_field(size, channels)
    z = np.random.default_rng(seed).standard_normal((n, *m.shape))
    return m + np.sqrt(var) * z
