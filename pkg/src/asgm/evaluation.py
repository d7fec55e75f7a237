"""Sample statistics, two-sample tests and image montages."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.linalg import LinearOperator, eigsh
from scipy.spatial.distance import cdist, pdist

from .errors import DimensionError
from .grid import write_image

HIST_BINS = 64
MAX_DENSE_PIXELS = 4096


@dataclass
class MomentReport:
    mean: np.ndarray
    top_eigenvalues: np.ndarray
    histograms: np.ndarray  # (C, HIST_BINS), each row sums to 1
    n: int


def _stack(samples) -> np.ndarray:
    a = np.asarray(samples, dtype=np.float64)
    if a.ndim == 0 or len(a) == 0:
        raise ValueError("need at least one sample")
    return a


def covariance_spectrum(samples, k: int = 64) -> np.ndarray:
    """Largest ``k`` eigenvalues of the unbiased sample covariance of flattened fields."""
    a = _stack(samples)
    n = len(a)
    flat = a.reshape(n, -1)
    d = flat - flat.mean(axis=0)
    denom = max(n - 1, 1)
    P = flat.shape[1]
    k = min(k, P)
    if P <= MAX_DENSE_PIXELS:
        ev = np.linalg.eigvalsh(d.T @ d / denom)[::-1]
        return np.maximum(ev[:k], 0.0)
    op = LinearOperator((P, P), matvec=lambda v: d.T @ (d @ v) / denom, dtype=np.float64)
    k = min(k, P - 2, n)
    ev = eigsh(op, k=k, which="LA", return_eigenvectors=False, v0=np.ones(P))
    return np.maximum(np.sort(ev)[::-1], 0.0)


def moments(samples, k: int = 64) -> MomentReport:
    """Mean field, top covariance eigenvalues and per-channel histograms on ``[-1, 1]``."""
    a = _stack(samples)
    if a.ndim != 4:
        raise DimensionError("samples must have shape (n, C, H, W)")
    hist = np.stack([
        np.histogram(np.clip(a[:, c], -1, 1), bins=HIST_BINS, range=(-1, 1))[0] / a[:, c].size
        for c in range(a.shape[1])
    ])
    return MomentReport(a.mean(axis=0), covariance_spectrum(a, k), hist, len(a))


def _flat(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(len(a), -1)


def median_bandwidth(a, b) -> float:
    """Median pairwise Euclidean distance over the pooled samples."""
    z = np.concatenate([_flat(a), _flat(b)])
    d = pdist(z)
    med = float(np.median(d)) if d.size else 1.0
    return med if med > 0 else 1.0


def _mmd_from_gram(K, n) -> float:
    Kxx = K[:n, :n]
    Kyy = K[n:, n:]
    Kxy = K[:n, n:]
    m = K.shape[0] - n
    sxx = (Kxx.sum() - np.trace(Kxx)) / (n * (n - 1))
    syy = (Kyy.sum() - np.trace(Kyy)) / (m * (m - 1))
    return float(sxx + syy - 2 * Kxy.mean())


def _gram(a, b, bandwidth):
    z = np.concatenate([_flat(a), _flat(b)])
    D2 = cdist(z, z, "sqeuclidean")
    return np.exp(-D2 / (2 * bandwidth**2))


def mmd_rbf(a, b, bandwidth: float | None = None) -> float:
    """Unbiased squared MMD with a Gaussian kernel, clamped at zero.

    ``bandwidth=None`` uses the median heuristic on the pooled samples.
    """
    a, b = _flat(a), _flat(b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("mmd needs at least two samples in each set")
    h = median_bandwidth(a, b) if bandwidth is None else bandwidth
    return max(_mmd_from_gram(_gram(a, b, h), len(a)), 0.0)


def mmd_permutation_test(a, b, n_perm: int = 200, seed: int = 0, bandwidth: float | None = None):
    """Return ``(mmd2, null)`` where ``null`` holds MMD^2 under random relabelings of the pooled set."""
    a, b = _flat(a), _flat(b)
    if len(a) < 2 or len(b) < 2:
        raise ValueError("mmd needs at least two samples in each set")
    h = median_bandwidth(a, b) if bandwidth is None else bandwidth
    K = _gram(a, b, h)
    n = len(a)
    stat = max(_mmd_from_gram(K, n), 0.0)
    rng = np.random.default_rng(seed)
    null = np.empty(n_perm)
    for i in range(n_perm):
        p = rng.permutation(len(K))
        null[i] = max(_mmd_from_gram(K[np.ix_(p, p)], n), 0.0)
    return stat, null


def gradient_magnitude(x) -> np.ndarray:
    """Central-difference gradient magnitude per channel (one-sided at the border)."""
    x = np.asarray(x, dtype=np.float64)
    g1, g2 = np.gradient(x, axis=(-2, -1))
    return np.sqrt(g1 * g1 + g2 * g2)


def edge_correlation(a, b) -> float:
    """Pearson correlation of gradient-magnitude maps, averaged over channels.

    Channels where one map is constant contribute 0; if both fields are
    constant the correlation is undefined and ``ValueError`` is raised.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    ga, gb = gradient_magnitude(a), gradient_magnitude(b)
    if np.ptp(a) == 0 and np.ptp(b) == 0:
        raise ValueError("edge correlation undefined for two constant fields")
    vals = []
    for c in range(a.shape[0]):
        u = ga[c].ravel() - ga[c].mean()
        v = gb[c].ravel() - gb[c].mean()
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        vals.append(float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else 0.0)
    return float(np.clip(np.mean(vals), -1.0, 1.0))


def montage(rows, path, labels=None, separator: float = 1.0) -> Path:
    """Tile ``rows`` (a list of lists of fields) into one image with 1-pixel separators.

    Tile values are in ``[-1, 1]``.  Grayscale tiles give a PGM, three-channel
    tiles a PPM.  When ``labels`` is given, a ``.txt`` index with one label
    per row is written next to the image.
    """
    tiles = [[np.asarray(t, dtype=np.float64) for t in row] for row in rows]
    if not tiles or not tiles[0]:
        raise ValueError("montage needs at least one tile")
    shape = tiles[0][0].shape
    ncol = max(len(r) for r in tiles)
    for r in tiles:
        for t in r:
            if t.shape != shape:
                raise DimensionError(f"tile shape {t.shape} differs from {shape}")
    C, H, W = shape if len(shape) == 3 else (1, *shape)
    nrow = len(tiles)
    canvas = np.full((C, nrow * H + nrow - 1, ncol * W + ncol - 1), separator)
    for i, r in enumerate(tiles):
        for j, t in enumerate(r):
            canvas[:, i * (H + 1):i * (H + 1) + H, j * (W + 1):j * (W + 1) + W] = t.reshape(C, H, W)
    path = Path(path)
    write_image(canvas, path)
    if labels is not None:
        lines = [f"{i}\t{lab}" for i, lab in enumerate(labels)]
        path.with_suffix(".txt").write_text("# row\tlabel\n" + "\n".join(lines) + "\n")
    return path


def write_metrics(rows, path) -> Path:
    """Write ``(metric, value, n, seed)`` rows as CSV."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value", "n", "seed"])
        for metric, value, n, seed in rows:
            w.writerow([metric, f"{value:.10g}", n, seed])
    return path
