"""Discrete image grid: fields, boundary decomposition, and file I/O.

A *field* is a float64 array of shape ``(channels, height, width)``.  All
operators act on the last two axes, so any number of leading batch axes is
allowed.  Index ``(i1, i2)`` addresses ``x[..., i1, i2]``: ``i1`` runs along
the height axis (``N1 = height``) and ``i2`` along the width axis
(``N2 = width``).
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionError,
    MagicMismatchError,
    MalformedHeaderError,
    TruncatedPayloadError,
    UnsupportedDepthError,
)

MIN_SIZE = 3
SNAPSHOT_MAGIC = b"ASGM0001"
_SNAPSHOT_DIMS = struct.Struct("<4I")

# Pixel classes used by the drift and diffusion stencils.
INTERIOR = 0
LEFT = 1
TOP = 2
RIGHT = 3
BOTTOM = 4
CLASS_NAMES = ("interior", "left", "top", "right", "bottom")


def as_field(values, *, copy: bool = False) -> np.ndarray:
    """Validate and return ``values`` as a ``(C, H, W)`` float64 field.

    A 2-D array is promoted to a single channel.
    """
    x = np.array(values, dtype=np.float64, copy=copy)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DimensionError(f"a field needs shape (C, H, W), got {x.shape}")
    c, h, w = x.shape
    if c < 1:
        raise DimensionError("a field needs at least one channel")
    if h < MIN_SIZE or w < MIN_SIZE:
        raise DimensionError(f"field is {h}x{w}; both sides must be >= {MIN_SIZE}")
    if not np.all(np.isfinite(x)):
        raise ValueError("field contains non-finite values")
    return x


@dataclass(frozen=True)
class DomainDecomposition:
    """Partition of the pixel index set into interior and four boundary parts.

    Each attribute is a list of ``(i1, i2)`` pairs.
    """

    height: int
    width: int
    interior: list
    left: list
    top: list
    right: list
    bottom: list

    def parts(self):
        return {
            "interior": self.interior,
            "left": self.left,
            "top": self.top,
            "right": self.right,
            "bottom": self.bottom,
        }

    def label_map(self) -> np.ndarray:
        """Integer array of shape ``(height, width)`` holding the class of each pixel."""
        labels = np.full((self.height, self.width), -1, dtype=np.int8)
        for code, name in enumerate(CLASS_NAMES):
            for i1, i2 in getattr(self, name):
                labels[i1, i2] = code
        return labels


def decompose_domain(height: int, width: int) -> DomainDecomposition:
    """Split a ``height x width`` grid into interior, left, top, right and bottom.

    With ``N1 = height`` and ``N2 = width``:

    * interior: ``{1..N1-2} x {1..N2-2}``
    * left:     ``{0} x {0..N2-2}``
    * top:      ``{0..N1-2} x {N2-1}``
    * right:    ``{N1-1} x {1..N2-1}``
    * bottom:   ``{1..N1-1} x {0}``

    Every corner belongs to exactly one edge, so the five sets partition the grid.
    """
    n1, n2 = int(height), int(width)
    if n1 < MIN_SIZE or n2 < MIN_SIZE:
        raise DimensionError(f"grid is {n1}x{n2}; both sides must be >= {MIN_SIZE}")
    interior = [(i1, i2) for i1 in range(1, n1 - 1) for i2 in range(1, n2 - 1)]
    left = [(0, i2) for i2 in range(0, n2 - 1)]
    top = [(i1, n2 - 1) for i1 in range(0, n1 - 1)]
    right = [(n1 - 1, i2) for i2 in range(1, n2)]
    bottom = [(i1, 0) for i1 in range(1, n1)]
    return DomainDecomposition(n1, n2, interior, left, top, right, bottom)


# ---------------------------------------------------------------------------
# PGM / PPM


def bytes_to_unit(data: np.ndarray) -> np.ndarray:
    return 2.0 * (np.asarray(data, dtype=np.float64) / 255.0) - 1.0


def unit_to_bytes(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), -1.0, 1.0)
    return np.rint((v + 1.0) * 0.5 * 255.0).astype(np.uint8)


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*([^\s#]+)")


def _parse_netpbm_header(raw: bytes):
    pos = 0
    tokens = []
    for _ in range(4):
        m = _TOKEN.match(raw, pos)
        if m is None:
            raise MalformedHeaderError("incomplete PGM/PPM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic, w, h, maxval = tokens
    if magic not in (b"P5", b"P6"):
        raise MalformedHeaderError(f"unsupported magic {magic!r}; expected P5 or P6")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise MalformedHeaderError("non-integer size or maxval") from exc
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"invalid image size {w}x{h}")
    if maxval != 255:
        raise UnsupportedDepthError(f"maxval {maxval} not supported; only 8-bit (255) images")
    if pos >= len(raw) or raw[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise MalformedHeaderError("missing whitespace after maxval")
    channels = 1 if magic == b"P5" else 3
    return channels, h, w, pos + 1


def read_image(path) -> np.ndarray:
    """Read an 8-bit binary PGM (P5) or PPM (P6) file into a field in [-1, 1]."""
    raw = Path(path).read_bytes()
    channels, h, w, offset = _parse_netpbm_header(raw)
    n = channels * h * w
    payload = raw[offset : offset + n]
    if len(payload) != n:
        raise TruncatedPayloadError(f"expected {n} pixel bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    return as_field(bytes_to_unit(data.transpose(2, 0, 1)))


def write_image(field, path) -> None:
    """Write a 1- or 3-channel field as binary PGM/PPM, clamping to [-1, 1]."""
    x = np.asarray(field, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise DimensionError(f"can only write 1 or 3 channel images, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot write non-finite values")
    c, h, w = x.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    Path(path).write_bytes(header + unit_to_bytes(x).transpose(1, 2, 0).tobytes())


# ---------------------------------------------------------------------------
# Tensor snapshots: 8-byte magic, (channels, height, width, dtype) as <u32, then
# little-endian float32 payload in channel-major, row-major order.


def save_tensor(array, path) -> None:
    a = np.asarray(array)
    if a.ndim == 1:
        a = a[None, None, :]
    elif a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise DimensionError(f"snapshots hold at most 3 axes, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot snapshot non-finite values")
    c, h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(_SNAPSHOT_DIMS.pack(c, h, w, 0))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise MagicMismatchError(f"{path}: not a tensor snapshot")
    head = len(SNAPSHOT_MAGIC) + _SNAPSHOT_DIMS.size
    if len(raw) < head:
        raise TruncatedPayloadError(f"{path}: header truncated")
    c, h, w, dtype = _SNAPSHOT_DIMS.unpack_from(raw, len(SNAPSHOT_MAGIC))
    if dtype != 0:
        raise MalformedHeaderError(f"{path}: unknown dtype tag {dtype}")
    n = c * h * w
    payload = raw[head:]
    if len(payload) != 4 * n:
        raise TruncatedPayloadError(f"{path}: expected {4 * n} payload bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(c, h, w)


def save_snapshot(field, path) -> None:
    """Save a field losslessly at float32 precision."""
    save_tensor(as_field(field), path)


def load_snapshot(path) -> np.ndarray:
    return as_field(load_tensor(path))
