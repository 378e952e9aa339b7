"""File formats: RWGRID1 binary grids, PGM/PPM images, CSV helpers.

RWGRID1 layout (little endian)::

    7 bytes   b"RWGRID1"
    u32       width
    u32       height
    u32       channels
    f64[...]  channels planes, each height*width values, row-major

Complex data is stored as interleaved real/imaginary planes (re0, im0, re1, im1, ...).
NaN marks invalid pixels.
"""

from __future__ import annotations

import csv
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError

GRID_MAGIC = b"RWGRID1"
_HEADER = struct.Struct("<7sIII")


def write_grid(path: str | Path, planes: np.ndarray) -> None:
    """Write a (channels, height, width) or (height, width) real array."""
    planes = np.asarray(planes, dtype="<f8")
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3:
        raise ValueError("expected (channels, height, width)")
    c, h, w = planes.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRID_MAGIC, w, h, c))
        fh.write(np.ascontiguousarray(planes).tobytes())


def read_grid(path: str | Path) -> np.ndarray:
    """Read an RWGRID1 file as a (channels, height, width) float64 array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ConfigurationError(f"{path}: truncated grid header")
    magic, w, h, c = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise ConfigurationError(f"{path}: not an RWGRID1 file")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != w * h * c:
        raise ConfigurationError(f"{path}: expected {w * h * c} values, found {body.size}")
    return body.reshape(c, h, w).astype(np.float64)


def complex_to_planes(u: np.ndarray) -> np.ndarray:
    """(n, h, w) complex -> (2n, h, w) interleaved re/im planes."""
    u = np.asarray(u)
    out = np.empty((2 * u.shape[0],) + u.shape[1:], dtype=np.float64)
    out[0::2] = u.real
    out[1::2] = u.imag
    return out


def planes_to_complex(planes: np.ndarray) -> np.ndarray:
    return planes[0::2] + 1j * planes[1::2]


def _normalize(img: np.ndarray, lo: float | None, hi: float | None) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(img, dtype=np.float64)
    finite = np.isfinite(img)
    if lo is None:
        lo = float(img[finite].min()) if finite.any() else 0.0
    if hi is None:
        hi = float(img[finite].max()) if finite.any() else 1.0
    span = hi - lo if hi > lo else 1.0
    x = np.clip((np.where(finite, img, lo) - lo) / span, 0.0, 1.0)
    return x, finite


def write_pgm(path: str | Path, img: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """8-bit binary PGM; values linearly mapped from [lo, hi]; NaN -> 0. Boolean arrays map to 0/255."""
    img = np.asarray(img)
    if img.dtype == bool:
        img = img.astype(np.float64)
        lo, hi = 0.0, 1.0
    x, _ = _normalize(img, lo, hi)
    h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.round(x * 255).astype(np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] not in (b"P5", b"P6"):
        raise ConfigurationError(f"{path}: not a binary PGM/PPM")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4], dtype=np.uint8)
    return pix.reshape(h, w, -1).squeeze()


# Heatmap colormap: piecewise-linear blue -> cyan -> yellow -> red at 0, 1/3, 2/3, 1.
_CMAP_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
_CMAP_RGB = np.array([[0, 0, 255], [0, 255, 255], [255, 255, 0], [255, 0, 0]], dtype=np.float64)


def colorize(img: np.ndarray, lo: float | None = None, hi: float | None = None,
             invalid=(0, 0, 0)) -> np.ndarray:
    x, finite = _normalize(img, lo, hi)
    rgb = np.stack([np.interp(x, _CMAP_STOPS, _CMAP_RGB[:, k]) for k in range(3)], axis=-1)
    rgb[~finite] = invalid
    return np.round(rgb).astype(np.uint8)


def write_ppm(path: str | Path, img: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Heatmap PPM using the module colormap; NaN pixels are black."""
    rgb = colorize(img, lo, hi)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(rgb.tobytes())


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v
