"""Differentiable resampling of RD-grid data into the camera raster.

Each valid camera pixel maps to a continuous (range, radial velocity) coordinate. The
Doppler coordinate is placed on the alias-extended axis and its corner bins are
reduced modulo the base Doppler length, which reads the same values as sampling the
concatenated copies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .geometry import Calibration, azimuth_deg, in_radar_fov, lift_depth
from .radar import RadarParams


@dataclass
class WarpGrid:
    """Per-pixel bilinear taps into an (n_range, n_doppler) grid.

    ``pix`` lists the flat camera indices of valid pixels; ``idx``/``w`` hold their four
    flat RD indices and weights (row order: (r0,d0), (r0,d1), (r1,d0), (r1,d1)).
    """

    shape: tuple[int, int]
    rd_shape: tuple[int, int]
    valid: np.ndarray
    clamped: np.ndarray
    range_m: np.ndarray
    v_r: np.ndarray
    azimuth: np.ndarray
    ri: np.ndarray  # continuous range index, (H, W)
    de: np.ndarray  # continuous extended-Doppler index, (H, W)
    ext_offset: int  # extended index of base bin 0
    pix: np.ndarray
    idx: np.ndarray
    w: np.ndarray

    def doppler_index(self) -> np.ndarray:
        """Continuous index into the base Doppler axis (wrapped)."""
        return np.mod(self.de - self.ext_offset, self.rd_shape[1])


def build_warp_grid(depth: np.ndarray, sceneflow: np.ndarray, calib: Calibration,
                    params: RadarParams | None = None, alias_copies: int = 3) -> WarpGrid:
    """Per-pixel RD coordinates from dense depth and total scene flow (camera frame, m/s)."""
    params = params or RadarParams()
    if alias_copies < 1 or alias_copies % 2 == 0:
        raise ConfigurationError("alias_copies must be a positive odd number")
    H, W = depth.shape
    N, M = params.n_range, params.n_doppler
    pts = lift_depth(depth, calib.intrinsics)
    T = calib.radar_from_cam
    x_R = T.apply(pts)
    rng = np.linalg.norm(x_R, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = x_R / rng[..., None]
        v_r = np.einsum("hwk,hwk->hw", unit, T.rotate(sceneflow))
        ri = rng / params.range_res
        valid = np.isfinite(v_r) & np.isfinite(ri) & in_radar_fov(x_R, calib.fov) & (ri <= N - 1)
    offset = M * (alias_copies // 2)
    L = M * alias_copies
    de = (np.where(valid, v_r, 0.0) + params.max_doppler) / params.doppler_res + offset
    clamped = valid & ((de < 0) | (de > L - 1))
    de = np.clip(de, 0, L - 1)
    ri = np.where(valid, ri, 0.0)

    pix = np.flatnonzero(valid)
    r = ri.ravel()[pix]
    d = de.ravel()[pix]
    r0 = np.minimum(np.floor(r).astype(np.int64), N - 2)
    d0 = np.minimum(np.floor(d).astype(np.int64), L - 2)
    fr, fd = r - r0, d - d0
    b0, b1 = np.mod(d0 - offset, M), np.mod(d0 + 1 - offset, M)
    idx = np.stack([r0 * M + b0, r0 * M + b1, (r0 + 1) * M + b0, (r0 + 1) * M + b1], axis=1)
    w = np.stack([(1 - fr) * (1 - fd), (1 - fr) * fd, fr * (1 - fd), fr * fd], axis=1)
    az = np.where(valid, azimuth_deg(x_R), np.nan)
    return WarpGrid((H, W), (N, M), valid, clamped, np.where(valid, rng, np.nan), np.where(valid, v_r, np.nan),
                    az, ri, de, offset, pix, idx, w)


def _check(values: np.ndarray, wg: WarpGrid) -> None:
    if values.shape[:2] != wg.rd_shape:
        raise ConfigurationError(f"grid shape {values.shape[:2]} does not match warp grid {wg.rd_shape}")


def warp_forward(values: np.ndarray, wg: WarpGrid, fill: float = np.nan) -> np.ndarray:
    """Bilinear warp of an RD grid into the camera raster; invalid pixels get ``fill``."""
    values = np.asarray(values, dtype=np.float64)
    _check(values, wg)
    out = np.full(wg.shape[0] * wg.shape[1], fill, dtype=np.float64)
    flat = values.reshape(-1)
    out[wg.pix] = np.einsum("nk,nk->n", wg.w, flat[wg.idx])
    return out.reshape(wg.shape)


def warp_backward(cotangent: np.ndarray, wg: WarpGrid) -> np.ndarray:
    """Adjoint of :func:`warp_forward`: scatter-add camera cotangents onto the RD grid."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if cotangent.shape != wg.shape:
        raise ConfigurationError(f"cotangent shape {cotangent.shape} does not match raster {wg.shape}")
    c = cotangent.reshape(-1)[wg.pix]
    contrib = wg.w * c[:, None]
    n = wg.rd_shape[0] * wg.rd_shape[1]
    return np.bincount(wg.idx.ravel(), weights=contrib.ravel(), minlength=n).reshape(wg.rd_shape)


def beam_coordinate(wg: WarpGrid, n_beams: int, element_spacing: float = 0.5) -> np.ndarray:
    """Continuous index into an fftshifted beam axis of length ``n_beams``."""
    return n_beams * element_spacing * np.sin(np.radians(wg.azimuth)) + n_beams / 2


def warp_trilinear(values: np.ndarray, wg: WarpGrid, element_spacing: float = 0.5,
                   fill: float = np.nan) -> np.ndarray:
    """Trilinear warp of an (n_range, n_doppler, n_beams) cube; beam coordinate is clamped."""
    values = np.asarray(values, dtype=np.float64)
    _check(values, wg)
    B = values.shape[2]
    k = np.clip(beam_coordinate(wg, B, element_spacing).ravel()[wg.pix], 0, B - 1)
    k0 = np.minimum(np.floor(k).astype(np.int64), B - 2)
    fk = k - k0
    flat = values.reshape(-1, B)
    lo = np.einsum("nk,nk->n", wg.w, flat[wg.idx, k0[:, None]])
    hi = np.einsum("nk,nk->n", wg.w, flat[wg.idx, k0[:, None] + 1])
    out = np.full(wg.shape[0] * wg.shape[1], fill)
    out[wg.pix] = (1 - fk) * lo + fk * hi
    return out.reshape(wg.shape)


def nearest_bins(wg: WarpGrid) -> np.ndarray:
    """Flat RD index of each camera pixel's nearest bin; -1 where invalid."""
    N, M = wg.rd_shape
    r = np.clip(np.floor(wg.ri + 0.5).astype(np.int64), 0, N - 1)
    d = np.mod(np.floor(wg.de + 0.5).astype(np.int64) - wg.ext_offset, M)
    return np.where(wg.valid, r * M + d, -1)


def warped_index_sets(wg: WarpGrid) -> dict[int, np.ndarray]:
    """Map flat RD bin index -> sorted flat camera pixel indices (P_s)."""
    bins = nearest_bins(wg).ravel()
    pix = np.flatnonzero(bins >= 0)
    order = np.argsort(bins[pix], kind="stable")
    pix, b = pix[order], bins[pix][order]
    starts = np.flatnonzero(np.r_[True, b[1:] != b[:-1]]) if b.size else np.array([], dtype=int)
    ends = np.r_[starts[1:], b.size]
    return {int(b[s]): pix[s:e] for s, e in zip(starts, ends)}
