"""Doppler scale-space over an RD map with alias-extended Doppler axis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import ConfigurationError
from .radar import RadarParams, RdMap


def _maxpool_upsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Max-pool by ``factor`` along the last axis, then linear upsample back to the input length."""
    L = x.shape[-1]
    n = L // factor
    pooled = x[..., :n * factor].reshape(x.shape[:-1] + (n, factor)).max(axis=-1)
    coarse = np.arange(n) * factor + (factor - 1) / 2  # pooled cell centres in fine-bin units
    fine = np.arange(L, dtype=np.float64)
    return np.stack([np.interp(fine, coarse, row) for row in pooled.reshape(-1, pooled.shape[-1])]
                    ).reshape(x.shape[:-1] + (L,))


@dataclass
class RdScaleSpace:
    """Pyramid of equally sized RD levels (range x extended Doppler) plus Doppler gradients.

    ``power[s]`` and ``grad[s]`` hold level s+1; ``grad`` is in dB per m/s.
    """

    power: list[np.ndarray]
    grad: list[np.ndarray]
    params: RadarParams
    alias_copies: int
    sigma: float
    lambda_radar: float

    @property
    def n_levels(self) -> int:
        return len(self.power)

    @property
    def v0(self) -> float:
        """Velocity of the first extended Doppler bin."""
        return -self.params.max_doppler - self.params.doppler_span * (self.alias_copies // 2)

    def doppler_axis(self) -> np.ndarray:
        return self.v0 + np.arange(self.power[0].shape[1]) * self.params.doppler_res

    def level_weight(self, s: int) -> float:
        """Radar weight at 1-based level ``s``; halves per level."""
        return self.lambda_radar / 2 ** (s - 1)

    @property
    def target_db(self) -> float:
        return float(self.power[0].max())

    def coords(self, range_m, v_mps) -> tuple[np.ndarray, np.ndarray]:
        """Continuous (range, extended-Doppler) bin coordinates."""
        ri = np.asarray(range_m, dtype=np.float64) / self.params.range_res
        di = (np.asarray(v_mps, dtype=np.float64) - self.v0) / self.params.doppler_res
        return ri, di

    def sample(self, s: int, range_m, v_mps) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Bilinear lookup of power and Doppler gradient at 1-based level ``s``.

        Returns ``(power_db, dpower_dv, inside)``. Outside the grid the coordinate is
        clamped, the gradient set to zero and ``inside`` is False.
        """
        if not 1 <= s <= self.n_levels:
            raise ConfigurationError(f"level {s} not in 1..{self.n_levels}")
        P, G = self.power[s - 1], self.grad[s - 1]
        nr, nd = P.shape
        ri, di = self.coords(range_m, v_mps)
        ri, di = np.broadcast_arrays(ri, di)
        inside = (ri >= 0) & (ri <= nr - 1) & (di >= 0) & (di <= nd - 1)
        ri = np.clip(ri, 0, nr - 1)
        di = np.clip(di, 0, nd - 1)
        r0 = np.minimum(np.floor(ri).astype(np.int64), nr - 2)
        d0 = np.minimum(np.floor(di).astype(np.int64), nd - 2)
        fr, fd = ri - r0, di - d0

        def lerp(A):
            return ((1 - fr) * (1 - fd) * A[r0, d0] + (1 - fr) * fd * A[r0, d0 + 1]
                    + fr * (1 - fd) * A[r0 + 1, d0] + fr * fd * A[r0 + 1, d0 + 1])

        return lerp(P), np.where(inside, lerp(G), 0.0), inside


def build_scalespace(rd: RdMap, n_levels: int = 3, sigma: float = 1.0, alias_copies: int = 3,
                     lambda_radar: float = 0.2) -> RdScaleSpace:
    """Alias-extend ``rd`` along Doppler and build ``n_levels`` smoothed levels.

    Level s+1 is level s blurred along Doppler (sigma * 2**(s-1) bins), max-pooled by
    2**s (halving the resolution of level s) and linearly upsampled back, so every level
    keeps the bin spacing of level 1.
    """
    if n_levels < 1:
        raise ConfigurationError("need at least one scale level")
    if alias_copies < 1 or alias_copies % 2 == 0:
        raise ConfigurationError("alias_copies must be a positive odd number")
    ext = np.concatenate([rd.power_db] * alias_copies, axis=1)
    if ext.shape[1] // 2 ** (n_levels - 1) < 2:
        raise ConfigurationError("too many scale levels for the Doppler axis")
    res = rd.params.doppler_res
    power = [ext]
    for s in range(1, n_levels):
        blurred = gaussian_filter1d(power[-1], sigma * 2 ** (s - 1), axis=1, mode="nearest")
        power.append(_maxpool_upsample(blurred, 2 ** s))
    grad = [np.gradient(P, axis=1) / res for P in power]
    return RdScaleSpace(power, grad, rd.params, alias_copies, sigma, lambda_radar)
