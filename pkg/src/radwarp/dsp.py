"""Classical radar baselines and label generators.

CA-CFAR, percentile noise floor, phase monopulse and Bartlett DoA, the Gaussian +
Swerling-3 SNR mixture fit, the differentiable MTI test and aspect-angle labels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.stats import norm

from .errors import ConfigurationError, DomainError
from .geometry import Calibration, aspect_cosine, lift_depth, surface_normals
from .radar import RdMap, RdSpectrum
from .scene import EgoMotion


@dataclass(frozen=True)
class CfarConfig:
    guard: tuple[int, int] = (2, 2)  # (range, doppler) half-widths
    train: tuple[int, int] = (4, 4)
    threshold_db: float = 13.0

    def __post_init__(self):
        if min(self.train) <= 0 or min(self.guard) < 0:
            raise ConfigurationError("training cells must be positive, guard cells non-negative")


def cfar_detect(rd: RdMap | np.ndarray, cfg: CfarConfig | None = None) -> np.ndarray:
    """Cell-averaging CFAR with a rectangular 2-D training ring; edge windows are truncated."""
    cfg = cfg or CfarConfig()
    db = rd.power_db if isinstance(rd, RdMap) else np.asarray(rd, dtype=np.float64)
    gr, gd = cfg.guard
    tr, td = cfg.train
    if db.shape[0] < 2 * (gr + tr) + 1 or db.shape[1] < 2 * (gd + td) + 1:
        raise ConfigurationError("grid smaller than the CFAR window")
    # normalise by the peak so linear sums stay in range; detection is offset invariant anyway
    lin = 10 ** ((db - db.max()) / 10)
    outer = np.ones((2 * (gr + tr) + 1, 2 * (gd + td) + 1))
    inner = np.zeros_like(outer)
    inner[tr:tr + 2 * gr + 1, td:td + 2 * gd + 1] = 1
    ring = outer - inner
    total = ndimage.correlate(lin, ring, mode="constant", cval=0.0)
    count = ndimage.correlate(np.ones_like(lin), ring, mode="constant", cval=0.0)
    with np.errstate(divide="ignore"):
        level = 10 * np.log10(total / count)
    return (db - db.max()) > level + cfg.threshold_db


def noise_floor(rd: RdMap | np.ndarray, detections: np.ndarray | None = None, percentile: float = 99.5) -> float:
    """Nearest-rank percentile of the power of all non-detected bins (dB)."""
    db = rd.power_db if isinstance(rd, RdMap) else np.asarray(rd, dtype=np.float64)
    rest = db[~detections] if detections is not None else db.ravel()
    if rest.size == 0:
        raise DomainError("every bin is a detection; no noise samples left")
    return float(np.percentile(rest, percentile, method="inverted_cdf"))


def analytic_noise_floor(noise_power: float, n_rx: int, percentile: float = 99.5) -> float:
    """Percentile of noise-only non-coherent power (Gamma(n_rx) distributed), in dB."""
    from scipy.stats import gamma

    return float(10 * np.log10(noise_power * gamma.ppf(percentile / 100, n_rx)))


def estimate_floor(rd: RdMap, cfg: CfarConfig | None = None) -> RdMap:
    """Attach a CFAR-gated noise floor to ``rd``."""
    return rd.with_floor(noise_floor(rd, cfar_detect(rd, cfg)))


# --- direction of arrival ------------------------------------------------------------------

def monopulse_channels(u: np.ndarray, element_spacing: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Phase-monopulse azimuth (deg) from channel samples of shape (n_rx, ...).

    Returns ``(azimuth, clamped)``; ``clamped`` marks arcsin arguments beyond +-1.
    """
    u = np.asarray(u)
    dphi = np.angle(u[1:] * np.conj(u[:-1]))
    s = dphi.mean(axis=0) / (2 * np.pi * element_spacing)
    clamped = np.abs(s) > 1
    return np.degrees(np.arcsin(np.clip(s, -1, 1))), clamped


def doa_monopulse(spec: RdSpectrum, bin_: tuple[int, int]) -> float:
    az, clamped = monopulse_channels(spec.u[:, bin_[0], bin_[1]], spec.params.element_spacing)
    if clamped:
        warnings.warn("monopulse argument outside [-1, 1]; clamped", stacklevel=2)
    return float(az)


def monopulse_map(spec: RdSpectrum) -> np.ndarray:
    """Monopulse azimuth for every RD bin."""
    return monopulse_channels(spec.u, spec.params.element_spacing)[0]


def steering(angles_deg: np.ndarray, n_rx: int, element_spacing: float = 0.5) -> np.ndarray:
    """(n_angles, n_rx) ULA steering vectors."""
    s = np.sin(np.radians(np.asarray(angles_deg, dtype=np.float64)))
    return np.exp(2j * np.pi * element_spacing * s[:, None] * np.arange(n_rx))


def bartlett_channels(u: np.ndarray, grid_deg: np.ndarray | None = None, element_spacing: float = 0.5) -> np.ndarray:
    """Bartlett azimuth (deg) for channel samples (n_rx, ...), grid search plus parabolic refinement."""
    grid = np.arange(-90.0, 90.0 + 1e-9, 0.5) if grid_deg is None else np.asarray(grid_deg, dtype=np.float64)
    u = np.asarray(u)
    shape = u.shape[1:]
    flat = u.reshape(u.shape[0], -1)
    A = steering(grid, u.shape[0], element_spacing)
    P = np.abs(np.conj(A) @ flat) ** 2  # (n_angles, n_bins)
    k = np.argmax(P, axis=0)
    cols = np.arange(flat.shape[1])
    inner = (k > 0) & (k < len(grid) - 1)
    km, kp = np.clip(k - 1, 0, len(grid) - 1), np.clip(k + 1, 0, len(grid) - 1)
    pm, p0, pp = P[km, cols], P[k, cols], P[kp, cols]
    den = pm - 2 * p0 + pp
    with np.errstate(invalid="ignore", divide="ignore"):
        off = np.where(inner & (den < 0), 0.5 * (pm - pp) / den, 0.0)
    step = np.gradient(grid)[k]
    return (grid[k] + off * step).reshape(shape)


def doa_bartlett(spec: RdSpectrum, bin_: tuple[int, int], grid_deg: np.ndarray | None = None) -> float:
    return float(bartlett_channels(spec.u[:, bin_[0], bin_[1]], grid_deg, spec.params.element_spacing))


def bartlett_map(spec: RdSpectrum, grid_deg: np.ndarray | None = None) -> np.ndarray:
    return bartlett_channels(spec.u, grid_deg, spec.params.element_spacing)


# --- SNR mixture ---------------------------------------------------------------------------

_DB = 10 / np.log(10)


def swerling3_pdf_db(x_db: np.ndarray, scale: float) -> np.ndarray:
    """Density over dB of a linear power with p(y) = 4y/s^2 exp(-2y/s), s = mean power."""
    y = 10 ** (np.asarray(x_db, dtype=np.float64) / 10)
    return 4 * y / scale ** 2 * np.exp(-2 * y / scale) * y / _DB


@dataclass(frozen=True)
class SnrMixture:
    noise_mean: float
    noise_std: float
    signal_scale: float  # mean linear SNR of the Swerling-3 component
    noise_weight: float
    crossover_db: float
    iterations: int = 0

    def noise_pdf(self, x_db) -> np.ndarray:
        return self.noise_weight * norm.pdf(x_db, self.noise_mean, self.noise_std)

    def signal_pdf(self, x_db) -> np.ndarray:
        return (1 - self.noise_weight) * swerling3_pdf_db(x_db, self.signal_scale)


def noise_crossover(mean: float, std: float, tail: float = 1e-3) -> float:
    """SNR above which a noise sample is drawn with probability below ``tail``."""
    return float(mean + std * norm.isf(tail))


def fit_snr_mixture(samples_db: np.ndarray, max_iter: int = 500, tol: float = 1e-10,
                    tail: float = 1e-3) -> SnrMixture:
    """EM fit of a Gaussian (dB) noise component plus a Swerling-3 signal component.

    The noise Gaussian is initialised from median/MAD; the returned crossover is the
    SNR whose upper noise tail mass equals ``tail``.
    """
    x = np.asarray(samples_db, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    if x.size < 1000:
        raise DomainError("need at least 1000 finite SNR samples")
    med = float(np.median(x))
    mad = 1.4826 * float(np.median(np.abs(x - med)))
    if mad <= 0:
        raise DomainError("degenerate SNR samples (zero spread)")
    y = 10 ** (x / 10)
    mu, sd = med, mad
    sig = x > mu + 3 * sd
    pi_n = float(np.clip(1 - sig.mean(), 0.01, 0.99))
    scale = float(y[sig].mean()) if sig.any() else float(10 ** ((mu + 3 * sd) / 10))
    prev = -np.inf
    it = 0
    for it in range(1, max_iter + 1):
        pn = pi_n * norm.pdf(x, mu, sd)
        ps = (1 - pi_n) * swerling3_pdf_db(x, scale)
        tot = pn + ps + 1e-300
        ll = float(np.sum(np.log(tot)))
        r = pn / tot
        pi_n = float(np.clip(r.mean(), 1e-6, 1 - 1e-6))
        mu = float(np.sum(r * x) / r.sum())
        sd = float(np.sqrt(np.sum(r * (x - mu) ** 2) / r.sum()))
        rs = 1 - r
        if rs.sum() > 0:
            scale = float(np.sum(rs * y) / rs.sum())
        if abs(ll - prev) < tol * max(1.0, abs(ll)):
            break
        prev = ll
    return SnrMixture(mu, sd, scale, pi_n, noise_crossover(mu, sd, tail), it)


def mixture_table(samples_db: np.ndarray, mix: SnrMixture, bin_width: float = 0.5) -> list[tuple]:
    """(snr_bin, sample density, noise pdf, signal pdf) rows for plotting."""
    x = np.asarray(samples_db, dtype=np.float64).ravel()
    x = x[np.isfinite(x)]
    edges = np.arange(np.floor(x.min()), np.ceil(x.max()) + bin_width, bin_width)
    hist, edges = np.histogram(x, edges, density=True)
    centres = 0.5 * (edges[:-1] + edges[1:])
    return [(c, h, float(mix.noise_pdf(c)), float(mix.signal_pdf(c))) for c, h in zip(centres, hist)]


# --- moving target indication ----------------------------------------------------------------

def mti_probability(mu_e, sigma_e: float, alpha: float = 0.05) -> np.ndarray:
    """Stationarity confidence exp(-mu^2 / (sigma Q^-1(alpha/2))^2), in (0, 1]."""
    if not 0 < alpha < 1:
        raise ConfigurationError("alpha must lie in (0, 1)")
    if sigma_e <= 0:
        raise ConfigurationError("sigma_e must be positive")
    q = norm.isf(alpha / 2)
    return np.exp(-np.square(np.asarray(mu_e, dtype=np.float64)) / (sigma_e * q) ** 2)


def mti_is_moving(p_stationary, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(p_stationary) < threshold


def mti_reference(xi_fg: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """True ("moving") where the foreground flow norm strictly exceeds ``threshold`` m/s."""
    return np.linalg.norm(np.asarray(xi_fg, dtype=np.float64), axis=-1) > threshold


def stationary_radial_velocity(range_m, azimuth_deg, ego: EgoMotion, calib: Calibration,
                               elevation_deg=0.0) -> np.ndarray:
    """Radial velocity the radar would measure for a stationary reflector at (range, azimuth)."""
    az = np.radians(np.asarray(azimuth_deg, dtype=np.float64))
    el = np.radians(np.asarray(elevation_deg, dtype=np.float64))
    unit = np.stack(np.broadcast_arrays(np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)), axis=-1)
    x_R = unit * np.asarray(range_m, dtype=np.float64)[..., None]
    ego_from_radar = calib.radar_from_ego.inverse()
    x_E = ego_from_radar.apply(x_R)
    v_R = calib.radar_from_ego.rotate(ego.apply(x_E) - x_E) / ego.dt
    return np.sum(unit * v_R, axis=-1)



def mti_rd_probability(spec: RdSpectrum, ego: EgoMotion, calib: Calibration, sigma_e: float = 0.25,
                       alpha: float = 0.05, azimuth_deg: np.ndarray | None = None) -> np.ndarray:
    """Stationarity confidence of every RD bin.

    The measured Doppler of each bin is compared with the radial velocity a stationary
    reflector at the bin's range and azimuth would produce; the difference is wrapped
    into the unambiguous span. ``azimuth_deg`` defaults to the monopulse estimate.
    """
    params = spec.params
    az = monopulse_map(spec) if azimuth_deg is None else np.asarray(azimuth_deg, dtype=np.float64)
    rng, v_meas = np.meshgrid(params.range_axis(), params.doppler_axis(), indexing="ij")
    v_stat = stationary_radial_velocity(rng, az, ego, calib)
    span = 2 * params.max_doppler
    mu = np.mod(v_meas - v_stat + params.max_doppler, span) - params.max_doppler
    return mti_probability(mu, sigma_e, alpha)

# --- aspect-angle labels -------------------------------------------------------------------

def virtual_reflector_labels(depth: np.ndarray, calib: Calibration, threshold: float = 0.5) -> np.ndarray:
    """True where |cos(ray, normal)| >= ``threshold`` in the radar frame; False without a normal."""
    K = calib.intrinsics
    normals = surface_normals(depth, K)
    pts = lift_depth(depth, K)
    T = calib.radar_from_cam
    x_R = T.apply(pts)
    n_R = T.rotate(normals)
    ok = np.isfinite(n_R).all(axis=-1) & np.isfinite(x_R).all(axis=-1) & (np.linalg.norm(x_R, axis=-1) > 0)
    out = np.zeros(depth.shape, dtype=bool)
    out[ok] = np.abs(aspect_cosine(x_R[ok], n_R[ok])) >= threshold - 1e-9  # closed at the boundary
    return out
