"""Evaluation metrics: scene-flow MAE and error rate, matched DoA MAE, MTI accuracy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

SF_ERROR_THRESHOLD = 0.25  # m/s
MIN_EGO_SPEED = 2.0  # m/s


def mae_sceneflow(gt: np.ndarray, est: np.ndarray, mask: np.ndarray,
                  threshold: float = SF_ERROR_THRESHOLD) -> tuple[float, float]:
    """Mean Euclidean scene-flow error over ``mask`` and the fraction above ``threshold``."""
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise DomainError("empty evaluation pixel set")
    err = np.linalg.norm(np.asarray(est)[m] - np.asarray(gt)[m], axis=-1)
    return float(np.mean(err)), float(np.mean(err > threshold))


def sceneflow_eval_mask(radar: np.ndarray, sparse: np.ndarray, fg: np.ndarray) -> np.ndarray:
    return radar & sparse & fg


@dataclass
class DoaReport:
    """Matched DoA errors per RD bin plus (azimuth, SNR) histogram buckets."""

    bins: np.ndarray  # flat RD indices that had a camera ensemble
    errors: np.ndarray  # degrees
    matched_reference: np.ndarray  # degrees
    snr: np.ndarray  # dB (NaN if not supplied)
    az_width: float = 5.0
    snr_width: float = 2.5
    buckets: dict = field(default_factory=dict)  # (az_lo, snr_lo) -> [sum, count]

    @property
    def mae(self) -> float:
        return float(np.mean(self.errors)) if self.errors.size else float("nan")

    @property
    def count(self) -> int:
        return int(self.errors.size)

    def mae_where(self, mask: np.ndarray) -> float:
        e = self.errors[mask]
        return float(np.mean(e)) if e.size else float("nan")

    def rows(self) -> list[tuple]:
        """(az_lo, snr_lo, mae, count) sorted by bucket."""
        return [(a, s, tot / n, n) for (a, s), (tot, n) in sorted(self.buckets.items())]


def _bucket(x: np.ndarray, width: float) -> np.ndarray:
    return np.floor(x / width) * width


def mae_doa(pred_rd: np.ndarray, reference: np.ndarray, index_sets: dict[int, np.ndarray],
            snr_rd: np.ndarray | None = None, az_width: float = 5.0, snr_width: float = 2.5,
            bin_mask: np.ndarray | None = None) -> DoaReport:
    """Per-bin error ``min_{p in P_s} |ref(p) - pred(s)|`` averaged over bins with an ensemble.

    Camera pixels whose reference is NaN are ignored. ``bin_mask`` optionally restricts
    the evaluated RD bins (e.g. to an SNR range).
    """
    pred = np.asarray(pred_rd, dtype=np.float64).ravel()
    ref = np.asarray(reference, dtype=np.float64).ravel()
    snr = None if snr_rd is None else np.asarray(snr_rd, dtype=np.float64).ravel()
    sel = None if bin_mask is None else np.asarray(bin_mask, dtype=bool).ravel()
    bins, errs, matched, snrs = [], [], [], []
    for b in sorted(index_sets):
        if sel is not None and not sel[b]:
            continue
        r = ref[index_sets[b]]
        r = r[np.isfinite(r)]
        if r.size == 0 or not np.isfinite(pred[b]):
            continue
        d = np.abs(r - pred[b])
        k = int(np.argmin(d))
        bins.append(b)
        errs.append(d[k])
        matched.append(r[k])
        snrs.append(np.nan if snr is None else snr[b])
    rep = DoaReport(np.array(bins, dtype=np.int64), np.array(errs), np.array(matched), np.array(snrs),
                    az_width, snr_width)
    if rep.count and snr is not None:
        az_lo = _bucket(rep.matched_reference, az_width)
        snr_lo = _bucket(rep.snr, snr_width)
        for a, s, e in zip(az_lo, snr_lo, rep.errors):
            acc = rep.buckets.setdefault((float(a), float(s)), [0.0, 0])
            acc[0] += float(e)
            acc[1] += 1
    return rep


def histogram_image(rep: DoaReport, az_range=(-90.0, 90.0), snr_range=(0.0, 50.0)) -> np.ndarray:
    """(n_snr, n_az) MAE image of the bucket table; NaN for empty buckets."""
    az_edges = np.arange(az_range[0], az_range[1], rep.az_width)
    snr_edges = np.arange(snr_range[0], snr_range[1], rep.snr_width)
    img = np.full((snr_edges.size, az_edges.size), np.nan)
    for (a, s), (tot, n) in rep.buckets.items():
        i = int(round((s - snr_range[0]) / rep.snr_width))
        j = int(round((a - az_range[0]) / rep.az_width))
        if 0 <= i < img.shape[0] and 0 <= j < img.shape[1]:
            img[i, j] = tot / n
    return img[::-1]  # high SNR at the top


def mti_accuracy(p_stationary: np.ndarray, reference_moving: np.ndarray, threshold: float = 0.5,
                 mask: np.ndarray | None = None) -> float:
    """Fraction of pixels where ``p < threshold`` (predicted moving) matches the reference."""
    p = np.asarray(p_stationary, dtype=np.float64)
    ref = np.asarray(reference_moving, dtype=bool)
    m = np.isfinite(p) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(p))
    if not m.any():
        raise DomainError("no pixels to evaluate")
    return float(np.mean((p[m] < threshold) == ref[m]))


def discard_stationary_scenes(frames: list, ego_speeds, min_speed: float = MIN_EGO_SPEED) -> list:
    """Keep frames whose ego speed is at least ``min_speed`` m/s."""
    kept = [f for f, v in zip(frames, ego_speeds) if v >= min_speed]
    if frames and not kept:
        warnings.warn("all frames discarded as stationary", stacklevel=2)
    return kept
