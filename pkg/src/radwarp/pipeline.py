"""End-to-end frame processing, synthetic datasets and deterministic parallel maps."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, TypeVar

import numpy as np

from .doanet import TrainSample, build_features, doa_labels
from .dsp import CfarConfig, estimate_floor, mti_reference, mti_rd_probability
from .geometry import Calibration, default_calibration
from .radar import RadarParams, RdMap, RdSpectrum, radar_targets, rd_power, snr_map, synth_spectrum
from .scalespace import RdScaleSpace, build_scalespace
from .scene import (EgoMotion, FrameFields, NoiseConfig, ObjectClass, PixelSets, Scatterer, Scene,
                    build_pixel_sets, render_frame)
from .sceneflow import (EnergyWeights, SolverOptions, SolverReport, assemble_flow, build_problems,
                        gn_solve)
from .warp import WarpGrid, build_warp_grid, nearest_bins, warp_forward

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "RADWARP_THREADS"


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Order-preserving map over independent work units."""
    items = list(items)
    n = thread_count() if threads is None else max(1, threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def frame_seed(seed: int, *keys: int) -> int:
    """Stable per-unit seed derived from a base seed and integer keys."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


@dataclass
class RadarFrame:
    spectrum: RdSpectrum
    rd: RdMap
    scalespace: RdScaleSpace


def simulate_radar(scene: Scene, ego: EgoMotion, calib: Calibration, params: RadarParams, seed: int,
                   n_scales: int = 3, lambda_radar: float = 0.2, sigma: float = 1.0, alias_copies: int = 3,
                   cfar: CfarConfig | None = None) -> RadarFrame:
    spec = synth_spectrum(radar_targets(scene, ego, calib, params), params, seed)
    rd = estimate_floor(rd_power(spec), cfar)
    ss = build_scalespace(rd, n_scales, sigma, alias_copies, lambda_radar)
    return RadarFrame(spec, rd, ss)


@dataclass
class FrameResult:
    fields: FrameFields
    radar: RadarFrame
    sets: PixelSets
    xi_bg: np.ndarray
    reports: list[SolverReport]
    sceneflow: np.ndarray  # estimated total scene flow (camera frame, m/s)


def estimate_frame(scene: Scene, ego: EgoMotion, calib: Calibration, noise: NoiseConfig,
                   params: RadarParams | None = None, weights: EnergyWeights | None = None,
                   options: SolverOptions | None = None, seed: int = 0, n_scales: int = 3,
                   radar: RadarFrame | None = None, init_xi: np.ndarray | None = None) -> FrameResult:
    """Render, synthesize radar and solve scene flow for every instance of one frame."""
    params = params or RadarParams()
    weights = weights or EnergyWeights()
    fields = render_frame(scene, ego, calib, noise)
    if radar is None:
        radar = simulate_radar(scene, ego, calib, params, seed, n_scales, weights.lambda_radar)
    sets = build_pixel_sets(fields, calib)
    problems, xi_bg = build_problems(fields, sets, calib, ego, radar.scalespace)
    reports = parallel_map(lambda p: gn_solve(p, weights, init_xi, options), problems)
    return FrameResult(fields, radar, sets, xi_bg, reports, assemble_flow(fields, sets, xi_bg, reports))


# --- synthetic scenes ------------------------------------------------------------------------

_MOVING = (ObjectClass.PEDESTRIAN, ObjectClass.CAR, ObjectClass.TRUCK, ObjectClass.BICYCLE, ObjectClass.MOTORBIKE)


def random_scene(rng: np.random.Generator, n_objects: int = 6, n_static: int = 2, ground: bool = True,
                 range_lim=(4.0, 22.0), az_lim: float = 50.0, max_speed: float = 4.0) -> Scene:
    """Objects spread over the radar FoV with random velocities, plus static reflectors."""
    scat = []
    for i in range(n_objects + n_static):
        r = rng.uniform(*range_lim)
        az = np.radians(rng.uniform(-az_lim, az_lim))
        pos = np.array([0.5 + r * np.cos(az), r * np.sin(az), rng.uniform(0.4, 1.2)])
        if i < n_objects:
            cls = _MOVING[int(rng.integers(len(_MOVING)))]
            heading = rng.uniform(0, 2 * np.pi)
            vel = rng.uniform(0, max_speed) * np.array([np.cos(heading), np.sin(heading), 0.0])
            scat.append(Scatterer(pos, vel, float(rng.uniform(1.0, 20.0)), cls, i + 1, float(rng.uniform(0.3, 0.9))))
        else:
            scat.append(Scatterer(pos, np.zeros(3), float(rng.uniform(1.0, 10.0)), ObjectClass.STATIC, -1,
                                  float(rng.uniform(0.15, 0.4))))
    return Scene(tuple(scat), ground=ground)


@dataclass
class Sequence:
    scene: Scene
    ego: EgoMotion
    n_frames: int
    index: int

    def frames(self) -> list[Scene]:
        out = [self.scene]
        for _ in range(self.n_frames - 1):
            out.append(out[-1].advance(self.ego))
        return out


def make_sequences(n: int, seed: int, n_frames: int = 4, speed_range=(3.0, 8.0), **scene_kw) -> list[Sequence]:
    rng = np.random.default_rng(seed)
    seqs = []
    for i in range(n):
        ego = EgoMotion.from_speed_yaw(rng.uniform(*speed_range), rng.uniform(-5.0, 5.0))
        seqs.append(Sequence(random_scene(rng, **scene_kw), ego, n_frames, i))
    return seqs


def split_sequences(seqs: list, fractions=(0.70, 0.15, 0.15), seed: int = 0) -> tuple[list, list, list]:
    """Disjoint train/val/test split by whole sequence."""
    order = np.random.default_rng(seed).permutation(len(seqs))
    n_train = int(round(fractions[0] * len(seqs)))
    n_val = int(round(fractions[1] * len(seqs)))
    pick = [seqs[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


@dataclass
class DoaFrame:
    """Everything the DoA learner and evaluator need for one frame."""

    sample: TrainSample
    spectrum: RdSpectrum
    snr: np.ndarray  # RD-grid SNR (dB)
    warped_snr: np.ndarray  # camera raster
    radar_mask: np.ndarray
    ego_speed: float
    sceneflow_fg: np.ndarray = field(repr=False, default=None)
    ego: EgoMotion | None = None


def doa_frame(scene: Scene, ego: EgoMotion, calib: Calibration, params: RadarParams, seed: int,
              snr_mask: bool = True, snr_threshold_db: float = 10.0, flow_source: str = "gt",
              noise: NoiseConfig | None = None, weights: EnergyWeights | None = None) -> DoaFrame:
    """Build features, warp taps, labels and the training mask for one frame.

    ``flow_source`` selects the scene flow used for warping: ``"gt"`` (simulator truth)
    or ``"estimated"`` (radar-augmented solver on the measured fields).
    """
    noise = noise or NoiseConfig()
    radar = simulate_radar(scene, ego, calib, params, seed)
    if flow_source == "estimated":
        res = estimate_frame(scene, ego, calib, noise, params, weights, seed=seed, radar=radar)
        fields, flow = res.fields, res.sceneflow
    elif flow_source == "gt":
        fields = render_frame(scene, ego, calib, noise)
        flow = fields.scene_flow
    else:
        raise ValueError(f"unknown flow source {flow_source!r}")
    wg = build_warp_grid(fields.depth, flow, calib, params)
    snr = snr_map(radar.rd)
    warped_snr = warp_forward(snr, wg)
    ref = doa_labels(fields.depth, calib)
    mask = wg.valid.copy()
    if snr_mask:
        with np.errstate(invalid="ignore"):
            mask &= warped_snr > snr_threshold_db
    sample = TrainSample(build_features(radar.spectrum), wg, ref, mask, radar.rd.power_db)
    return DoaFrame(sample, radar.spectrum, snr, warped_snr, wg.valid, ego.speed, fields.scene_flow_fg, ego)


def doa_dataset(seqs: list[Sequence], calib: Calibration | None = None, params: RadarParams | None = None,
                seed: int = 0, **kw) -> list[DoaFrame]:
    calib = calib or default_calibration()
    params = params or RadarParams()
    units = [(s, k, sc) for s in seqs for k, sc in enumerate(s.frames())]
    return parallel_map(lambda u: doa_frame(u[2], u[0].ego, calib, params, frame_seed(seed, u[0].index, u[1]), **kw),
                        units)


@dataclass
class MtiFrame:
    p_stationary: np.ndarray  # camera raster, NaN where no radar bin
    reference_moving: np.ndarray
    snr: np.ndarray  # SNR of each pixel's nearest RD bin (dB)


def mti_frame(scene: Scene, ego: EgoMotion, calib: Calibration, params: RadarParams | None = None, seed: int = 0,
              sigma_e: float = 0.25, alpha: float = 0.05) -> MtiFrame:
    """Per-bin MTI confidence looked up at each camera pixel's nearest RD bin."""
    params = params or RadarParams()
    radar = simulate_radar(scene, ego, calib, params, seed)
    fields = render_frame(scene, ego, calib)
    wg = build_warp_grid(fields.depth, fields.scene_flow, calib, params)
    bins = nearest_bins(wg)
    ok = bins >= 0
    p = mti_rd_probability(radar.spectrum, ego, calib, sigma_e, alpha).ravel()
    snr = snr_map(radar.rd).ravel()
    p_pix = np.where(ok, p[np.maximum(bins, 0)], np.nan)
    snr_pix = np.where(ok, snr[np.maximum(bins, 0)], np.nan)
    with np.errstate(invalid="ignore"):
        ref = mti_reference(np.nan_to_num(fields.scene_flow_fg))
    return MtiFrame(p_pix, ref, snr_pix)
