"""Command-line front end: simulate, flow, warp, train-doa, eval, report and demo.

Every subcommand stages its outputs in a temporary directory next to ``--out-dir`` and
moves them into place only after the run succeeds, so a failed run leaves no partial
artifacts. Each run also writes ``manifest.json`` (config snapshot, seed, git describe).

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import shutil
import subprocess
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .doanet import DoaNet, DoaNetConfig, build_features, feature_normalization, load_net, save_net, train
from .dsp import bartlett_map, monopulse_map
from .errors import ConfigurationError, RadwarpError
from .geometry import default_calibration, calibration_to_dict, load_calibration
from .io import complex_to_planes, read_csv, read_grid, write_csv, write_grid, write_pgm, write_ppm
from .metrics import DoaReport, discard_stationary_scenes, histogram_image, mae_doa, mae_sceneflow
from .pipeline import (doa_dataset, estimate_frame, make_sequences, simulate_radar, split_sequences)
from .radar import RadarParams, beamform_3d, snr_map
from .scene import (EgoMotion, NoiseConfig, ObjectClass, Scatterer, Scene, SceneConfig, build_pixel_sets,
                    load_scene_config, render_frame, scene_config_to_dict)
from .sceneflow import EnergyWeights, SolverOptions, build_problems, gn_solve
from .warp import build_warp_grid, warp_forward, warp_trilinear, warped_index_sets

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse exits 2 on usage errors; keep that contract explicit
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- shared helpers -----------------------------------------------------------------------

def demo_scene_config(seed: int = 0) -> SceneConfig:
    """Single car 10 m ahead closing at 3 m/s, seen by a stationary ego vehicle."""
    car = Scatterer(np.array([10.5, 0.0, 0.8]), np.array([-3.0, 0.0, 0.0]), 10.0, ObjectClass.CAR, 1, 0.8)
    return SceneConfig(Scene((car,), ground=True), [EgoMotion.stationary()], NoiseConfig(seed=seed), seed)


def parse_weights(text: str | None) -> EnergyWeights:
    """``"flow=1,rigid=1,radar=0.2"`` -> EnergyWeights; omitted keys keep their defaults."""
    if not text:
        return EnergyWeights()
    kw = {}
    for item in text.split(","):
        key, sep, value = item.partition("=")
        key = key.strip()
        if not sep or key not in ("flow", "rigid", "radar"):
            raise ConfigurationError(f"bad --weights entry {item!r}; expected flow=, rigid= or radar=")
        try:
            kw[f"lambda_{key}"] = float(value)
        except ValueError as exc:
            raise ConfigurationError(f"bad --weights value {value!r}") from exc
    return EnergyWeights(**kw)


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _load_inputs(args) -> tuple[SceneConfig, object]:
    calib = load_calibration(args.calib) if getattr(args, "calib", None) else default_calibration()
    if getattr(args, "scene", None):
        cfg = load_scene_config(args.scene)
    else:
        cfg = demo_scene_config(args.seed)
    return cfg, calib


def _snapshot(args, extra: dict | None = None) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("out_dir", "func")}
    if extra:
        cfg.update(extra)
    return {"command": args.command, "version": __version__, "seed": args.seed, "git": _git_describe(),
            "config": cfg}


def _write_manifest(out: Path, args, extra: dict | None = None) -> None:
    (out / "manifest.json").write_text(json.dumps(_snapshot(args, extra), indent=2, sort_keys=True, default=str))


def _write_field(out: Path, name: str, arr: np.ndarray) -> None:
    """RWGRID1 of an (H, W) or (H, W, C) field, plus a heatmap of its first channel (or norm)."""
    arr = np.asarray(arr, dtype=np.float64)
    planes = np.moveaxis(arr, -1, 0) if arr.ndim == 3 else arr
    write_grid(out / f"{name}.rwg", planes)
    write_ppm(out / f"{name}.ppm", np.linalg.norm(arr, axis=-1) if arr.ndim == 3 else arr)


# --- subcommands ----------------------------------------------------------------------------

def cmd_simulate(args, out: Path) -> dict:
    cfg, calib = _load_inputs(args)
    params = RadarParams()
    fields = render_frame(cfg.scene, cfg.ego[0], calib, cfg.noise)
    radar = simulate_radar(cfg.scene, cfg.ego[0], calib, params, args.seed, args.scales, sigma=args.sigma,
                           alias_copies=args.alias_copies)
    write_grid(out / "spectrum.rwg", complex_to_planes(radar.spectrum.u))
    write_grid(out / "rdmap.rwg", radar.rd.power_db)
    write_pgm(out / "rdmap.pgm", radar.rd.power_db)
    for s in range(radar.scalespace.n_levels):
        write_grid(out / f"scalespace_{s + 1}.rwg", radar.scalespace.power[s])
    for name, plane in fields.planes().items():
        write_grid(out / f"{name}.rwg", plane)
    write_ppm(out / "depth.ppm", fields.depth)
    return {"scene": scene_config_to_dict(cfg), "calibration": calibration_to_dict(calib)}


def cmd_flow(args, out: Path) -> dict:
    cfg, calib = _load_inputs(args)
    weights = parse_weights(args.weights)
    options = SolverOptions(max_iters=args.max_iters, tol_m=args.tol)
    res = estimate_frame(cfg.scene, cfg.ego[0], calib, cfg.noise, RadarParams(), weights, options,
                         seed=args.seed, n_scales=args.scales)
    rows = [(r.instance_id, r.iterations, int(r.converged), r.final_step_norm, int(r.damped), r.out_of_grid,
             *r.xi, r.energy_trace[-1]["total"]) for r in res.reports]
    write_csv(out / "solver_reports.csv", ["instance", "iterations", "converged", "final_step_m", "damped",
                                           "out_of_grid", "xi_x", "xi_y", "xi_z", "energy"], rows)
    _write_field(out, "sceneflow", res.sceneflow)
    xi_fg = np.where(res.sets.fg[..., None], res.sceneflow - res.xi_bg, np.nan)
    _write_field(out, "xi_fg", xi_fg)
    mask = res.sets.radar & res.fields.sparse & res.sets.fg & np.isfinite(res.sceneflow).all(-1)
    metrics = []
    if mask.any():
        mae, rate = mae_sceneflow(res.fields.scene_flow, res.sceneflow, mask)
        metrics = [("mae_sf", mae, int(mask.sum())), ("sf_error_rate", rate, int(mask.sum()))]
    write_csv(out / "metrics.csv", ["metric", "value", "count"], metrics)
    return {"scene": scene_config_to_dict(cfg), "weights": asdict(weights)}


def cmd_warp(args, out: Path) -> dict:
    cfg, calib = _load_inputs(args)
    params = RadarParams()
    radar = simulate_radar(cfg.scene, cfg.ego[0], calib, params, args.seed, args.scales)
    if args.flow_source == "estimated":
        res = estimate_frame(cfg.scene, cfg.ego[0], calib, cfg.noise, params, parse_weights(args.weights),
                             seed=args.seed, n_scales=args.scales, radar=radar)
        depth, flow = res.fields.depth, res.sceneflow
    else:
        fields = render_frame(cfg.scene, cfg.ego[0], calib, cfg.noise)
        depth, flow = fields.depth, fields.scene_flow
    wg = build_warp_grid(depth, flow, calib, params, args.alias_copies)
    if args.input == "rdmap":
        warped = warp_forward(radar.rd.power_db, wg)
    elif args.input == "beamform":
        warped = warp_trilinear(beamform_3d(radar.spectrum, args.beams).power_db, wg)
    else:
        if not args.checkpoint:
            raise ConfigurationError("--input prediction needs --checkpoint")
        net = load_net(args.checkpoint)
        warped = warp_forward(net.forward(build_features(radar.spectrum)), wg)
    _write_field(out, f"warped_{args.input}", warped)
    write_grid(out / "warp_valid.rwg", wg.valid.astype(np.float64))
    return {"scene": scene_config_to_dict(cfg)}


def _doa_data(args):
    seqs = make_sequences(args.sequences, args.seed, n_frames=args.frames)
    splits = split_sequences(seqs, seed=args.seed)
    kw = dict(snr_mask=args.snr_mask == "on", flow_source=args.flow_source)
    return [doa_dataset(s, seed=args.seed, **kw) for s in splits]


def cmd_train_doa(args, out: Path) -> dict:
    tr, va, _ = _doa_data(args)
    off, scale = feature_normalization([d.sample.features for d in tr])
    config = DoaNetConfig(kernel=args.kernel, snr_mask=args.snr_mask == "on", scale_space_loss=args.loss == "scalespace")
    net = DoaNet.init(config, seed=args.seed, input_offset=off, input_scale=scale)
    dtype = np.float32 if args.dtype == "float32" else np.float64
    res = train(net, [d.sample for d in tr], [d.sample for d in va], epochs=args.epochs, lr=args.lr, seed=args.seed,
                patience=args.patience, dtype=dtype, lr_decay=args.lr_decay)
    save_net(res.net, out / "doanet.rwnet")
    write_csv(out / "train_metrics.csv", ["step", "epoch", "train_loss", "val_mae"],
              [(t["step"], t["epoch"], t["train_loss"], t["val_mae"]) for t in res.trace])
    return {"best_epoch": res.best_epoch, "stopped_early": res.stopped_early}


_ESTIMATORS = ("nn", "monopulse", "bartlett")


def _eval_fields(args, out: Path) -> dict:
    pred, ref = read_grid(args.pred), read_grid(args.ref)
    if pred.shape != ref.shape:
        raise ConfigurationError(f"--pred shape {pred.shape} differs from --ref shape {ref.shape}")
    mask = np.isfinite(pred).all(0) & np.isfinite(ref).all(0)
    if args.mask:
        mask &= read_grid(args.mask)[0] > 0
    if pred.shape[0] == 3:
        mae, rate = mae_sceneflow(np.moveaxis(ref, 0, -1), np.moveaxis(pred, 0, -1), mask)
        rows = [("mae_sf", mae, int(mask.sum())), ("sf_error_rate", rate, int(mask.sum()))]
    else:
        if not mask.any():
            raise ConfigurationError("no finite pixels to compare")
        err = np.abs(pred - ref)[:, mask]
        rows = [("mae", float(err.mean()), int(mask.sum())), ("max_abs_error", float(err.max()), int(mask.sum()))]
    write_csv(out / "report.csv", ["metric", "value", "count"], rows)
    return {}


def _eval_doa(args, out: Path) -> dict:
    _, _, te = _doa_data(args)
    te = discard_stationary_scenes(te, [d.ego_speed for d in te])
    net = load_net(args.checkpoint) if args.checkpoint else None
    preds = {"monopulse": lambda d: monopulse_map(d.spectrum), "bartlett": lambda d: bartlett_map(d.spectrum)}
    if net is not None:
        preds["nn"] = lambda d: net.forward(d.sample.features)
    rows, buckets = [], []
    for name in [e for e in _ESTIMATORS if e in preds]:
        errs, snrs, reps = [], [], []
        for d in te:
            p = preds[name](d)
            rep = mae_doa(p, d.sample.reference, warped_index_sets(d.sample.warp), d.snr,
                          args.az_width, args.snr_width)
            reps.append(rep)
            errs.append(rep.errors)
            snrs.append(rep.snr)
        e, s = np.concatenate(errs), np.concatenate(snrs)
        hi = s > args.snr_split
        rows.append((name, "mae_doa", float(e.mean()) if e.size else float("nan"), int(e.size)))
        rows.append((name, f"mae_doa_snr_gt_{args.snr_split:g}", float(e[hi].mean()) if hi.any() else float("nan"),
                     int(hi.sum())))
        merged = {}
        for rep in reps:
            for key, (tot, n) in rep.buckets.items():
                acc = merged.setdefault(key, [0.0, 0])
                acc[0] += tot
                acc[1] += n
        for (a, sl), (tot, n) in sorted(merged.items()):
            buckets.append((name, a, sl, tot / n, n))
    write_csv(out / "report.csv", ["estimator", "metric", "value", "count"], rows)
    write_csv(out / "buckets.csv", ["estimator", "az_lo", "snr_lo", "mae", "count"], buckets)
    return {"test_frames": len(te)}


def cmd_eval(args, out: Path) -> dict:
    if args.pred or args.ref:
        if not (args.pred and args.ref):
            raise ConfigurationError("--pred and --ref must be given together")
        return _eval_fields(args, out)
    return _eval_doa(args, out)


def cmd_report(args, out: Path) -> dict:
    src = Path(args.in_dir)
    path = src / "buckets.csv"
    if not path.is_file():
        raise ConfigurationError(f"{path} not found; run `eval` first")
    by_est: dict[str, DoaReport] = {}
    for row in read_csv(path):
        rep = by_est.setdefault(row["estimator"], DoaReport(np.empty(0, np.int64), np.empty(0), np.empty(0),
                                                             np.empty(0), args.az_width, args.snr_width))
        n = int(row["count"])
        rep.buckets[(float(row["az_lo"]), float(row["snr_lo"]))] = [float(row["mae"]) * n, n]
    lines = []
    for name, rep in sorted(by_est.items()):
        img = histogram_image(rep)
        write_pgm(out / f"histogram_{name}.pgm", img, 0.0, args.max_error)
        write_grid(out / f"histogram_{name}.rwg", img)
        n = sum(c for _, c in rep.buckets.values())
        tot = sum(t for t, _ in rep.buckets.values())
        lines.append((name, tot / n if n else float("nan"), n))
    write_csv(out / "summary.csv", ["estimator", "mae_doa", "count"], lines)
    return {}


def cmd_demo(args, out: Path) -> dict:
    """Single-target walkthrough: solve from an offset start, log every iterate, warp RD per iterate."""
    cfg, calib = _load_inputs(args)
    params = RadarParams()
    ego = cfg.ego[0]
    weights = parse_weights(args.weights)
    radar = simulate_radar(cfg.scene, ego, calib, params, args.seed, args.scales, weights.lambda_radar)
    fields = render_frame(cfg.scene, ego, calib, cfg.noise)
    sets = build_pixel_sets(fields, calib)
    problems, xi_bg = build_problems(fields, sets, calib, ego, radar.scalespace)
    if not problems:
        raise ConfigurationError("demo scene has no solvable object")
    rows, summary = [], []
    base = fields.scene_flow_bg.copy()
    snap = {}
    for prob in problems:
        m = sets.fg & (fields.instance == prob.instance_id)
        gt = np.nanmean(fields.scene_flow_fg[m], axis=0)
        init = gt + np.array([0.0, 0.0, args.init_offset])
        rep = gn_solve(prob, weights, init, SolverOptions(max_iters=args.max_iters, tol_m=args.tol))
        v_true = float(np.mean(prob.radial_velocity(gt)))
        for it, (xi, e) in enumerate(zip(rep.xi_history, rep.energy_trace)):
            v = float(np.mean(prob.radial_velocity(xi)))
            rows.append((prob.instance_id, it, *xi, v, v - v_true, e.get("flow", 0.0), e.get("rigid", 0.0),
                         e.get("radar", 0.0), e["total"]))
        v_final = float(np.mean(prob.radial_velocity(rep.xi)))
        summary += [(prob.instance_id, "iterations", rep.iterations), (prob.instance_id, "converged", int(rep.converged)),
                    (prob.instance_id, "radial_velocity_true", v_true), (prob.instance_id, "radial_velocity_final", v_final),
                    (prob.instance_id, "radial_velocity_error", abs(v_final - v_true))]
        snap[prob.instance_id] = (m, rep.xi_history)
    write_csv(out / "convergence.csv", ["instance", "iteration", "xi_x", "xi_y", "xi_z", "v_r", "v_r_error",
                                        "e_flow", "e_rigid", "e_radar", "e_total"], rows)
    write_csv(out / "report.csv", ["instance", "metric", "value"], summary)
    lo, hi = float(np.min(radar.rd.power_db)), float(np.max(radar.rd.power_db))
    n_iter = max(len(h) for _, h in snap.values())
    for it in range(n_iter):
        flow = base.copy()
        for m, hist in snap.values():
            flow[m] += hist[min(it, len(hist) - 1)]
        wg = build_warp_grid(fields.depth, flow, calib, params)
        write_ppm(out / f"warped_rd_{it:03d}.ppm", warp_forward(radar.rd.power_db, wg), lo, hi)
    write_pgm(out / "rdmap.pgm", radar.rd.power_db)
    write_pgm(out / "snr.pgm", snr_map(radar.rd))
    return {"scene": scene_config_to_dict(cfg)}


# --- argument parsing -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radwarp", description="Radar-camera scene flow and DoA learning pipeline.")
    p.add_argument("--version", action="version", version=f"radwarp {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, scene=True):
        sp.add_argument("--out-dir", required=True, help="output directory (created on success)")
        sp.add_argument("--seed", type=int, default=0)
        if scene:
            sp.add_argument("--scene", help="scene JSON; default is the built-in single-target scene")
            sp.add_argument("--calib", help="calibration JSON; default is the built-in rig")
            sp.add_argument("--scales", type=int, default=3, help="scale-space levels S")

    def solver(sp, max_iters=100):
        sp.add_argument("--weights", help='energy weights, e.g. "flow=1,rigid=1,radar=0.2"')
        sp.add_argument("--max-iters", type=int, default=max_iters)
        sp.add_argument("--tol", type=float, default=1e-4, help="step threshold in metres per frame")

    def doa(sp):
        sp.add_argument("--sequences", type=int, default=40)
        sp.add_argument("--frames", type=int, default=4, help="frames per sequence")
        sp.add_argument("--snr-mask", choices=("on", "off"), default="on")
        sp.add_argument("--flow-source", choices=("gt", "estimated"), default="gt")

    sp = sub.add_parser("simulate", help="render camera fields and synthesize the radar spectrum")
    common(sp)
    sp.add_argument("--sigma", type=float, default=1.0)
    sp.add_argument("--alias-copies", type=int, default=3)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("flow", help="estimate instance scene flow")
    common(sp)
    solver(sp)
    sp.set_defaults(func=cmd_flow)

    sp = sub.add_parser("warp", help="warp RD-grid data into the camera raster")
    common(sp)
    sp.add_argument("--input", choices=("rdmap", "beamform", "prediction"), default="rdmap")
    sp.add_argument("--flow-source", choices=("gt", "estimated"), default="gt")
    sp.add_argument("--weights")
    sp.add_argument("--checkpoint")
    sp.add_argument("--beams", type=int, default=32)
    sp.add_argument("--alias-copies", type=int, default=3)
    sp.set_defaults(func=cmd_warp)

    sp = sub.add_parser("train-doa", help="train the DoA network on synthetic sequences")
    common(sp, scene=False)
    doa(sp)
    sp.add_argument("--kernel", type=int, choices=(1, 3), default=3)
    sp.add_argument("--loss", choices=("l1", "scalespace"), default="l1")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--lr-decay", type=float, default=0.7, help="learning-rate factor applied after each epoch")
    sp.add_argument("--patience", type=int, default=5)
    sp.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    sp.set_defaults(func=cmd_train_doa)

    sp = sub.add_parser("eval", help="compare fields or evaluate DoA estimators on the test split")
    common(sp, scene=False)
    doa(sp)
    sp.add_argument("--pred", help="RWGRID1 prediction (field mode)")
    sp.add_argument("--ref", help="RWGRID1 reference (field mode)")
    sp.add_argument("--mask", help="RWGRID1 mask, first plane > 0 selects pixels")
    sp.add_argument("--checkpoint", help="DoA network checkpoint to evaluate next to the classical baselines")
    sp.add_argument("--az-width", type=float, default=5.0)
    sp.add_argument("--snr-width", type=float, default=2.5)
    sp.add_argument("--snr-split", type=float, default=20.0)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("report", help="render histogram heatmaps from an eval directory")
    common(sp, scene=False)
    sp.add_argument("--in-dir", required=True)
    sp.add_argument("--az-width", type=float, default=5.0)
    sp.add_argument("--snr-width", type=float, default=2.5)
    sp.add_argument("--max-error", type=float, default=20.0, help="heatmap upper bound (deg)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("demo", help="single-target convergence walkthrough")
    common(sp)
    solver(sp)
    sp.add_argument("--init-offset", type=float, default=1.5, help="initial forward flow offset (m/s)")
    sp.set_defaults(func=cmd_demo)
    return p


def _publish(stage: Path, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    for item in sorted(stage.iterdir()):
        target = out / item.name
        if target.is_dir():
            shutil.rmtree(target)
        shutil.move(str(item), str(target))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out_dir)
    parent = out.resolve().parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".radwarp-", dir=parent))
    except OSError as exc:
        print(f"radwarp: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(1):
            extra = args.func(args, stage)
        _write_manifest(stage, args, extra)
        _publish(stage, out)
        return EXIT_OK
    except ConfigurationError as exc:
        print(f"radwarp: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RadwarpError, ValueError, OSError) as exc:
        print(f"radwarp: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        shutil.rmtree(stage, ignore_errors=True)


if __name__ == "__main__":
    sys.exit(main())
