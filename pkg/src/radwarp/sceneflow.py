"""Per-object Gauss-Newton scene flow with optical-flow, rigid and RD-spectrum energies.

Each object contributes a 3-DoF translational foreground flow ``xi`` (camera frame,
m/s) on top of the per-pixel background flow. Residuals:

* flow: ``project(x + dt (xi_bg + xi)) - (p + F)`` in pixels
* rigid: ``x + dt (xi_bg + xi) - x_next`` in metres
* radar: ``RD_s(|x_R|, v_r) - max(RD_1)`` in dB with
  ``v_r = x_R / |x_R| . R_RC (xi_bg + xi)``, for every scale level s
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError
from .geometry import Calibration, CameraIntrinsics, lift_depth
from .scalespace import RdScaleSpace
from .scene import EgoMotion, FrameFields, PixelSets, background_flow_field

CHARBONNIER_EPS = 1e-6
CHARBONNIER_ALPHA = 0.45


@dataclass(frozen=True)
class EnergyWeights:
    lambda_flow: float = 1.0
    lambda_rigid: float = 1.0
    lambda_radar: float = 0.2
    charbonnier_eps: float = CHARBONNIER_EPS
    charbonnier_alpha: float = CHARBONNIER_ALPHA

    def __post_init__(self):
        lams = (self.lambda_flow, self.lambda_rigid, self.lambda_radar)
        if min(lams) < 0 or max(lams) == 0:
            raise ConfigurationError("weights must be non-negative with at least one positive")


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 100
    tol_m: float = 1e-4  # step threshold on the per-frame displacement |dxi| * dt
    damping: float = 1e-9
    line_search: bool = True
    max_halvings: int = 12
    warm_start: bool = True  # without init_xi, start the radar solve from the camera-only optimum


def charbonnier(r, eps: float = CHARBONNIER_EPS, alpha: float = CHARBONNIER_ALPHA):
    """Generalized Charbonnier penalty and its adaptive weight ``alpha (r^2 + eps)^(alpha - 1)``."""
    r2 = np.square(np.asarray(r, dtype=np.float64))
    return (r2 + eps) ** alpha, alpha * (r2 + eps) ** (alpha - 1)


@dataclass
class ObjectProblem:
    """Inputs for one instance; arrays are indexed by the pixels of P_i.

    ``flow`` / ``x_next`` rows may be NaN; such rows drop out of their term.
    """

    pixels: np.ndarray  # (n, 2) u, v
    x_C: np.ndarray  # (n, 3)
    xi_bg: np.ndarray  # (n, 3) m/s
    flow: np.ndarray  # (n, 2) px
    x_next: np.ndarray  # (n, 3)
    x_R: np.ndarray  # (n, 3)
    R_RC: np.ndarray  # (3, 3)
    K: CameraIntrinsics
    dt: float
    scalespace: RdScaleSpace | None = None
    instance_id: int = -1

    def __post_init__(self):
        if len(self.pixels) == 0:
            raise ConfigurationError("object problem needs at least one pixel")

    @property
    def range_m(self) -> np.ndarray:
        return np.linalg.norm(self.x_R, axis=-1)

    def moved(self, xi: np.ndarray) -> np.ndarray:
        return self.x_C + self.dt * (self.xi_bg + xi)

    def radial_velocity(self, xi: np.ndarray) -> np.ndarray:
        unit = self.x_R / self.range_m[:, None]
        return np.einsum("nk,nk->n", unit, (self.xi_bg + xi) @ self.R_RC.T)


def residual_flow(prob: ObjectProblem, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (r (n,2), J (n,2,3), valid (n,))."""
    K = prob.K
    X = prob.moved(xi)
    target = prob.pixels + prob.flow
    valid = np.isfinite(target).all(axis=1) & np.isfinite(X).all(axis=1) & (X[:, 2] > 0)
    z = np.where(valid, X[:, 2], 1.0)
    r = np.stack([K.fx * X[:, 0] / z + K.cx, K.fy * X[:, 1] / z + K.cy], axis=1) - target
    J = np.zeros((len(X), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * X[:, 0] / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * X[:, 1] / z ** 2
    J *= prob.dt
    r[~valid] = 0.0
    J[~valid] = 0.0
    return r, J, valid


def residual_rigid(prob: ObjectProblem, xi: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r = prob.moved(xi) - prob.x_next
    valid = np.isfinite(r).all(axis=1)
    r[~valid] = 0.0
    J = np.broadcast_to(prob.dt * np.eye(3), (len(r), 3, 3)).copy()
    J[~valid] = 0.0
    return r, J, valid


def residual_radar(prob: ObjectProblem, xi: np.ndarray, s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Scalar dB residual per pixel at level ``s`` and its (n, 1, 3) Jacobian."""
    ss = prob.scalespace
    if ss is None:
        raise ConfigurationError("radar residual needs a scale-space")
    rng = prob.range_m
    unit = prob.x_R / rng[:, None]
    v_r = prob.radial_velocity(xi)
    p, g, inside = ss.sample(s, rng, v_r)
    r = np.where(inside, p - ss.target_db, 0.0)
    J = (g[:, None] * (unit @ prob.R_RC))[:, None, :]
    J[~inside] = 0.0
    return r[:, None], J, inside


@dataclass
class SolverReport:
    xi: np.ndarray
    iterations: int
    converged: bool
    final_step_norm: float  # metres per frame
    energy_trace: list[dict] = field(default_factory=list)
    damped: bool = False
    out_of_grid: int = 0
    instance_id: int = -1
    xi_history: list[np.ndarray] = field(default_factory=list)


def _terms(prob: ObjectProblem, weights: EnergyWeights, xi: np.ndarray):
    """Yield (name, lambda, r, J, valid) for every active term."""
    if weights.lambda_flow > 0:
        yield ("flow", weights.lambda_flow) + residual_flow(prob, xi)
    if weights.lambda_rigid > 0:
        yield ("rigid", weights.lambda_rigid) + residual_rigid(prob, xi)
    if weights.lambda_radar > 0 and prob.scalespace is not None:
        for s in range(1, prob.scalespace.n_levels + 1):
            lam = weights.lambda_radar / 2 ** (s - 1)
            yield (f"radar{s}", lam) + residual_radar(prob, xi, s)


def energy(prob: ObjectProblem, weights: EnergyWeights, xi: np.ndarray) -> dict:
    out = {}
    for name, lam, r, _, valid in _terms(prob, weights, xi):
        rho, _ = charbonnier(np.linalg.norm(r, axis=1), weights.charbonnier_eps, weights.charbonnier_alpha)
        out[name] = float(lam * np.sum(rho[valid]))
    out["total"] = float(sum(out.values()))
    return out


def normal_equations(prob: ObjectProblem, weights: EnergyWeights, xi: np.ndarray):
    """Accumulate H = sum J^T W J and b = sum J^T W r over pixels and terms."""
    H = np.zeros((3, 3))
    b = np.zeros(3)
    outside = 0
    for name, lam, r, J, valid in _terms(prob, weights, xi):
        _, w = charbonnier(np.linalg.norm(r, axis=1), weights.charbonnier_eps, weights.charbonnier_alpha)
        w = np.where(valid, lam * w, 0.0)
        H += np.einsum("n,nij,nik->jk", w, J, J)
        b += np.einsum("n,nij,ni->j", w, J, r)
        if name.startswith("radar"):
            outside += int(np.count_nonzero(~valid))
    return H, b, outside


def gn_solve(prob: ObjectProblem, weights: EnergyWeights | None = None, init_xi=None,
             options: SolverOptions | None = None) -> SolverReport:
    """Iteratively reweighted Gauss-Newton on the 3-vector foreground flow.

    With ``options.warm_start`` and no ``init_xi``, a camera-only solve (radar weight 0)
    provides the starting point; the report then covers the radar-weighted solve only.
    """
    weights = weights or EnergyWeights()
    options = options or SolverOptions()
    if (init_xi is None and options.warm_start and weights.lambda_radar > 0
            and weights.lambda_flow + weights.lambda_rigid > 0):
        init_xi = gn_solve(prob, replace(weights, lambda_radar=0.0), None, options).xi
    xi = np.zeros(3) if init_xi is None else np.asarray(init_xi, dtype=np.float64).copy()
    e = energy(prob, weights, xi)
    trace = [e]
    history = [xi.copy()]
    damped = False
    converged = False
    step_norm = np.inf
    outside = 0
    it = 0
    for it in range(1, options.max_iters + 1):
        H, b, outside = normal_equations(prob, weights, xi)
        if np.linalg.matrix_rank(H) < 3:
            H = H + options.damping * np.eye(3)
            damped = True
        try:
            delta = -np.linalg.solve(H, b)
        except np.linalg.LinAlgError:
            delta = -np.linalg.lstsq(H + options.damping * np.eye(3), b, rcond=None)[0]
            damped = True
        step = 1.0
        new_xi, new_e = xi + delta, energy(prob, weights, xi + delta)
        if options.line_search:
            for _ in range(options.max_halvings):
                if new_e["total"] <= e["total"]:
                    break
                step *= 0.5
                new_xi = xi + step * delta
                new_e = energy(prob, weights, new_xi)
            else:
                if new_e["total"] > e["total"]:
                    # no descent along the GN direction: we are at a (numerical) minimum
                    step_norm = 0.0
                    converged = True
                    break
        step_norm = float(np.linalg.norm(new_xi - xi) * prob.dt)
        xi, e = new_xi, new_e
        trace.append(e)
        history.append(xi.copy())
        if step_norm < options.tol_m:
            converged = True
            break
    return SolverReport(xi, it, converged, step_norm, trace, damped, outside, prob.instance_id, history)


# --- frame-level assembly -----------------------------------------------------------------

def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = img.shape
    ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uc, vc = np.clip(u, 0, w - 1), np.clip(v, 0, h - 1)
    u0 = np.minimum(np.floor(uc).astype(int), w - 2)
    v0 = np.minimum(np.floor(vc).astype(int), h - 2)
    fu, fv = uc - u0, vc - v0
    out = ((1 - fu) * (1 - fv) * img[v0, u0] + fu * (1 - fv) * img[v0, u0 + 1]
           + (1 - fu) * fv * img[v0 + 1, u0] + fu * fv * img[v0 + 1, u0 + 1])
    return np.where(ok, out, np.nan)


def measured_next_points(fields: FrameFields, K: CameraIntrinsics) -> np.ndarray:
    """Lift each pixel's flow target ``p + F`` with its measured next-frame depth."""
    u, v = K.pixel_grid()
    tu = u + fields.flow[..., 0]
    tv = v + fields.flow[..., 1]
    z = fields.depth_next
    with np.errstate(invalid="ignore"):
        return np.stack([(tu - K.cx) / K.fx * z, (tv - K.cy) / K.fy * z, z], axis=-1)


def build_problems(fields: FrameFields, sets: PixelSets, calib: Calibration, ego: EgoMotion,
                   scalespace: RdScaleSpace | None) -> tuple[list[ObjectProblem], np.ndarray]:
    """One problem per instance in ``sets.valid``; also returns the dense background flow."""
    K = calib.intrinsics
    xi_bg = background_flow_field(ego, fields.depth, calib)
    pts = lift_depth(fields.depth, K)
    nxt = measured_next_points(fields, K)
    x_R = calib.radar_from_cam.apply(pts)
    R_RC = calib.radar_from_cam.rotation
    u, v = K.pixel_grid()
    problems = []
    for inst in np.unique(fields.instance[sets.valid]):
        m = sets.valid & (fields.instance == inst)
        problems.append(ObjectProblem(
            pixels=np.stack([u[m], v[m]], axis=1), x_C=pts[m], xi_bg=xi_bg[m], flow=fields.flow[m],
            x_next=nxt[m], x_R=x_R[m], R_RC=R_RC, K=K, dt=ego.dt, scalespace=scalespace,
            instance_id=int(inst)))
    return problems, xi_bg


def assemble_flow(fields: FrameFields, sets: PixelSets, xi_bg: np.ndarray,
                  reports: list[SolverReport]) -> np.ndarray:
    """Dense total scene flow: background everywhere, plus xi on every pixel of each solved instance."""
    out = xi_bg.copy()
    for rep in reports:
        m = sets.fg & (fields.instance == rep.instance_id)
        out[m] += rep.xi
    return out
