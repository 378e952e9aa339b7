"""Synthetic driving scene and reference-sensor renderer.

The renderer stands in for lidar depth completion, optical flow and instance
segmentation: it rasterizes scatterers as fronto-parallel discs (plus an optional
ground plane) and emits depth, instance/class masks, optical flow and true
scene flow for frames k and k+1.
"""

from __future__ import annotations

import enum
import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ConfigurationError
from .geometry import Calibration, camera_to_pixel, in_radar_fov, lift_depth, rot_z


class ObjectClass(enum.IntEnum):
    STATIC = 0
    PEDESTRIAN = 1
    CAR = 2
    TRUCK = 3
    BICYCLE = 4
    MOTORBIKE = 5


FOREGROUND_CLASSES = frozenset({ObjectClass.PEDESTRIAN, ObjectClass.CAR, ObjectClass.TRUCK,
                                ObjectClass.BICYCLE, ObjectClass.MOTORBIKE})

# class plane value for ground pixels / pixels without any object
GROUND = -1
NO_INSTANCE = -1


@dataclass(frozen=True)
class Scatterer:
    """Point reflector rendered as a camera-facing disc of radius ``extent``.

    ``position`` is in the ego frame at frame k, ``velocity`` is over ground, expressed
    in the same ego frame.
    """

    position: np.ndarray
    velocity: np.ndarray
    rcs: float
    cls: ObjectClass = ObjectClass.STATIC
    instance_id: int = NO_INSTANCE
    extent: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64).reshape(3))
        object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=np.float64).reshape(3))
        object.__setattr__(self, "cls", ObjectClass(self.cls))
        if self.rcs <= 0:
            raise ConfigurationError("rcs must be positive")
        if self.extent < 0:
            raise ConfigurationError("extent must be non-negative")


@dataclass(frozen=True)
class EgoMotion:
    """Ego motion over one frame interval.

    A stationary point moves in the ego frame as
    ``x' = R (x + rear_axle) - rear_axle - t`` (yaw about the rear axle).
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rear_axle: np.ndarray = field(default_factory=lambda: np.array([2.8, 0.0, 0.0]))
    dt: float = 0.1

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ConfigurationError("ego rotation must be orthonormal")
        if self.dt <= 0:
            raise ConfigurationError("frame interval must be positive")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rear_axle", np.asarray(self.rear_axle, dtype=np.float64).reshape(3))

    @classmethod
    def from_speed_yaw(cls, speed: float, yaw_rate_deg: float = 0.0, dt: float = 0.1,
                       rear_axle=(2.8, 0.0, 0.0)) -> "EgoMotion":
        """Constant speed along a circular arc traced by the rear axle."""
        d = speed * dt
        psi = np.radians(yaw_rate_deg * dt)
        if abs(psi) < 1e-12:
            p = np.array([d, 0.0, 0.0])
        else:
            r = d / psi
            p = np.array([r * np.sin(psi), r * (1 - np.cos(psi)), 0.0])
        R = rot_z(-np.degrees(psi))
        return cls(R, R @ p, np.asarray(rear_axle, dtype=np.float64), dt)

    @classmethod
    def stationary(cls, dt: float = 0.1) -> "EgoMotion":
        return cls(dt=dt)

    @property
    def speed(self) -> float:
        return float(np.linalg.norm(self.translation) / self.dt)

    def apply(self, x_E: np.ndarray) -> np.ndarray:
        """Position at k+1 (ego frame at k+1) of stationary points given at k."""
        x_E = np.asarray(x_E, dtype=np.float64)
        return (x_E + self.rear_axle) @ self.rotation.T - self.rear_axle - self.translation

    def then(self, nxt: "EgoMotion") -> "EgoMotion":
        """Motion over this interval followed by ``nxt``."""
        if not np.allclose(self.rear_axle, nxt.rear_axle):
            raise ConfigurationError("rear axle offset differs between motions")
        R = nxt.rotation @ self.rotation
        t = nxt.rotation @ self.translation + nxt.translation
        return EgoMotion(R, t, self.rear_axle, self.dt + nxt.dt)


@dataclass(frozen=True)
class NoiseConfig:
    """Measurement noise of the simulated reference sensors; all zero by default.

    ``depth_corr_px`` > 0 makes depth noise a smooth random field with that Gaussian
    correlation length (pixels) and marginal std ``depth_sigma``.
    ``mask_morph`` dilates (> 0) or erodes (< 0) instance masks by that many pixels.
    ``sparse_row_step`` keeps every n-th image row as a lidar-measured pixel.
    """

    depth_sigma: float = 0.0
    depth_corr_px: float = 0.0
    flow_sigma: float = 0.0
    mask_morph: int = 0
    sparse_row_step: int = 1
    seed: int = 0


@dataclass(frozen=True)
class Scene:
    scatterers: tuple[Scatterer, ...] = ()
    ground: bool = False
    ground_range: float = 40.0

    def advance(self, ego: EgoMotion) -> "Scene":
        """The same scene one frame later, expressed in the new ego frame."""
        moved = []
        for s in self.scatterers:
            pos = ego.apply(s.position + s.velocity * ego.dt)
            moved.append(replace(s, position=pos, velocity=ego.rotation @ s.velocity))
        return replace(self, scatterers=tuple(moved))


@dataclass
class FrameFields:
    """Dense camera-raster fields for frame k (and the k -> k+1 correspondence).

    Measured planes carry the configured noise; ``*_true`` planes are exact. Scene flow
    is in the camera frame, m/s. Invalid pixels hold NaN (or -1 for integer planes).
    """

    depth: np.ndarray
    depth_next: np.ndarray
    flow: np.ndarray
    instance: np.ndarray
    object_class: np.ndarray
    sparse: np.ndarray
    depth_true: np.ndarray
    flow_true: np.ndarray
    points: np.ndarray
    points_next: np.ndarray
    scene_flow: np.ndarray
    scene_flow_bg: np.ndarray
    scene_flow_fg: np.ndarray
    scatterer_index: np.ndarray
    dt: float

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.depth)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def planes(self) -> dict[str, np.ndarray]:
        """Named (H, W) planes for export."""
        out = {"depth": self.depth, "depth_next": self.depth_next,
               "flow_u": self.flow[..., 0], "flow_v": self.flow[..., 1],
               "instance": self.instance.astype(np.float64), "class": self.object_class.astype(np.float64),
               "sparse": self.sparse.astype(np.float64)}
        for name, arr in (("sf", self.scene_flow), ("sf_bg", self.scene_flow_bg), ("sf_fg", self.scene_flow_fg)):
            for k, axis in enumerate("xyz"):
                out[f"{name}_{axis}"] = arr[..., k]
        return out


def _camera_rays(calib: Calibration) -> np.ndarray:
    K = calib.intrinsics
    u, v = K.pixel_grid()
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def _smooth_noise(rng: np.random.Generator, shape, corr_px: float) -> np.ndarray:
    white = rng.standard_normal(shape)
    if corr_px <= 0:
        return white
    field_ = ndimage.gaussian_filter(white, corr_px, mode="reflect")
    impulse = np.zeros((int(8 * corr_px) + 1,) * 2)
    impulse[impulse.shape[0] // 2, impulse.shape[1] // 2] = 1.0
    gain = np.sqrt(np.sum(ndimage.gaussian_filter(impulse, corr_px, mode="constant") ** 2))
    return field_ / gain


def _morph_instances(instance: np.ndarray, valid: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return instance
    size = 2 * abs(radius) + 1
    if radius > 0:
        grown = ndimage.grey_dilation(instance, size=(size, size), mode="nearest")
        out = instance.copy()
        take = (instance == NO_INSTANCE) & valid & (grown != NO_INSTANCE)
        out[take] = grown[take]
        return out
    lo = ndimage.grey_erosion(instance, size=(size, size), mode="nearest")
    hi = ndimage.grey_dilation(instance, size=(size, size), mode="nearest")
    out = instance.copy()
    out[(lo != hi)] = NO_INSTANCE
    return out


def render_frame(scene: Scene, ego: EgoMotion, calib: Calibration,
                 noise: NoiseConfig | None = None) -> FrameFields:
    """Rasterize ``scene`` at frame k and its motion to k+1 (z-buffered, nearest wins)."""
    noise = noise or NoiseConfig()
    K = calib.intrinsics
    H, W = K.height, K.width
    rays = _camera_rays(calib)
    depth = np.full((H, W), np.inf)
    owner = np.full((H, W), -2, dtype=np.int64)  # -2 none, -1 ground, >=0 scatterer index

    if scene.ground:
        ego_from_cam = calib.ego_from_cam
        origin = ego_from_cam.translation
        rays_E = ego_from_cam.rotate(rays)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -origin[2] / rays_E[..., 2]
        hit = (rays_E[..., 2] < 0) & (t > 0)
        ground_pts = origin + rays_E * np.where(hit, t, 0.0)[..., None]
        hit &= np.hypot(ground_pts[..., 0], ground_pts[..., 1]) <= scene.ground_range
        depth[hit] = t[hit]
        owner[hit] = -1

    cam_from_ego = calib.cam_from_ego
    for i, s in enumerate(scene.scatterers):
        c = cam_from_ego.apply(s.position)
        if c[2] <= 0:
            continue
        disc = np.linalg.norm(rays * c[2] - c, axis=-1) <= s.extent
        pu, pv = np.round(camera_to_pixel(c, K)).astype(int)
        if 0 <= pu < W and 0 <= pv < H:
            disc[pv, pu] = True
        take = disc & (c[2] < depth)
        depth[take] = c[2]
        owner[take] = i

    valid = owner > -2
    depth[~valid] = np.nan
    points = rays * depth[..., None]

    n = len(scene.scatterers)
    vel_E = np.zeros((H, W, 3))
    instance = np.full((H, W), NO_INSTANCE, dtype=np.int64)
    cls = np.full((H, W), GROUND, dtype=np.int64)
    if n:
        vel_table = np.array([s.velocity for s in scene.scatterers])
        inst_table = np.array([s.instance_id for s in scene.scatterers])
        cls_table = np.array([int(s.cls) for s in scene.scatterers])
        obj = owner >= 0
        vel_E[obj] = vel_table[owner[obj]]
        instance[obj] = inst_table[owner[obj]]
        cls[obj] = cls_table[owner[obj]]

    ego_from_cam = calib.ego_from_cam
    x_E = ego_from_cam.apply(points)
    x_E_next = ego.apply(x_E + vel_E * ego.dt)
    x_E_bg = ego.apply(x_E)
    points_next = cam_from_ego.apply(x_E_next)
    sf = (points_next - points) / ego.dt
    sf_bg = (cam_from_ego.apply(x_E_bg) - points) / ego.dt
    sf_fg = sf - sf_bg

    u, v = K.pixel_grid()
    flow_true = np.full((H, W, 2), np.nan)
    ahead = valid & (points_next[..., 2] > 0)
    flow_true[ahead] = camera_to_pixel(points_next[ahead], K) - np.stack([u[ahead], v[ahead]], axis=-1)

    rng = np.random.default_rng(noise.seed)
    depth_m = depth.copy()
    depth_next_m = points_next[..., 2].copy()
    depth_next_m[~ahead] = np.nan
    if noise.depth_sigma > 0:
        depth_m = depth_m + noise.depth_sigma * _smooth_noise(rng, (H, W), noise.depth_corr_px)
        depth_next_m = depth_next_m + noise.depth_sigma * _smooth_noise(rng, (H, W), noise.depth_corr_px)
        depth_m = np.where(valid, np.maximum(depth_m, 0.1), np.nan)
        depth_next_m = np.where(ahead, np.maximum(depth_next_m, 0.1), np.nan)
    flow_m = flow_true.copy()
    if noise.flow_sigma > 0:
        flow_m = flow_m + noise.flow_sigma * rng.standard_normal((H, W, 2))

    instance_m = _morph_instances(instance, valid, noise.mask_morph)
    cls_m = cls.copy()
    if noise.mask_morph:
        inst_cls = {s.instance_id: int(s.cls) for s in scene.scatterers}
        changed = instance_m != instance
        cls_m[changed] = [inst_cls.get(i, GROUND) if i != NO_INSTANCE else GROUND for i in instance_m[changed]]

    sparse = valid.copy()
    if noise.sparse_row_step > 1:
        sparse[np.arange(H) % noise.sparse_row_step != 0] = False

    return FrameFields(depth=depth_m, depth_next=depth_next_m, flow=flow_m, instance=instance_m,
                       object_class=cls_m, sparse=sparse, depth_true=depth, flow_true=flow_true,
                       points=points, points_next=points_next, scene_flow=sf, scene_flow_bg=sf_bg,
                       scene_flow_fg=sf_fg, scatterer_index=owner, dt=ego.dt)


def background_displacement(x_E: np.ndarray, ego: EgoMotion) -> np.ndarray:
    """Per-frame displacement (ego frame) of stationary points."""
    return ego.apply(x_E) - np.asarray(x_E, dtype=np.float64)


def background_flow_field(ego: EgoMotion, depth: np.ndarray, calib: Calibration) -> np.ndarray:
    """Ego-induced scene flow (camera frame, m/s) for every pixel with valid depth."""
    pts_C = lift_depth(depth, calib.intrinsics)
    ego_from_cam = calib.ego_from_cam
    x_E = ego_from_cam.apply(pts_C)
    return calib.cam_from_ego.rotate(background_displacement(x_E, ego)) / ego.dt


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Density clustering with Euclidean distance; returns labels, -1 for noise.

    Neighbourhoods include the point itself and use ``distance <= eps``. Clusters are
    numbered in order of their lowest-index core point; a border point joins the first
    cluster that reaches it.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neigh = tree.query_ball_point(points, eps)
    core = np.array([len(nb) >= min_pts for nb in neigh])
    cluster = 0
    for i in range(n):
        if not core[i] or labels[i] != -1:
            continue
        labels[i] = cluster
        stack = [i]
        while stack:
            j = stack.pop()
            for k in sorted(neigh[j]):
                if labels[k] == -1:
                    labels[k] = cluster
                    if core[k]:
                        stack.append(k)
        cluster += 1
    return labels


@dataclass
class PixelSets:
    """Boolean camera-raster masks gating the scene-flow solver and training."""

    fg: np.ndarray
    radar: np.ndarray
    dbscan: np.ndarray
    valid: np.ndarray
    train: np.ndarray | None = None
    excluded_instances: tuple[int, ...] = ()

    def with_train(self, warped_snr_db: np.ndarray, threshold_db: float = 10.0) -> "PixelSets":
        with np.errstate(invalid="ignore"):
            train = self.radar & (warped_snr_db > threshold_db)
        return replace(self, train=train)


def build_pixel_sets(fields: FrameFields, calib: Calibration, eps: float = 0.3,
                     min_pts: int = 4) -> PixelSets:
    valid = fields.valid
    pts_C = lift_depth(fields.depth, calib.intrinsics)
    x_R = calib.radar_from_cam.apply(pts_C)
    fg = valid & (fields.instance != NO_INSTANCE) & np.isin(fields.object_class, [int(c) for c in FOREGROUND_CLASSES])
    radar = valid & in_radar_fov(x_R, calib.fov)
    keep = np.zeros_like(valid)
    excluded = []
    for inst in np.unique(fields.instance[fg]):
        m = fg & (fields.instance == inst)
        idx = np.flatnonzero(m)
        if idx.size < min_pts:
            warnings.warn(f"instance {inst} has {idx.size} < {min_pts} pixels; excluded", stacklevel=2)
            excluded.append(int(inst))
            continue
        labels = dbscan(pts_C.reshape(-1, 3)[idx], eps, min_pts)
        if labels.max() < 0:
            excluded.append(int(inst))
            continue
        counts = np.bincount(labels[labels >= 0])
        keep.flat[idx[labels == int(np.argmax(counts))]] = True
    return PixelSets(fg=fg, radar=radar, dbscan=keep, valid=keep & radar, excluded_instances=tuple(excluded))


# --- scene configuration files ---------------------------------------------------------

_CLASS_NAMES = {c.name.lower(): c for c in ObjectClass}


def _scatterer_from_dict(d: dict) -> Scatterer:
    cls = d.get("class", "static")
    cls = _CLASS_NAMES[cls.lower()] if isinstance(cls, str) else ObjectClass(cls)
    return Scatterer(d["position"], d.get("velocity", [0, 0, 0]), float(d.get("rcs", 1.0)), cls,
                     int(d.get("instance_id", NO_INSTANCE)), float(d.get("extent", 0.5)))


def _ego_from_dict(d: dict, dt: float, rear_axle) -> EgoMotion:
    if "rotation" in d:
        return EgoMotion(np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3), d["translation"], rear_axle, dt)
    return EgoMotion.from_speed_yaw(float(d.get("speed", 0.0)), float(d.get("yaw_rate_deg", 0.0)), dt, rear_axle)


@dataclass
class SceneConfig:
    scene: Scene
    ego: list[EgoMotion]
    noise: NoiseConfig
    seed: int


def scene_config_from_dict(d: dict) -> SceneConfig:
    try:
        dt = float(d.get("dt", 0.1))
        rear_axle = d.get("rear_axle", [2.8, 0.0, 0.0])
        ego = [_ego_from_dict(e, dt, rear_axle) for e in d.get("ego", [{"speed": 0.0}])]
        scatterers = tuple(_scatterer_from_dict(s) for s in d.get("scatterers", []))
        seed = int(d.get("seed", 0))
        noise = NoiseConfig(**{**d.get("noise", {}), "seed": int(d.get("noise", {}).get("seed", seed))})
        scene = Scene(scatterers, bool(d.get("ground", False)), float(d.get("ground_range", 40.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"malformed scene config: {exc!r}") from exc
    ids = [s.instance_id for s in scatterers if s.cls != ObjectClass.STATIC]
    if len(ids) != len(set(ids)):
        raise ConfigurationError("instance ids of moving-class scatterers must be unique")
    if not ego:
        raise ConfigurationError("scene config needs at least one ego motion entry")
    return SceneConfig(scene, ego, noise, seed)


def scene_config_to_dict(cfg: SceneConfig) -> dict:
    return {
        "seed": cfg.seed,
        "dt": cfg.ego[0].dt,
        "rear_axle": cfg.ego[0].rear_axle.tolist(),
        "ground": cfg.scene.ground,
        "ground_range": cfg.scene.ground_range,
        "ego": [{"rotation": e.rotation.ravel().tolist(), "translation": e.translation.tolist()} for e in cfg.ego],
        "scatterers": [{"position": s.position.tolist(), "velocity": s.velocity.tolist(), "rcs": s.rcs,
                        "class": s.cls.name.lower(), "instance_id": s.instance_id, "extent": s.extent}
                       for s in cfg.scene.scatterers],
        "noise": {k: getattr(cfg.noise, k) for k in NoiseConfig.__dataclass_fields__},
    }


def load_scene_config(path: str | Path) -> SceneConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"scene file not found: {path}")
    try:
        return scene_config_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
