"""Coordinate frames, rigid transforms and the pinhole camera model.

Conventions:
    ego and radar frames: x forward, y left, z up.
    camera frame: x right, y down, z along the optical axis.
    azimuth = atan2(y, x), elevation = atan2(z, x) in the radar frame; degrees.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DomainError

# Closed-interval FoV tests tolerate this much round-off (degrees).
_FOV_TOL_DEG = 1e-9


class FrameId(enum.Enum):
    EGO = "Ego"
    CAMERA1 = "Camera1"
    CAMERA2 = "Camera2"
    LIDAR1 = "Lidar1"
    LIDAR2 = "Lidar2"
    RADAR = "Radar"
    DGPS = "Dgps"


@dataclass(frozen=True)
class RigidTransform:
    """Maps points from frame ``src`` into frame ``dst``: x_dst = R x_src + t."""

    src: FrameId
    dst: FrameId
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) < 0:
            raise ConfigurationError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, frame: FrameId = FrameId.EGO, dst: FrameId | None = None) -> "RigidTransform":
        return cls(frame, dst or frame, np.eye(3), np.zeros(3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 3)."""
        x = np.asarray(x, dtype=np.float64)
        return x @ self.rotation.T + self.translation

    def rotate(self, v: np.ndarray) -> np.ndarray:
        """Rotate free vectors (velocities, normals); translation is ignored."""
        return np.asarray(v, dtype=np.float64) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(self.dst, self.src, Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def transform_point(x: np.ndarray, T: RigidTransform, frame: FrameId | None = None) -> np.ndarray:
    if frame is not None and frame != T.src:
        raise ConfigurationError(f"point is in {frame.value}, transform expects {T.src.value}")
    return T.apply(x)


def compose(T_ab: RigidTransform, T_bc: RigidTransform) -> RigidTransform:
    """Chain c -> b -> a. ``T_ab`` maps b into a, ``T_bc`` maps c into b."""
    if T_ab.src != T_bc.dst:
        raise ConfigurationError(
            f"cannot compose {T_bc.src.value}->{T_bc.dst.value} with {T_ab.src.value}->{T_ab.dst.value}")
    R = T_ab.rotation @ T_bc.rotation
    # re-orthonormalize so long chains do not drift
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    return RigidTransform(T_bc.src, T_ab.dst, R, T_ab.rotation @ T_bc.translation + T_ab.translation)


def rot_x(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(deg: float) -> np.ndarray:
    c, s = np.cos(np.radians(deg)), np.sin(np.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ConfigurationError("principal point must lie inside the raster")

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """(u, v) pixel-center coordinates, each of shape (height, width)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return u, v


def pixel_to_camera(u, v, depth_z, K: CameraIntrinsics) -> np.ndarray:
    """Lift pixel(s) with known depth to camera coordinates, shape (..., 3)."""
    z = np.asarray(depth_z, dtype=np.float64)
    if np.any(z <= 0):
        raise DomainError("depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, np.broadcast_to(z, u.shape)], axis=-1)


def camera_to_pixel(x: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) to (u, v). Result may fall outside the raster."""
    x = np.asarray(x, dtype=np.float64)
    z = x[..., 2]
    if np.any(z <= 0):
        raise DomainError("point behind the camera")
    return np.stack([K.fx * x[..., 0] / z + K.cx, K.fy * x[..., 1] / z + K.cy], axis=-1)


def lift_depth(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Lift a dense depth map (NaN = invalid) to an (H, W, 3) point map; invalid pixels stay NaN."""
    u, v = K.pixel_grid()
    with np.errstate(invalid="ignore"):
        return np.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], axis=-1)


def azimuth_deg(x_R: np.ndarray) -> np.ndarray:
    x_R = np.asarray(x_R, dtype=np.float64)
    return np.degrees(np.arctan2(x_R[..., 1], x_R[..., 0]))


def elevation_deg(x_R: np.ndarray) -> np.ndarray:
    x_R = np.asarray(x_R, dtype=np.float64)
    return np.degrees(np.arctan2(x_R[..., 2], x_R[..., 0]))


@dataclass(frozen=True)
class RadarFov:
    azimuth_halfwidth: float = 67.5
    elevation_halfwidth: float = 11.0

    def __post_init__(self):
        for name in ("azimuth_halfwidth", "elevation_halfwidth"):
            if not 0 < getattr(self, name) <= 90:
                raise ConfigurationError(f"{name} must be in (0, 90]")


FOV_PIXEL_SET = RadarFov(67.5, 11.0)
FOV_DATASHEET = RadarFov(70.0, 10.0)
FOV_PRESETS = {"pixel-set": FOV_PIXEL_SET, "datasheet": FOV_DATASHEET}


def in_radar_fov(x_R: np.ndarray, fov: RadarFov = FOV_PIXEL_SET) -> np.ndarray:
    x_R = np.asarray(x_R, dtype=np.float64)
    with np.errstate(invalid="ignore"):
        ok = x_R[..., 0] > 0
        ok &= np.abs(azimuth_deg(x_R)) <= fov.azimuth_halfwidth + _FOV_TOL_DEG
        ok &= np.abs(elevation_deg(x_R)) <= fov.elevation_halfwidth + _FOV_TOL_DEG
    return ok


def surface_normals(depth: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Per-pixel unit normals (camera frame) from the 4-neighbourhood quad of each pixel.

    The normal is the cross product of the quad diagonals (left->right, up->down),
    flipped to face the camera. Pixels missing any neighbour get NaN.
    """
    pts = lift_depth(depth, K)
    n = np.full_like(pts, np.nan)
    a = pts[1:-1, 2:] - pts[1:-1, :-2]
    b = pts[2:, 1:-1] - pts[:-2, 1:-1]
    c = np.cross(a, b)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = c / norm
    centre = pts[1:-1, 1:-1]
    flip = np.sum(c * centre, axis=-1) > 0  # must satisfy dot(n, -ray) > 0
    c[flip] *= -1
    bad = ~np.isfinite(c).all(axis=-1) | (norm[..., 0] == 0)
    c[bad] = np.nan
    n[1:-1, 1:-1] = c
    return n


def surface_normal(depth: np.ndarray, p: tuple[int, int], K: CameraIntrinsics) -> np.ndarray:
    """Unit normal at integer pixel ``p = (u, v)``; NaN vector if a neighbour is missing."""
    u, v = int(p[0]), int(p[1])
    h, w = depth.shape
    if not (1 <= u < w - 1 and 1 <= v < h - 1):
        return np.full(3, np.nan)
    return surface_normals(depth[v - 1:v + 2, u - 1:u + 2], _shifted(K, u - 1, v - 1))[1, 1]


def _shifted(K: CameraIntrinsics, du: int, dv: int) -> CameraIntrinsics:
    # intrinsics of a 3x3 crop; bypasses the principal-point check on purpose
    crop = object.__new__(CameraIntrinsics)
    for name, val in (("fx", K.fx), ("fy", K.fy), ("cx", K.cx - du), ("cy", K.cy - dv), ("width", 3), ("height", 3)):
        object.__setattr__(crop, name, val)
    return crop


def aspect_cosine(x_R: np.ndarray, n_R: np.ndarray) -> np.ndarray:
    """Cosine between sensing ray(s) and surface normal(s)."""
    x_R = np.asarray(x_R, dtype=np.float64)
    n_R = np.asarray(n_R, dtype=np.float64)
    nx = np.linalg.norm(x_R, axis=-1)
    nn = np.linalg.norm(n_R, axis=-1)
    if np.any(nx == 0) or np.any(nn == 0):
        raise DomainError("zero-length ray or normal")
    return np.sum(x_R * n_R, axis=-1) / (nx * nn)


@dataclass(frozen=True)
class Calibration:
    """Camera intrinsics, camera/radar extrinsics relative to the ego frame, radar FoV."""

    intrinsics: CameraIntrinsics
    cam_from_ego: RigidTransform
    radar_from_ego: RigidTransform
    fov: RadarFov = field(default=FOV_PIXEL_SET)

    def __post_init__(self):
        if self.cam_from_ego.src != FrameId.EGO or self.radar_from_ego.src != FrameId.EGO:
            raise ConfigurationError("extrinsics must map from the ego frame")
        if self.radar_from_ego.dst != FrameId.RADAR:
            raise ConfigurationError("radar extrinsic must map into the radar frame")

    @property
    def ego_from_cam(self) -> RigidTransform:
        return self.cam_from_ego.inverse()

    @property
    def radar_from_cam(self) -> RigidTransform:
        return compose(self.radar_from_ego, self.ego_from_cam)


# camera looking along ego +x: cam x = -ego y, cam y = -ego z, cam z = ego x
CAM_AXES_FROM_EGO = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


def default_calibration(width: int = 160, height: int = 96, focal: float = 80.0) -> Calibration:
    """Forward camera 1.5 m above ground, radar at the bumper 0.5 m up, both looking ahead."""
    K = CameraIntrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)
    cam_pos = np.array([0.0, 0.0, 1.5])
    cam = RigidTransform(FrameId.EGO, FrameId.CAMERA1, CAM_AXES_FROM_EGO, -CAM_AXES_FROM_EGO @ cam_pos)
    radar_pos = np.array([0.5, 0.0, 0.5])
    radar = RigidTransform(FrameId.EGO, FrameId.RADAR, np.eye(3), -radar_pos)
    return Calibration(K, cam, radar, FOV_PIXEL_SET)


def _transform_to_dict(T: RigidTransform) -> dict:
    return {"from": T.src.value, "to": T.dst.value,
            "rotation": T.rotation.ravel().tolist(), "translation": T.translation.tolist()}


def _transform_from_dict(d: dict) -> RigidTransform:
    try:
        rot = np.asarray(d["rotation"], dtype=np.float64)
        if rot.size != 9:
            raise ConfigurationError("rotation needs 9 row-major values")
        return RigidTransform(FrameId(d["from"]), FrameId(d["to"]), rot.reshape(3, 3), d["translation"])
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"malformed transform entry: {exc}") from exc


def calibration_to_dict(calib: Calibration) -> dict:
    K = calib.intrinsics
    return {
        "intrinsics": {"fx": K.fx, "fy": K.fy, "cx": K.cx, "cy": K.cy, "width": K.width, "height": K.height},
        "fov": {"azimuth_halfwidth": calib.fov.azimuth_halfwidth,
                "elevation_halfwidth": calib.fov.elevation_halfwidth},
        "transforms": [_transform_to_dict(calib.cam_from_ego), _transform_to_dict(calib.radar_from_ego)],
    }


def calibration_from_dict(d: dict) -> Calibration:
    try:
        K = CameraIntrinsics(**d["intrinsics"])
        fov_spec = d.get("fov", "pixel-set")
        fov = FOV_PRESETS[fov_spec] if isinstance(fov_spec, str) else RadarFov(**fov_spec)
        transforms = [_transform_from_dict(t) for t in d["transforms"]]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed calibration: {exc}") from exc
    by_dst = {}
    for T in transforms:
        T = T if T.src == FrameId.EGO else T.inverse()
        by_dst[T.dst] = T
    cam = by_dst.get(FrameId.CAMERA1) or by_dst.get(FrameId.CAMERA2)
    radar = by_dst.get(FrameId.RADAR)
    if cam is None or radar is None:
        raise ConfigurationError("calibration needs an ego<->camera and an ego<->radar transform")
    return Calibration(K, cam, radar, fov)


def load_calibration(path: str | Path) -> Calibration:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"calibration file not found: {path}")
    try:
        return calibration_from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc


def save_calibration(calib: Calibration, path: str | Path) -> None:
    Path(path).write_text(json.dumps(calibration_to_dict(calib), indent=2))
