"""Rigid-body poses, trajectory interpolation, and camera projections.

Frame conventions used throughout the package:

    World frame:   x forward (nominal driving direction), y left, z up.
                   The ground is the plane z = 0.
    Body frame:    vehicle navigation (INS) frame, same axis convention as
                   the world frame when the vehicle is level and unrotated.
    Camera frame:  x right, y down, z forward along the optical axis
                   (standard computer vision convention).

A ``Pose`` stores a world-from-body (or parent-from-child) transform:
``p_parent = R(q) @ p_child + t``.  Quaternions are scalar-last
``[qx, qy, qz, qw]``, matching the trajectory text format
``t qx qy qz qw tx ty tz``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation, Slerp

from .errors import GeometryError, TimestampRangeError


# ---------------------------------------------------------------------------
# Poses and trajectories


@dataclass
class Pose:
    """A timestamped rigid transform (parent-from-child)."""

    quat: np.ndarray        # [qx, qy, qz, qw], unit norm
    trans: np.ndarray       # meters
    timestamp: float = 0.0  # seconds

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.trans = np.asarray(self.trans, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(self.quat))
        if abs(norm - 1.0) > 1e-3:
            raise ValueError(f"quaternion norm {norm} too far from 1")
        self.quat = self.quat / norm
        if not math.isfinite(self.timestamp):
            raise ValueError("pose timestamp must be finite")

    @classmethod
    def identity(cls, timestamp: float = 0.0) -> "Pose":
        return cls(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3), timestamp)

    @classmethod
    def from_rotation(cls, rotation: Rotation, trans, timestamp: float = 0.0) -> "Pose":
        return cls(rotation.as_quat(), np.asarray(trans, dtype=np.float64), timestamp)

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quat)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) or (3,) child-frame points into the parent frame."""
        pts = np.asarray(points, dtype=np.float64)
        return self.rotation.apply(pts) + self.trans

    def compose(self, other: "Pose") -> "Pose":
        """Chain transforms: (self o other) maps other's child into self's parent."""
        rot = self.rotation * other.rotation
        trans = self.rotation.apply(other.trans) + self.trans
        return Pose.from_rotation(rot, trans, self.timestamp)

    def inverse(self) -> "Pose":
        rot_inv = self.rotation.inv()
        return Pose.from_rotation(rot_inv, -rot_inv.apply(self.trans), self.timestamp)


@dataclass
class Trajectory:
    """A time-ordered sequence of poses with slerp/lerp interpolation."""

    poses: list[Pose]
    _times: np.ndarray = field(init=False, repr=False)
    _translations: np.ndarray = field(init=False, repr=False)
    _slerp: Slerp = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.poses) < 2:
            raise ValueError("trajectory needs at least 2 poses")
        self._times = np.array([p.timestamp for p in self.poses], dtype=np.float64)
        if not np.all(np.diff(self._times) > 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        self._translations = np.stack([p.trans for p in self.poses])
        rots = Rotation.from_quat(np.stack([p.quat for p in self.poses]))
        self._slerp = Slerp(self._times, rots)

    @property
    def start_time(self) -> float:
        return float(self._times[0])

    @property
    def end_time(self) -> float:
        return float(self._times[-1])

    def _check_span(self, times: np.ndarray) -> None:
        if times.size and (times.min() < self._times[0] or times.max() > self._times[-1]):
            raise TimestampRangeError(
                f"time outside trajectory span [{self._times[0]}, {self._times[-1]}]")

    def rotations_at(self, times) -> Rotation:
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        self._check_span(times)
        return self._slerp(times)

    def translations_at(self, times) -> np.ndarray:
        times = np.atleast_1d(np.asarray(times, dtype=np.float64))
        self._check_span(times)
        out = np.empty((times.size, 3))
        for axis in range(3):
            out[:, axis] = np.interp(times, self._times, self._translations[:, axis])
        return out


def interpolate_pose(traj: Trajectory, t: float) -> Pose:
    """Pose at time ``t``: lerp on translation, slerp on rotation."""
    rot = traj.rotations_at(t)[0]
    trans = traj.translations_at(t)[0]
    return Pose.from_rotation(rot, trans, float(t))


def load_trajectory(path: Path | str) -> Trajectory:
    """Read a trajectory file: one ``t qx qy qz qw tx ty tz`` line per pose."""
    poses = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ValueError(f"{path}:{line_no}: expected 8 fields, got {len(fields)}")
        values = [float(x) for x in fields]
        poses.append(Pose(np.array(values[1:5]), np.array(values[5:8]), values[0]))
    return Trajectory(poses)


def save_trajectory(path: Path | str, traj: Trajectory) -> None:
    lines = []
    for p in traj.poses:
        fields = [p.timestamp, *p.quat, *p.trans]
        lines.append(" ".join(repr(float(x)) for x in fields))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Cameras


@dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole intrinsics (no distortion)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


# Base orientation of a forward-looking camera in the body frame:
# camera x (right) -> body -y, camera y (down) -> body -z, camera z -> body +x.
_CAM_BASE = Rotation.from_matrix(np.array([
    [0.0, 0.0, 1.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
]))


def camera_mount_pose(position, yaw: float = 0.0, pitch_down: float = 0.0) -> Pose:
    """Body-from-camera pose for a camera mounted at ``position`` (meters).

    ``yaw`` rotates the view left (about body z, radians); ``pitch_down``
    tilts the optical axis below the body horizon.
    """
    rot = Rotation.from_euler("z", yaw) * _CAM_BASE * Rotation.from_euler("x", -pitch_down)
    return Pose.from_rotation(rot, np.asarray(position, dtype=np.float64))


def project_points(points: np.ndarray, intrinsics: CameraIntrinsics
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole-project (N, 3) camera-frame points.

    Returns ``(uvd, valid)`` where ``uvd[:, 0:2]`` are pixel coordinates,
    ``uvd[:, 2]`` the depth, and ``valid`` flags points in front of the
    camera.  Invalid rows are NaN.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    z = pts[:, 2]
    valid = z > 0
    uvd = np.full((pts.shape[0], 3), np.nan)
    with np.errstate(divide="ignore", invalid="ignore"):
        uvd[valid, 0] = intrinsics.fx * pts[valid, 0] / z[valid] + intrinsics.cx
        uvd[valid, 1] = intrinsics.fy * pts[valid, 1] / z[valid] + intrinsics.cy
        uvd[valid, 2] = z[valid]
    return uvd, valid


def backproject_pixels(uv: np.ndarray, depth: np.ndarray,
                       intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift pixels at the given depths back to camera-frame 3D points."""
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    x = (uv[:, 0] - intrinsics.cx) / intrinsics.fx * depth
    y = (uv[:, 1] - intrinsics.cy) / intrinsics.fy * depth
    return np.stack([x, y, depth], axis=1)


# ---------------------------------------------------------------------------
# Range images


@dataclass
class RangeImage:
    """Per-pixel depth of the nearest LiDAR return; <= 0 means no return."""

    depth: np.ndarray

    NO_RETURN: float = 0.0

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0

    def depth_at(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        return self.depth[rows, cols]


def build_range_image(points: np.ndarray, intrinsics: CameraIntrinsics,
                      fill_radius: int = 2) -> RangeImage:
    """Z-buffer camera-frame points into a per-pixel depth map.

    Pixels without a direct return are filled from their nearest covered
    pixel when within ``fill_radius``; beyond that they keep the no-return
    sentinel.
    """
    h, w = intrinsics.height, intrinsics.width
    depth = np.full((h, w), np.inf)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.size:
        uvd, valid = project_points(pts, intrinsics)
        cols = np.rint(uvd[:, 0]).astype(np.int64, copy=False)
        rows = np.rint(uvd[:, 1]).astype(np.int64, copy=False)
        keep = valid & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
        np.minimum.at(depth, (rows[keep], cols[keep]), uvd[keep, 2])
    hole = ~np.isfinite(depth)
    depth[hole] = RangeImage.NO_RETURN
    if fill_radius > 0 and hole.any() and not hole.all():
        dist, (src_r, src_c) = ndimage.distance_transform_edt(hole, return_indices=True)
        fill = hole & (dist <= fill_radius)
        depth[fill] = depth[src_r[fill], src_c[fill]]
    return RangeImage(depth)


# ---------------------------------------------------------------------------
# Motion correction


def motion_correct_scan(points: np.ndarray, timestamps: np.ndarray,
                        traj: Trajectory, sensor_extrinsic: Pose,
                        ref_time: float, target_extrinsic: Pose | None = None
                        ) -> np.ndarray:
    """Undo ego-motion within a scan.

    Each sensor-frame point is lifted into the world through the body pose
    at its own capture time, then expressed in the target sensor's frame at
    ``ref_time``.  ``sensor_extrinsic`` and ``target_extrinsic`` are
    body-from-sensor poses; the target defaults to the source sensor.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    times = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    if pts.shape[0] != times.shape[0]:
        raise ValueError("points and timestamps must have equal length")
    if target_extrinsic is None:
        target_extrinsic = sensor_extrinsic
    world_from_target = interpolate_pose(traj, ref_time).compose(target_extrinsic)
    if pts.shape[0] == 0:
        return pts
    body_pts = sensor_extrinsic.apply(pts)
    world_pts = traj.rotations_at(times).apply(body_pts) + traj.translations_at(times)
    return world_from_target.inverse().apply(world_pts)


# ---------------------------------------------------------------------------
# Road-weather-sensor trace projection


@dataclass
class ProjectedLabels:
    """Sparse per-pixel grip / layer-thickness labels in the reference image."""

    u: np.ndarray        # int pixel column
    v: np.ndarray        # int pixel row
    grip: np.ndarray
    d_water: np.ndarray  # mm
    d_ice: np.ndarray    # mm
    d_snow: np.ndarray   # mm

    def __len__(self) -> int:
        return self.u.shape[0]

    @classmethod
    def empty(cls) -> "ProjectedLabels":
        z = np.zeros(0)
        return cls(z.astype(np.int64), z.astype(np.int64), z.copy(), z.copy(),
                   z.copy(), z.copy())


@dataclass(frozen=True)
class RwsMeasurement:
    """One road-weather-sensor sample: grip plus surface layer thicknesses."""

    timestamp: float
    grip: float
    d_water: float  # mm
    d_ice: float    # mm
    d_snow: float   # mm

    def __post_init__(self):
        if not 0.0 <= self.grip <= 1.0:
            raise ValueError(f"grip {self.grip} outside [0, 1]")
        if min(self.d_water, self.d_ice, self.d_snow) < 0:
            raise ValueError("layer thicknesses must be non-negative")


def project_rws_trace(measurements, traj: Trajectory, rws_extrinsic: Pose,
                      cam_extrinsic: Pose, intrinsics: CameraIntrinsics,
                      range_image: RangeImage, frame_time: float,
                      max_range: float = 50.0, occlusion_tolerance: float = 0.5,
                      time_window: float = 10.0) -> ProjectedLabels:
    """Project measurements recorded after ``frame_time`` into that frame.

    Keeps measurements whose ground-contact point lands inside the image,
    lies within ``max_range`` meters of the camera, and is not behind an
    obstacle seen by the range image (depth exceeding the range-image depth
    by more than ``occlusion_tolerance``).  Pixels where the range image has
    no return carry no occlusion evidence and are kept.
    """
    meas = list(measurements)
    times = np.array([m.timestamp for m in meas], dtype=np.float64)
    in_window = (times >= frame_time) & (times <= frame_time + time_window)
    meas = [m for m, ok in zip(meas, in_window) if ok]
    if not meas:
        return ProjectedLabels.empty()
    times = times[in_window]

    footprint_body = rws_extrinsic.apply(np.zeros(3))
    world_pts = (traj.rotations_at(times).apply(
        np.broadcast_to(footprint_body, (times.size, 3)))
        + traj.translations_at(times))
    world_from_cam = interpolate_pose(traj, frame_time).compose(cam_extrinsic)
    cam_pts = world_from_cam.inverse().apply(world_pts)

    uvd, valid = project_points(cam_pts, intrinsics)
    cols = np.full(times.size, -1, dtype=np.int64)
    rows = np.full(times.size, -1, dtype=np.int64)
    cols[valid] = np.rint(uvd[valid, 0]).astype(np.int64)
    rows[valid] = np.rint(uvd[valid, 1]).astype(np.int64)
    keep = (valid & (cols >= 0) & (cols < intrinsics.width)
            & (rows >= 0) & (rows < intrinsics.height))
    keep &= np.linalg.norm(cam_pts, axis=1) <= max_range
    if keep.any():
        ranged = range_image.depth_at(rows[keep], cols[keep])
        occluded = (ranged > 0) & (uvd[keep, 2] > ranged + occlusion_tolerance)
        idx = np.flatnonzero(keep)
        keep[idx[occluded]] = False

    idx = np.flatnonzero(keep)
    return ProjectedLabels(
        u=cols[idx],
        v=rows[idx],
        grip=np.array([meas[i].grip for i in idx]),
        d_water=np.array([meas[i].d_water for i in idx]),
        d_ice=np.array([meas[i].d_ice for i in idx]),
        d_snow=np.array([meas[i].d_snow for i in idx]),
    )


# ---------------------------------------------------------------------------
# Cross-camera thermal lookup


def thermal_lookup(pixels: np.ndarray, range_image: RangeImage,
                   intrinsics_ref: CameraIntrinsics, ref_from_thermal: Pose,
                   intrinsics_thermal: CameraIntrinsics, thermal_img: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Sample the thermal image at reference-camera pixels via the range image.

    Each reference pixel is back-projected through its range-image depth,
    transformed into the thermal camera, and bilinearly sampled.  Returns
    ``(values, valid)``; a pixel is invalid when it has no depth, falls
    behind the thermal camera, or lands outside the thermal frame.
    """
    uv = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    rows = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, intrinsics_ref.height - 1)
    cols = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, intrinsics_ref.width - 1)
    depth = range_image.depth_at(rows, cols)
    has_depth = depth > 0

    ref_pts = backproject_pixels(uv, np.where(has_depth, depth, 1.0), intrinsics_ref)
    thermal_pts = ref_from_thermal.inverse().apply(ref_pts)
    uvd_t, in_front = project_points(thermal_pts, intrinsics_thermal)

    valid = has_depth & in_front
    valid &= np.where(
        np.isfinite(uvd_t[:, 0]),
        (uvd_t[:, 0] >= 0) & (uvd_t[:, 0] <= intrinsics_thermal.width - 1)
        & (uvd_t[:, 1] >= 0) & (uvd_t[:, 1] <= intrinsics_thermal.height - 1),
        False)

    values = np.zeros(uv.shape[0])
    if valid.any():
        coords = np.stack([uvd_t[valid, 1], uvd_t[valid, 0]])
        values[valid] = ndimage.map_coordinates(
            np.asarray(thermal_img, dtype=np.float64), coords, order=1, mode="nearest")
    return values, valid


def warp_thermal_to_reference(range_image: RangeImage,
                              intrinsics_ref: CameraIntrinsics,
                              ref_from_thermal: Pose,
                              intrinsics_thermal: CameraIntrinsics,
                              thermal_img: np.ndarray
                              ) -> tuple[np.ndarray, np.ndarray]:
    """Resample a full thermal frame onto the reference pixel grid."""
    h, w = intrinsics_ref.height, intrinsics_ref.width
    vv, uu = np.mgrid[0:h, 0:w]
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=1)
    values, valid = thermal_lookup(pixels, range_image, intrinsics_ref,
                                   ref_from_thermal, intrinsics_thermal, thermal_img)
    return values.reshape(h, w), valid.reshape(h, w)


# ---------------------------------------------------------------------------
# Horizon estimation


def estimate_horizon_row(world_from_cam: Pose, intrinsics: CameraIntrinsics,
                         ground_plane_normal=(0.0, 0.0, 1.0)) -> float:
    """Image row of the ground plane's vanishing line at the center column.

    The vanishing line of a plane with unit normal ``n`` is
    ``l = K^-T R_cw n`` in homogeneous pixel coordinates; we solve it at
    ``u = cx``.  Raises :class:`GeometryError` when the line is vertical or
    at infinity (camera axis perpendicular to the plane).
    """
    n_world = np.asarray(ground_plane_normal, dtype=np.float64)
    norm = np.linalg.norm(n_world)
    if norm == 0:
        raise GeometryError("ground plane normal must be nonzero")
    n_cam = world_from_cam.rotation.inv().apply(n_world / norm)
    a = n_cam[0] / intrinsics.fx
    b = n_cam[1] / intrinsics.fy
    c = -intrinsics.cx * a - intrinsics.cy * b + n_cam[2]
    if abs(b) < 1e-12:
        raise GeometryError("ground plane vanishing line is degenerate for this pose")
    return float(-(a * intrinsics.cx + c) / b)
