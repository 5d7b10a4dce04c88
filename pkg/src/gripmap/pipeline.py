"""From raw drive recordings to pixelwise-matched training samples.

The steps mirror the data flow: thermal frames are warped onto the reference
camera through the LiDAR range image, side cameras are harmonized and the
composite standardized over the road region; reflectance scans are motion
corrected and accumulated across recent sweeps; sparse grip measurements are
projected into the frame and weighted by image row; finally samples are
geofenced into train / val / test and persisted in a flat binary layout.
"""

from __future__ import annotations

import csv
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    DegenerateStatisticsError,
    DegenerateWeightsError,
    FormatError,
    InputError,
)
from .geometry import (
    RangeImage,
    Trajectory,
    build_range_image,
    estimate_horizon_row,
    interpolate_pose,
    motion_correct_scan,
    project_points,
    project_rws_trace,
    warp_thermal_to_reference,
)
from .synth import DriveRecording, ReflectanceScan, SensorRig
from .tensorio import read_tensor, write_tensor

SPLIT_NAMES = ("train", "val", "test", "excluded")
LABEL_HEADER = ["u", "v", "grip", "d_water_mm", "d_ice_mm", "d_snow_mm", "weight_raw"]
MANIFEST_HEADER = ["id", "frame_time", "pos_x", "pos_y"]


# ---------------------------------------------------------------------------
# Domain types


@dataclass(frozen=True)
class SparseLabel:
    """One projected grip measurement: pixel, targets, and raw row weight."""

    u: int
    v: int
    grip: float
    d_water: float
    d_ice: float
    d_snow: float
    weight_raw: float

    def __post_init__(self):
        if not 0.0 <= self.grip <= 1.0:
            raise InputError(f"label grip {self.grip} outside [0, 1]")
        if self.weight_raw < 0:
            raise InputError("weight_raw must be non-negative")


@dataclass
class Sample:
    """One pixelwise-matched multi-modality frame with sparse labels."""

    id: str
    frame_time: float
    position: np.ndarray          # (2,) world meters
    rgb: np.ndarray               # (H, W, 3) float32 in [0, 1]
    thermal: np.ndarray           # (H, W) float32, standardized
    reflectance: np.ndarray       # (H, W) float32 in [0, 1]
    reflectance_valid: np.ndarray  # (H, W) bool
    labels: list[SparseLabel]
    road_mask: np.ndarray         # (H, W) bool

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(2)
        h, w, c = self.rgb.shape
        if c != 3:
            raise InputError("rgb must have 3 channels")
        for name in ("thermal", "reflectance", "reflectance_valid", "road_mask"):
            if getattr(self, name).shape != (h, w):
                raise InputError(f"{name} shape differs from rgb {h}x{w}")
        for lab in self.labels:
            if not (0 <= lab.u < w and 0 <= lab.v < h):
                raise InputError(f"label pixel ({lab.u}, {lab.v}) outside {h}x{w}")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class SplitAssignment:
    """Total partition of sample ids over train / val / test / excluded."""

    assignment: dict[str, str]

    def __post_init__(self):
        for sid, split in self.assignment.items():
            if split not in SPLIT_NAMES:
                raise ConfigError(f"sample {sid} assigned to unknown split {split!r}")

    def ids_for(self, split: str) -> list[str]:
        return [sid for sid, s in self.assignment.items() if s == split]

    def counts(self) -> dict[str, int]:
        out = {name: 0 for name in SPLIT_NAMES}
        for split in self.assignment.values():
            out[split] += 1
        return out


# ---------------------------------------------------------------------------
# Thermal normalization and harmonization


def normalize_thermal_frame(raw: np.ndarray, road_region: np.ndarray) -> np.ndarray:
    """Standardize a thermal frame by its road-region statistics.

    Removes the per-frame affine scale ambiguity: any a*raw + b (a > 0)
    normalizes to the same output.
    """
    region = np.asarray(road_region, dtype=bool)
    if not region.any():
        raise DegenerateStatisticsError("road region is empty")
    vals = np.asarray(raw, dtype=np.float64)[region]
    mu = vals.mean()
    sd = vals.std()
    if sd < 1e-6:
        raise DegenerateStatisticsError(f"road region sd {sd} below 1e-6")
    return ((np.asarray(raw, dtype=np.float64) - mu) / sd).astype(np.float32)


def _strip_moments(img: np.ndarray, strip: np.ndarray) -> tuple[float, float]:
    vals = img[strip]
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise DegenerateStatisticsError("overlap strip has no valid pixels")
    sd = float(vals.std())
    if sd < 1e-6:
        raise DegenerateStatisticsError(f"overlap strip sd {sd} below 1e-6")
    return float(vals.mean()), sd


def harmonize_side_cameras(center: np.ndarray, left: np.ndarray | None,
                           right: np.ndarray | None,
                           overlap_left: np.ndarray | None = None,
                           overlap_right: np.ndarray | None = None
                           ) -> np.ndarray:
    """Rescale side thermal views to the center view and composite them.

    All images live on the same pixel grid with NaN marking pixels a camera
    does not cover.  Each present side image is affinely rescaled so its
    overlap-strip mean / sd matches the center image's, then pixels missing
    from the center are filled from the sides (left before right).  A side
    given as None is simply skipped.
    """
    out = np.array(center, dtype=np.float64, copy=True)
    for side, strip in ((left, overlap_left), (right, overlap_right)):
        if side is None:
            continue
        if strip is None:
            strip = np.isfinite(out) & np.isfinite(side)
        mu_c, sd_c = _strip_moments(out, strip)
        mu_s, sd_s = _strip_moments(side, strip)
        scaled = (side - mu_s) * (sd_c / sd_s) + mu_c
        fill = ~np.isfinite(out) & np.isfinite(scaled)
        out[fill] = scaled[fill]
    return out


# ---------------------------------------------------------------------------
# Reflectance accumulation


@dataclass
class AccumulatedReflectance:
    """Reflectance image in the reference camera plus its source points."""

    reflectance: np.ndarray   # (H, W) float32, 0 where invalid
    valid: np.ndarray         # (H, W) bool
    cam_points: np.ndarray    # (N, 3) reference-camera frame, all kept returns
    range_image: RangeImage


def accumulate_reflectance(scan: ReflectanceScan,
                           previous_scans: list[ReflectanceScan],
                           traj: Trajectory, rig: SensorRig,
                           frame_time: float,
                           horizon_row: float | None = None,
                           lower_fraction: float = 0.2,
                           fill_radius: int = 2) -> AccumulatedReflectance:
    """Fuse the current sweep with the road-level part of recent sweeps.

    All sweeps are motion corrected into the reference camera at
    ``frame_time``.  Previous sweeps contribute only pixels below
    ``horizon_row + lower_fraction * H`` (near-road rows, where extra
    coverage helps and parallax stays small); the nearest return wins each
    pixel.
    """
    if len(previous_scans) > 3:
        previous_scans = previous_scans[-3:]
    k = rig.rgb_intrinsics
    if horizon_row is None:
        cam_world = interpolate_pose(traj, frame_time).compose(rig.cam_mount)
        horizon_row = estimate_horizon_row(cam_world, k)
    row_threshold = horizon_row + lower_fraction * k.height

    pts_list, refl_list = [], []
    for i, s in enumerate([scan] + list(previous_scans)):
        if len(s.points) == 0:
            continue
        cam_pts = motion_correct_scan(s.points, s.timestamps, traj,
                                      rig.lidar_mount, frame_time,
                                      target_extrinsic=rig.cam_mount)
        if i > 0:
            uvd, ok = project_points(cam_pts, k)
            rows = uvd[:, 1]
            keep = ok & (rows >= row_threshold)
            cam_pts = cam_pts[keep]
            s_refl = s.reflectance[keep]
        else:
            s_refl = s.reflectance
        pts_list.append(cam_pts)
        refl_list.append(s_refl)

    refl_img = np.zeros((k.height, k.width), dtype=np.float32)
    valid = np.zeros((k.height, k.width), dtype=bool)
    if not pts_list:
        empty = np.zeros((0, 3))
        return AccumulatedReflectance(refl_img, valid, empty,
                                      build_range_image(empty, k, fill_radius))
    pts = np.concatenate(pts_list)
    refl = np.concatenate(refl_list)

    uvd, ok = project_points(pts, k)
    cols = np.rint(uvd[:, 0]).astype(np.int64, copy=False)
    rows = np.rint(uvd[:, 1]).astype(np.int64, copy=False)
    keep = ok & (cols >= 0) & (cols < k.width) & (rows >= 0) & (rows < k.height)
    rows, cols = rows[keep], cols[keep]
    depth, vals = uvd[keep, 2], refl[keep]
    order = np.argsort(-depth, kind="stable")  # nearest return written last
    refl_img[rows[order], cols[order]] = vals[order]
    valid[rows, cols] = True

    return AccumulatedReflectance(refl_img, valid, pts,
                                  build_range_image(pts, k, fill_radius))


# ---------------------------------------------------------------------------
# Label weighting


def raw_row_weights(rows, horizon_row: float, height: int) -> np.ndarray:
    """Linear ramp: 0 at the horizon row, 1 at the bottom image row."""
    if not 0.0 <= horizon_row < height - 1:
        raise InputError(f"horizon row {horizon_row} outside [0, {height - 1})")
    rows = np.asarray(rows, dtype=np.float64)
    return np.maximum(0.0, (rows - horizon_row) / ((height - 1) - horizon_row))


def compute_weights(rows, horizon_row: float, height: int, mode: str = "eval",
                    prefilter_rows=None) -> np.ndarray:
    """Per-label weights, normalized to mean one within the frame.

    ``eval`` normalizes over the given labels so their mean is exactly 1.
    ``train`` does the same unless ``prefilter_rows`` is supplied, in which
    case the normalizer is computed over that larger pre-filter set (leaving
    the surviving labels with mean slightly off 1, as when overlapping
    measurement positions are dropped after normalization).
    """
    if mode not in ("train", "eval"):
        raise InputError(f"mode must be train or eval, got {mode!r}")
    rows = np.asarray(rows, dtype=np.float64)
    if rows.size == 0:
        raise InputError("weights need at least one label")
    raw = raw_row_weights(rows, horizon_row, height)
    norm_source = raw
    if mode == "train" and prefilter_rows is not None:
        norm_source = raw_row_weights(prefilter_rows, horizon_row, height)
    total = norm_source.sum()
    if total <= 0:
        raise DegenerateWeightsError("all raw weights are zero")
    return raw * (norm_source.size / total)


# ---------------------------------------------------------------------------
# Geofenced splitting


def geofence_split(positions: dict[str, np.ndarray], centers,
                   radius: float, buffer: float = 55.0,
                   val_test_assignment=None) -> SplitAssignment:
    """Assign samples to splits by distance to held-out circles.

    Inside a circle: that circle's val / test label.  Outside every circle
    but within ``buffer`` meters of any circle border: excluded, so train and
    held-out data never come closer than the buffer.  Everything else trains.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    if centers.shape[0] == 0:
        raise ConfigError("geofence needs at least one circle center")
    if radius <= 0:
        raise ConfigError("geofence radius must be positive")
    if val_test_assignment is None:
        val_test_assignment = ["val"] * centers.shape[0]
    labels = list(val_test_assignment)
    if len(labels) != centers.shape[0]:
        raise ConfigError("need one val/test label per circle center")
    for lab in labels:
        if lab not in ("val", "test"):
            raise ConfigError(f"circle label must be val or test, got {lab!r}")
    for i in range(len(labels)):
        for j in range(i + 1, len(labels)):
            dist = float(np.linalg.norm(centers[i] - centers[j]))
            if dist < 2 * radius and labels[i] != labels[j]:
                raise ConfigError(
                    f"circles {i} and {j} overlap but carry different labels")

    assignment = {}
    for sid, pos in positions.items():
        d = np.linalg.norm(centers - np.asarray(pos, dtype=np.float64), axis=1)
        nearest = int(np.argmin(d))
        if d[nearest] <= radius:
            assignment[sid] = labels[nearest]
        elif (d <= radius + buffer).any():
            assignment[sid] = "excluded"
        else:
            assignment[sid] = "train"
    return SplitAssignment(assignment)


# ---------------------------------------------------------------------------
# Sample assembly


def assemble_samples(recording: DriveRecording, drive_id: str,
                     time_window: float = 10.0, max_range: float = 50.0,
                     occlusion_tolerance: float = 0.5,
                     n_accumulate: int = 3) -> list[Sample]:
    """Build one Sample per frame of a drive recording.

    Runs the full matching chain: reflectance accumulation, range image,
    thermal warp + harmonization + standardization, and projection of the
    road-weather trace recorded within ``time_window`` after each frame.
    """
    rig = recording.rig
    k = rig.rgb_intrinsics
    traj = recording.trajectory
    samples = []
    for idx, frame in enumerate(recording.frames):
        ft = frame.frame_time
        body = interpolate_pose(traj, ft)
        cam_world = body.compose(rig.cam_mount)
        horizon = estimate_horizon_row(cam_world, k)

        prev = [f.scan for f in recording.frames[max(0, idx - n_accumulate):idx]]
        acc = accumulate_reflectance(frame.scan, prev, traj, rig, ft,
                                     horizon_row=horizon)

        warped = {}
        for name, img, mount in [
                ("left", frame.thermal_left, rig.thermal_left_mount),
                ("right", frame.thermal_right, rig.thermal_right_mount)]:
            ref_from_thermal = rig.cam_mount.inverse().compose(mount)
            vals, ok = warp_thermal_to_reference(
                acc.range_image, k, ref_from_thermal,
                rig.thermal_intrinsics, img)
            warped[name] = np.where(ok, vals, np.nan)
        composite = harmonize_side_cameras(warped["left"], None, warped["right"])

        thermal_region = frame.road_mask & np.isfinite(composite)
        thermal = normalize_thermal_frame(
            np.where(np.isfinite(composite), composite, 0.0), thermal_region)
        thermal[~np.isfinite(composite)] = 0.0

        projected = project_rws_trace(
            recording.rws_trace, traj, rig.rws_mount, rig.cam_mount, k,
            acc.range_image, ft, max_range=max_range,
            occlusion_tolerance=occlusion_tolerance, time_window=time_window)
        raw_w = (raw_row_weights(projected.v, horizon, k.height)
                 if len(projected) else np.zeros(0))
        labels = [SparseLabel(u=int(u), v=int(v), grip=float(g),
                              d_water=float(w), d_ice=float(i),
                              d_snow=float(s), weight_raw=float(wr))
                  for u, v, g, w, i, s, wr in zip(
                      projected.u, projected.v, projected.grip,
                      projected.d_water, projected.d_ice, projected.d_snow,
                      raw_w)]

        samples.append(Sample(
            id=f"{drive_id}_f{idx:03d}",
            frame_time=ft,
            position=body.trans[:2].copy(),
            rgb=frame.rgb,
            thermal=thermal,
            reflectance=acc.reflectance,
            reflectance_valid=acc.valid,
            labels=labels,
            road_mask=frame.road_mask,
        ))
    return samples


# ---------------------------------------------------------------------------
# Persistence


def write_sample(sample: Sample, sample_dir: Path | str) -> None:
    """Write one sample directory: five tensors plus the label table."""
    d = Path(sample_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "rgb.ten", sample.rgb.astype(np.float32))
    write_tensor(d / "thermal.ten", sample.thermal.astype(np.float32))
    write_tensor(d / "refl.ten", sample.reflectance.astype(np.float32))
    write_tensor(d / "refl_mask.ten", sample.reflectance_valid.astype(np.uint8))
    write_tensor(d / "road_mask.ten", sample.road_mask.astype(np.uint8))
    tmp = d / "labels.csv.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LABEL_HEADER)
        for lab in sample.labels:
            writer.writerow([lab.u, lab.v, repr(lab.grip), repr(lab.d_water),
                             repr(lab.d_ice), repr(lab.d_snow),
                             repr(lab.weight_raw)])
    os.replace(tmp, d / "labels.csv")


def read_sample(sample_dir: Path | str, sample_id: str | None = None,
                frame_time: float = 0.0, position=(0.0, 0.0)) -> Sample:
    """Read a sample directory; identity metadata comes from the manifest."""
    d = Path(sample_dir)
    rgb = read_tensor(d / "rgb.ten")
    thermal = read_tensor(d / "thermal.ten")
    refl = read_tensor(d / "refl.ten")
    refl_mask = read_tensor(d / "refl_mask.ten").astype(bool)
    road_mask = read_tensor(d / "road_mask.ten").astype(bool)
    labels = []
    with open(d / "labels.csv", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != LABEL_HEADER:
            raise FormatError(f"unexpected labels.csv header {header}")
        for row in reader:
            if len(row) != len(LABEL_HEADER):
                raise FormatError(f"labels.csv row has {len(row)} fields")
            labels.append(SparseLabel(
                u=int(row[0]), v=int(row[1]), grip=float(row[2]),
                d_water=float(row[3]), d_ice=float(row[4]),
                d_snow=float(row[5]), weight_raw=float(row[6])))
    return Sample(id=sample_id or d.name, frame_time=frame_time,
                  position=np.asarray(position, dtype=np.float64),
                  rgb=rgb, thermal=thermal, reflectance=refl,
                  reflectance_valid=refl_mask, labels=labels,
                  road_mask=road_mask)


def save_split(samples: list[Sample], split_dir: Path | str) -> None:
    """Write samples under ``split_dir/<id>/`` and the split manifest."""
    d = Path(split_dir)
    d.mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_sample(s, d / s.id)
    write_manifest(d, [(s.id, s.frame_time, s.position[0], s.position[1])
                       for s in samples])


def write_manifest(split_dir: Path | str, rows) -> None:
    tmp = Path(split_dir) / "manifest.csv.tmp"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for sid, ft, px, py in rows:
            writer.writerow([sid, repr(float(ft)), repr(float(px)), repr(float(py))])
    os.replace(tmp, Path(split_dir) / "manifest.csv")


def read_manifest(split_dir: Path | str) -> list[tuple[str, float, float, float]]:
    path = Path(split_dir) / "manifest.csv"
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise FormatError(f"unexpected manifest header {header} in {path}")
        for row in reader:
            if len(row) != 4:
                raise FormatError(f"manifest row has {len(row)} fields in {path}")
            rows.append((row[0], float(row[1]), float(row[2]), float(row[3])))
    return rows


def load_split(split_dir: Path | str) -> list[Sample]:
    d = Path(split_dir)
    return [read_sample(d / sid, sample_id=sid, frame_time=ft, position=(px, py))
            for sid, ft, px, py in read_manifest(d)]


def apply_split(root: Path | str, assignment: SplitAssignment,
                source: str = "unsplit") -> None:
    """Move sample directories from ``root/source`` into per-split trees.

    Rewrites the per-split manifests; the source manifest stays behind as a
    record of the original order.
    """
    root = Path(root)
    src = root / source
    rows = {sid: (sid, ft, px, py) for sid, ft, px, py in read_manifest(src)}
    missing = set(assignment.assignment) - set(rows)
    if missing:
        raise InputError(f"assignment names unknown sample ids: {sorted(missing)[:5]}")
    by_split: dict[str, list] = {name: [] for name in SPLIT_NAMES}
    for sid, split in assignment.assignment.items():
        by_split[split].append(rows[sid])
    for split, split_rows in by_split.items():
        d = root / split
        d.mkdir(parents=True, exist_ok=True)
        for sid, *_ in split_rows:
            shutil.move(str(src / sid), str(d / sid))
        write_manifest(d, split_rows)
