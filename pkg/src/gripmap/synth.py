"""Synthetic winter-road scenes and the simulated sensor rig that records them.

A scene is a flat world: the ground plane z = 0 carries per-cell water / ice /
snow thickness fields, albedo, and surface temperature over a regular grid,
plus optional boxes standing on the road.  A documented grip oracle maps the
layer thicknesses to a friction coefficient; the simulated road-weather sensor
reports that oracle (with optional label noise) while cameras and a
reflectance scanner observe the same fields through simple material rules.
All randomness is driven by explicit seeds, and per-frame generators are
derived as ``default_rng((seed, frame_index))`` so frames can be rendered in
any order or in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError
from .geometry import (
    CameraIntrinsics,
    Pose,
    RwsMeasurement,
    Trajectory,
    backproject_pixels,
    camera_mount_pose,
    interpolate_pose,
)

PROFILE_NAMES = ("dry", "wet", "snowy_with_tracks", "icy_patches", "slush", "mixed")

# Stream index used to derive the road-weather-sensor noise generator; frame
# renderers use their frame index, which stays far below this.
_RWS_STREAM = 0x52575321


# ---------------------------------------------------------------------------
# Grip oracle


@dataclass(frozen=True)
class GripModelParams:
    """Saturating-ramp grip model; anchors: dry 0.82, deep snow 0.35, ice 0.10."""

    g_dry: float = 0.82
    g_snow_floor: float = 0.35
    g_min: float = 0.10
    tau_water: float = 8.0  # mm to saturate the water ramp
    tau_ice: float = 0.5
    tau_snow: float = 2.0

    def __post_init__(self):
        if not self.g_min <= self.g_snow_floor <= self.g_dry:
            raise ValueError("need g_min <= g_snow_floor <= g_dry")
        if min(self.tau_water, self.tau_ice, self.tau_snow) <= 0:
            raise ValueError("saturation thicknesses must be positive")


def grip_oracle(d_water, d_ice, d_snow, params: GripModelParams | None = None):
    """Grip from layer thicknesses (mm): min of three saturating ramps.

    Each layer pulls grip from ``g_dry`` toward its floor as the layer
    thickness approaches its saturation value; the layers do not stack, the
    worst one wins.  Accepts scalars or broadcastable arrays.
    """
    p = params or GripModelParams()
    d_water = np.asarray(d_water, dtype=np.float64)
    d_ice = np.asarray(d_ice, dtype=np.float64)
    d_snow = np.asarray(d_snow, dtype=np.float64)
    if (d_water < 0).any() or (d_ice < 0).any() or (d_snow < 0).any():
        raise InputError("layer thicknesses must be non-negative")
    sat = lambda x: np.minimum(x, 1.0)  # noqa: E731
    g_w = p.g_dry - (p.g_dry - p.g_min) * sat(d_water / p.tau_water)
    g_i = p.g_dry - (p.g_dry - p.g_min) * sat(d_ice / p.tau_ice)
    g_s = p.g_dry - (p.g_dry - p.g_snow_floor) * sat(d_snow / p.tau_snow)
    out = np.minimum(np.minimum(g_w, g_i), g_s)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Scenes


@dataclass(frozen=True)
class ConditionProfile:
    """A named weather condition with overall intensity and scene brightness."""

    name: str
    intensity: float = 1.0
    illumination: float = 1.0

    def __post_init__(self):
        if self.name not in PROFILE_NAMES:
            raise ConfigError(
                f"unknown condition profile {self.name!r}; choose from {PROFILE_NAMES}")
        if not 0.0 <= self.intensity <= 1.0 or not 0.0 <= self.illumination <= 1.0:
            raise ConfigError("intensity and illumination must be in [0, 1]")


@dataclass(frozen=True)
class SceneGeometry:
    """Extent and resolution of the scene grid, in world meters."""

    x_min: float = -10.0
    x_max: float = 260.0
    y_center: float = 0.0
    half_width: float = 16.0
    cell_size: float = 0.25
    road_half_width: float = 4.0
    track_offset: float = 0.8    # wheel-track lateral offset from road center
    track_half_width: float = 0.35
    n_obstacles: int = 0
    obstacle_size: float = 1.5   # cube edge, meters

    @property
    def y_min(self) -> float:
        return self.y_center - self.half_width

    @property
    def y_max(self) -> float:
        return self.y_center + self.half_width


@dataclass
class Box:
    """Axis-aligned box, world meters."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if not np.all(self.hi > self.lo):
            raise ValueError("box hi must exceed lo on every axis")


@dataclass
class SceneSpec:
    """Ground-plane condition fields on a regular grid plus standing boxes.

    Field arrays are indexed ``[iy, ix]``; cell (0, 0) covers the corner at
    ``(geometry.x_min, geometry.y_min)``.
    """

    geometry: SceneGeometry
    road_mask: np.ndarray    # (ny, nx) bool
    d_water: np.ndarray      # (ny, nx) mm
    d_ice: np.ndarray        # (ny, nx) mm
    d_snow: np.ndarray       # (ny, nx) mm
    albedo: np.ndarray       # (ny, nx, 3) in [0, 1]
    temperature: np.ndarray  # (ny, nx) degrees C
    obstacles: list[Box]
    seed: int

    def __post_init__(self):
        shape = self.road_mask.shape
        for name in ("d_water", "d_ice", "d_snow", "temperature"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} shape {arr.shape} != grid {shape}")
            if name.startswith("d_") and (arr < 0).any():
                raise ValueError(f"{name} has negative thicknesses")
        if self.albedo.shape != shape + (3,):
            raise ValueError("albedo must be (ny, nx, 3)")

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Grid indices of the cells containing world points; also in-bounds."""
        g = self.geometry
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        ix = np.floor((x - g.x_min) / g.cell_size).astype(np.int64)
        iy = np.floor((y - g.y_min) / g.cell_size).astype(np.int64)
        ny, nx = self.road_mask.shape
        ok = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        return iy, ix, ok

    def sample_layers(self, x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Layer thicknesses at world points; zero outside the grid."""
        iy, ix, ok = self.cell_index(x, y)
        iy = np.clip(iy, 0, self.road_mask.shape[0] - 1)
        ix = np.clip(ix, 0, self.road_mask.shape[1] - 1)
        return tuple(np.where(ok, fld[iy, ix], 0.0)
                     for fld in (self.d_water, self.d_ice, self.d_snow))

    def road_at(self, x, y) -> np.ndarray:
        iy, ix, ok = self.cell_index(x, y)
        iy = np.clip(iy, 0, self.road_mask.shape[0] - 1)
        ix = np.clip(ix, 0, self.road_mask.shape[1] - 1)
        return ok & self.road_mask[iy, ix]

    def contains(self, x, y) -> np.ndarray:
        _, _, ok = self.cell_index(x, y)
        return ok


def _smooth_unit_field(rng: np.random.Generator, shape, sigma_cells: float
                       ) -> np.ndarray:
    """Low-pass filtered noise rescaled to [0, 1] over the grid."""
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma_cells)
    lo, hi = f.min(), f.max()
    return (f - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def generate_scene(profile: ConditionProfile, seed: int,
                   geometry: SceneGeometry | None = None) -> SceneSpec:
    """Deterministically build the condition fields for one profile.

    dry: bare road.  wet: smooth water depth.  snowy_with_tracks: snow cover
    with two nearly bare wheel tracks.  icy_patches: compact saturated ice
    blobs.  slush: overlapping partial snow and water.  mixed: wet / snowy /
    icy sections alternating along the road.
    """
    g = geometry or SceneGeometry()
    rng = np.random.default_rng((int(seed), 0x5CE))
    nx = int(round((g.x_max - g.x_min) / g.cell_size))
    ny = int(round((g.y_max - g.y_min) / g.cell_size))
    shape = (ny, nx)

    ys = g.y_min + (np.arange(ny) + 0.5) * g.cell_size
    xs = g.x_min + (np.arange(nx) + 0.5) * g.cell_size
    yy = np.broadcast_to(ys[:, None], shape)
    road = np.abs(yy - g.y_center) <= g.road_half_width

    d_water = np.zeros(shape)
    d_ice = np.zeros(shape)
    d_snow = np.zeros(shape)
    amp = profile.intensity

    if profile.name == "dry":
        pass
    elif profile.name == "wet":
        d_water = 6.0 * amp * _smooth_unit_field(rng, shape, sigma_cells=8.0)
    elif profile.name == "snowy_with_tracks":
        base = (2.5 + 2.0 * _smooth_unit_field(rng, shape, 6.0)) * amp
        in_track = (np.abs(np.abs(yy - g.y_center) - g.track_offset)
                    <= g.track_half_width)
        d_snow = np.where(road & in_track, 0.05 * base, base)
    elif profile.name == "icy_patches":
        blobs = _smooth_unit_field(rng, shape, 4.0)
        thresh = np.quantile(blobs, 1.0 - 0.18 * max(amp, 0.05))
        d_ice = np.where(blobs >= thresh, 1.2 * max(amp, 0.05), 0.0)
    elif profile.name == "slush":
        d_snow = 1.4 * amp * _smooth_unit_field(rng, shape, 7.0)
        d_water = 4.0 * amp * _smooth_unit_field(rng, shape, 9.0)
    elif profile.name == "mixed":
        section = _smooth_unit_field(rng, (1, nx), 40.0)[0]
        wet_cols = section < 0.33
        snow_cols = section >= 0.66
        ice_cols = ~wet_cols & ~snow_cols
        d_water[:, wet_cols] = 5.0 * amp * _smooth_unit_field(
            rng, shape, 8.0)[:, wet_cols]
        d_snow[:, snow_cols] = 3.0 * amp * _smooth_unit_field(
            rng, shape, 6.0)[:, snow_cols]
        ice_field = _smooth_unit_field(rng, shape, 4.0)
        d_ice[:, ice_cols] = np.where(
            ice_field[:, ice_cols] > 0.75, 1.0 * amp, 0.0)

    # Layers exist only on the road surface.
    d_water = np.where(road, d_water, 0.0)
    d_ice = np.where(road, d_ice, 0.0)
    d_snow = np.where(road, d_snow, 0.0)

    texture = 0.02 * ndimage.gaussian_filter(rng.standard_normal(shape), 1.0)
    albedo = np.clip(0.40 + texture, 0.0, 1.0)[..., None].repeat(3, axis=2)

    base_temp = {"dry": 8.0, "wet": 4.0, "snowy_with_tracks": -4.0,
                 "icy_patches": -2.0, "slush": 0.0, "mixed": -1.0}[profile.name]
    temperature = base_temp + 1.5 * (2.0 * _smooth_unit_field(rng, shape, 10.0) - 1.0)

    obstacles = []
    for _ in range(g.n_obstacles):
        # Boxes sit at the road edge so they occlude road surface behind them.
        bx = rng.uniform(xs[0] + 10.0, xs[-1] - 10.0)
        by = g.y_center + rng.choice([-1.0, 1.0]) * (g.road_half_width - 0.5)
        s = g.obstacle_size
        obstacles.append(Box(lo=[bx, by - s / 2, 0.0], hi=[bx + s, by + s / 2, s]))

    return SceneSpec(geometry=g, road_mask=road, d_water=d_water, d_ice=d_ice,
                     d_snow=d_snow, albedo=albedo, temperature=temperature,
                     obstacles=obstacles, seed=int(seed))


# ---------------------------------------------------------------------------
# Ray casting

HIT_SKY = 0
HIT_GROUND = 1
HIT_BOX = 2  # HIT_BOX + i for obstacle i


def cast_rays(origin: np.ndarray, dirs_world: np.ndarray, scene: SceneSpec
              ) -> tuple[np.ndarray, np.ndarray]:
    """Intersect rays with the ground plane and the scene boxes.

    Returns ``(t, kind)``: ray parameters (inf when nothing is hit) and hit
    kinds (HIT_SKY / HIT_GROUND / HIT_BOX + index).  The world hit point is
    ``origin + t * dir``.
    """
    dirs = np.asarray(dirs_world, dtype=np.float64).reshape(-1, 3)
    o = np.asarray(origin, dtype=np.float64).reshape(3)
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    kind = np.full(n, HIT_SKY, dtype=np.int64)

    dz = dirs[:, 2]
    descending = dz < -1e-12
    t_ground = np.full(n, np.inf)
    t_ground[descending] = -o[2] / dz[descending]
    hit = descending & (t_ground > 1e-9)
    t_best[hit] = t_ground[hit]
    kind[hit] = HIT_GROUND

    for i, box in enumerate(scene.obstacles):
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = np.where(np.abs(dirs) > 1e-15, 1.0 / dirs, np.inf)
            t1 = (box.lo - o) * inv
            t2 = (box.hi - o) * inv
        # Zero-direction axes hit the slab iff the origin lies inside it.
        degenerate = np.abs(dirs) <= 1e-15
        inside = (o >= box.lo) & (o <= box.hi)
        t_lo = np.where(degenerate, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
        t_hi = np.where(degenerate, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
        t_near = t_lo.max(axis=1)
        t_far = t_hi.min(axis=1)
        ok = (t_near <= t_far) & (t_far > 1e-9)
        t_box = np.where(t_near > 1e-9, t_near, t_far)
        closer = ok & (t_box < t_best)
        t_best[closer] = t_box[closer]
        kind[closer] = HIT_BOX + i
    return t_best, kind


# ---------------------------------------------------------------------------
# Renderers


@dataclass(frozen=True)
class RenderParams:
    """Appearance constants tying scene layers to each sensor's response."""

    # RGB: visual mixing strengths per layer and flat colors for non-road hits
    water_rgb_strength: float = 1.0
    ice_rgb_strength: float = 0.35
    snow_rgb_strength: float = 1.0
    offroad_color: tuple[float, float, float] = (0.22, 0.26, 0.20)
    sky_color: tuple[float, float, float] = (0.55, 0.65, 0.80)
    obstacle_color: tuple[float, float, float] = (0.30, 0.28, 0.26)

    # Thermal: layer temperature offsets (degrees C) and raw-scale behavior
    water_temp_offset: float = -2.0
    ice_temp_offset: float = -4.0
    snow_temp_offset: float = -6.0
    obstacle_temp: float = 5.0
    sky_temp: float = -30.0
    thermal_noise_sd: float = 0.3
    thermal_gain_range: tuple[float, float] = (0.8, 1.25)
    thermal_bias_range: tuple[float, float] = (-40.0, 40.0)

    # Reflectance material constants (distance-normalized, unitless)
    refl_asphalt: float = 0.35
    refl_water: float = 0.10
    refl_ice: float = 0.22
    refl_snow: float = 0.75
    refl_background: float = 0.45
    refl_obstacle: float = 0.55
    refl_noise_sd: float = 0.02

    # Optical saturation thicknesses (mm): how much of a layer makes it look
    # fully covered.  Deliberately smaller than the grip model's mechanical
    # saturation (a 1 mm film already darkens, but does not hydroplane).
    tau_optical_water: float = 1.0
    tau_optical_ice: float = 0.5
    tau_optical_snow: float = 1.5

    # Reflectance scan pattern: camera-grid decimation and sweep duration
    scan_stride: int = 2
    scan_period: float = 0.1  # seconds, left-to-right column sweep


def _pixel_rays(intrinsics: CameraIntrinsics, cols=None, rows=None) -> np.ndarray:
    """Unit-depth camera-frame ray directions for a pixel grid."""
    if cols is None:
        cols = np.arange(intrinsics.width)
    if rows is None:
        rows = np.arange(intrinsics.height)
    uu, vv = np.meshgrid(cols, rows)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1).astype(np.float64)
    return backproject_pixels(uv, np.ones(uv.shape[0]), intrinsics)


def _layer_fractions(scene: SceneSpec, x, y, params: RenderParams
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dw, di, ds = scene.sample_layers(x, y)
    return (np.minimum(dw / params.tau_optical_water, 1.0),
            np.minimum(di / params.tau_optical_ice, 1.0),
            np.minimum(ds / params.tau_optical_snow, 1.0))


def render_rgb(scene: SceneSpec, cam_pose: Pose, intrinsics: CameraIntrinsics,
               illumination: float = 1.0, params: RenderParams | None = None
               ) -> np.ndarray:
    """Ray-cast an RGB frame: albedo modulated by the surface layers.

    Water darkens with a blue cast, ice adds a faint bright tint, snow
    whitens; off-road ground, obstacles, and sky are flat colors.  Purely
    deterministic in (scene, pose).
    """
    p = params or RenderParams()
    if cam_pose.trans[2] <= 0:
        raise InputError("camera must be above the ground plane")
    dirs = cam_pose.rotation.apply(_pixel_rays(intrinsics))
    t, kind = cast_rays(cam_pose.trans, dirs, scene)
    pts = cam_pose.trans + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs

    img = np.tile(np.asarray(p.sky_color), (dirs.shape[0], 1))
    img[kind >= HIT_BOX] = p.obstacle_color

    ground = kind == HIT_GROUND
    gx, gy = pts[ground, 0], pts[ground, 1]
    on_road = scene.road_at(gx, gy)
    iy, ix, _ = scene.cell_index(gx, gy)
    iy = np.clip(iy, 0, scene.albedo.shape[0] - 1)
    ix = np.clip(ix, 0, scene.albedo.shape[1] - 1)
    rgb = scene.albedo[iy, ix].copy()

    fw, fi, fs = _layer_fractions(scene, gx, gy, p)
    mw = np.clip(fw * p.water_rgb_strength, 0.0, 1.0)[:, None]
    mi = np.clip(fi * p.ice_rgb_strength, 0.0, 1.0)[:, None]
    ms = np.clip(fs * p.snow_rgb_strength, 0.0, 1.0)[:, None]
    rgb = rgb * (1.0 - 0.55 * mw) + mw * np.array([0.02, 0.03, 0.08])
    rgb = rgb * (1.0 - 0.30 * mi) + 0.30 * mi * np.array([0.55, 0.60, 0.70])
    rgb = rgb * (1.0 - ms) + ms * np.array([0.92, 0.93, 0.95])
    rgb[~on_road] = p.offroad_color

    img[ground] = rgb
    img = np.clip(img * illumination, 0.0, 1.0)
    return img.reshape(intrinsics.height, intrinsics.width, 3).astype(np.float32)


def render_road_mask(scene: SceneSpec, cam_pose: Pose,
                     intrinsics: CameraIntrinsics) -> np.ndarray:
    """Boolean image of pixels whose first hit is road surface."""
    dirs = cam_pose.rotation.apply(_pixel_rays(intrinsics))
    t, kind = cast_rays(cam_pose.trans, dirs, scene)
    pts = cam_pose.trans + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    mask = np.zeros(dirs.shape[0], dtype=bool)
    ground = kind == HIT_GROUND
    mask[ground] = scene.road_at(pts[ground, 0], pts[ground, 1])
    return mask.reshape(intrinsics.height, intrinsics.width)


def render_thermal(scene: SceneSpec, cam_pose: Pose,
                   intrinsics: CameraIntrinsics, rng: np.random.Generator,
                   params: RenderParams | None = None) -> np.ndarray:
    """Raw thermal frame: affine-scrambled surface temperature plus noise.

    The gain / bias pair is drawn per call to emulate an uncalibrated flux
    scale, so raw values are only meaningful after per-frame normalization.
    """
    p = params or RenderParams()
    if cam_pose.trans[2] <= 0:
        raise InputError("camera must be above the ground plane")
    dirs = cam_pose.rotation.apply(_pixel_rays(intrinsics))
    t, kind = cast_rays(cam_pose.trans, dirs, scene)
    pts = cam_pose.trans + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs

    temp = np.full(dirs.shape[0], p.sky_temp)
    temp[kind >= HIT_BOX] = p.obstacle_temp
    ground = kind == HIT_GROUND
    gx, gy = pts[ground, 0], pts[ground, 1]
    iy, ix, _ = scene.cell_index(gx, gy)
    iy = np.clip(iy, 0, scene.temperature.shape[0] - 1)
    ix = np.clip(ix, 0, scene.temperature.shape[1] - 1)
    fw, fi, fs = _layer_fractions(scene, gx, gy, p)
    temp[ground] = (scene.temperature[iy, ix]
                    + fw * p.water_temp_offset
                    + fi * p.ice_temp_offset
                    + fs * p.snow_temp_offset)

    gain = rng.uniform(*p.thermal_gain_range)
    bias = rng.uniform(*p.thermal_bias_range)
    raw = gain * temp + bias + p.thermal_noise_sd * rng.standard_normal(temp.shape)
    return raw.reshape(intrinsics.height, intrinsics.width).astype(np.float32)


@dataclass
class ReflectanceScan:
    """One sweep of the reflectance scanner, sensor-frame points.

    Points are expressed in the sensor frame at their own capture time and
    concatenated as if the sensor had been rigid, which is exactly what
    motion correction undoes.
    """

    points: np.ndarray       # (N, 3) sensor frame, meters
    reflectance: np.ndarray  # (N,) in [0, 1], distance-normalized
    timestamps: np.ndarray   # (N,) seconds, absolute

    def __post_init__(self):
        if not (len(self.points) == len(self.reflectance) == len(self.timestamps)):
            raise ValueError("scan arrays must have equal length")


def render_reflectance(scene: SceneSpec, lidar_pose: Pose,
                       intrinsics: CameraIntrinsics,
                       rng: np.random.Generator,
                       params: RenderParams | None = None,
                       t0: float = 0.0,
                       traj: Trajectory | None = None,
                       sensor_extrinsic: Pose | None = None) -> ReflectanceScan:
    """Sweep a decimated camera-grid scan pattern across the scene.

    ``intrinsics`` shapes the scan pattern: rays go through every
    ``scan_stride``-th pixel of the reference grid, columns swept left to
    right over ``scan_period`` seconds.  Reflectance is the material value of
    the top layer blend plus noise; values are already range-normalized.
    With ``traj`` given, each column is cast from the sensor pose at its own
    capture time (``lidar_pose`` is then ignored in favor of
    ``traj`` + ``sensor_extrinsic``), producing a motion-distorted scan.
    """
    p = params or RenderParams()
    cols = np.arange(0, intrinsics.width, p.scan_stride)
    rows = np.arange(0, intrinsics.height, p.scan_stride)
    col_times = t0 + p.scan_period * np.arange(cols.size) / cols.size

    all_points, all_refl, all_times = [], [], []
    for j, (col, tj) in enumerate(zip(cols, col_times)):
        if traj is not None:
            if sensor_extrinsic is None:
                raise InputError("sensor_extrinsic required with a trajectory")
            pose_j = interpolate_pose(traj, tj).compose(sensor_extrinsic)
        else:
            pose_j = lidar_pose
        dirs_cam = _pixel_rays(intrinsics, cols=np.array([col]), rows=rows)
        dirs_world = pose_j.rotation.apply(dirs_cam)
        t, kind = cast_rays(pose_j.trans, dirs_world, scene)
        hit = np.isfinite(t)
        pts_world = pose_j.trans + t[hit, None] * dirs_world[hit]

        refl = np.full(hit.sum(), p.refl_background)
        refl[kind[hit] >= HIT_BOX] = p.refl_obstacle
        ground = kind[hit] == HIT_GROUND
        gx, gy = pts_world[ground, 0], pts_world[ground, 1]
        on_road = scene.road_at(gx, gy)
        fw, fi, fs = _layer_fractions(scene, gx, gy, p)
        r = np.full(ground.sum(), p.refl_asphalt)
        r = r * (1.0 - fw) + p.refl_water * fw
        r = r * (1.0 - fi) + p.refl_ice * fi
        r = r * (1.0 - fs) + p.refl_snow * fs
        r[~on_road] = p.refl_background
        refl[ground] = r

        all_points.append(dirs_cam[hit] * t[hit, None])
        all_refl.append(refl)
        all_times.append(np.full(hit.sum(), tj))

    points = np.concatenate(all_points) if all_points else np.zeros((0, 3))
    refl = np.concatenate(all_refl) if all_refl else np.zeros(0)
    times = np.concatenate(all_times) if all_times else np.zeros(0)
    refl = np.clip(refl + p.refl_noise_sd * rng.standard_normal(refl.shape), 0.0, 1.0)
    return ReflectanceScan(points=points, reflectance=refl, timestamps=times)


# ---------------------------------------------------------------------------
# Sensor rig and drive simulation


@dataclass(frozen=True)
class SensorRig:
    """Intrinsics and body-frame mounts of every simulated sensor."""

    rgb_intrinsics: CameraIntrinsics = CameraIntrinsics(
        fx=80.0, fy=80.0, cx=48.0, cy=32.0, width=96, height=64)
    thermal_intrinsics: CameraIntrinsics = CameraIntrinsics(
        fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)
    cam_height: float = 1.6
    cam_pitch_down: float = float(np.deg2rad(12.0))
    thermal_yaw: float = float(np.deg2rad(23.0))
    lidar_height: float = 1.8
    rws_offset_x: float = -1.0

    @property
    def cam_mount(self) -> Pose:
        return camera_mount_pose([0.2, 0.0, self.cam_height],
                                 pitch_down=self.cam_pitch_down)

    @property
    def thermal_left_mount(self) -> Pose:
        return camera_mount_pose([0.2, 0.3, self.cam_height - 0.1],
                                 yaw=self.thermal_yaw,
                                 pitch_down=self.cam_pitch_down)

    @property
    def thermal_right_mount(self) -> Pose:
        return camera_mount_pose([0.2, -0.3, self.cam_height - 0.1],
                                 yaw=-self.thermal_yaw,
                                 pitch_down=self.cam_pitch_down)

    @property
    def lidar_mount(self) -> Pose:
        return camera_mount_pose([0.0, 0.0, self.lidar_height],
                                 pitch_down=self.cam_pitch_down)

    @property
    def rws_mount(self) -> Pose:
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]),
                    np.array([self.rws_offset_x, 0.0, 0.0]))


@dataclass
class FrameBundle:
    """Raw sensor data captured around one reference-camera trigger."""

    frame_time: float
    rgb: np.ndarray            # (H, W, 3) float32 in [0, 1]
    thermal_left: np.ndarray   # (h, w) float32, raw scale
    thermal_right: np.ndarray  # (h, w) float32, raw scale
    scan: ReflectanceScan
    road_mask: np.ndarray      # (H, W) bool, reference-camera view


@dataclass
class DriveRecording:
    """Everything one simulated drive produced."""

    frames: list[FrameBundle]
    rws_trace: list[RwsMeasurement]
    trajectory: Trajectory
    rig: SensorRig
    frame_rate: float = 2.0
    rws_rate: float = 40.0

    def __post_init__(self):
        if len(self.frames) >= 2:
            gaps = np.diff([f.frame_time for f in self.frames])
            if not np.allclose(gaps, 1.0 / self.frame_rate, atol=1e-9):
                raise ValueError("frame times must be uniform at the frame rate")
        if len(self.rws_trace) >= 2:
            gaps = np.diff([m.timestamp for m in self.rws_trace])
            if not np.allclose(gaps, 1.0 / self.rws_rate, atol=1e-9):
                raise ValueError("rws times must be uniform at the rws rate")


def make_straight_trajectory(x_start: float, y: float, speed: float,
                             duration: float, t0: float = 0.0,
                             knot_dt: float = 0.5) -> Trajectory:
    """Constant-velocity straight drive along +x at the given lateral offset."""
    n = int(round(duration / knot_dt)) + 1
    times = t0 + knot_dt * np.arange(n)
    poses = [Pose(np.array([0.0, 0.0, 0.0, 1.0]),
                  np.array([x_start + speed * (t - t0), y, 0.0]), float(t))
             for t in times]
    return Trajectory(poses)


def make_weaving_trajectory(x_start: float, y: float, speed: float,
                            duration: float, amplitude: float,
                            period: float = 8.0, t0: float = 0.0,
                            knot_dt: float = 0.5) -> Trajectory:
    """Drive along +x while weaving sinusoidally about the lane centre.

    The body offset is ``y + amplitude * sin(2 pi (t - t0) / period)`` with
    the heading kept along +x, so the sensor footprint sweeps laterally
    across the lane instead of tracing a single line.  ``amplitude`` 0
    reproduces :func:`make_straight_trajectory` exactly.
    """
    if period <= 0:
        raise InputError("weave period must be positive")
    n = int(round(duration / knot_dt)) + 1
    times = t0 + knot_dt * np.arange(n)
    poses = [Pose(np.array([0.0, 0.0, 0.0, 1.0]),
                  np.array([x_start + speed * (t - t0),
                            y + amplitude * np.sin(2.0 * np.pi * (t - t0) / period),
                            0.0]), float(t))
             for t in times]
    return Trajectory(poses)


def simulate_drive(scene: SceneSpec, path: Trajectory,
                   profile: ConditionProfile, seed: int,
                   rig: SensorRig | None = None,
                   params: RenderParams | None = None,
                   grip_params: GripModelParams | None = None,
                   frame_rate: float = 2.0, rws_rate: float = 40.0,
                   label_noise_sd: float = 0.02) -> DriveRecording:
    """Drive the rig through the scene, recording all sensors and the RWS.

    Frames are captured at ``frame_rate`` (reflectance sweeps start at each
    frame time); the road-weather sensor samples the grip oracle at
    ``rws_rate`` along its footprint track, with Gaussian label noise of
    ``label_noise_sd`` clipped back to the valid grip range.
    """
    rig = rig or SensorRig()
    params = params or RenderParams()
    gp = grip_params or GripModelParams()
    if not 0.0 <= label_noise_sd <= 0.1:
        raise InputError("label noise sd must be within the sensor accuracy bound 0.1")

    t_start, t_end = path.start_time, path.end_time
    body_xy = path.translations_at(
        np.linspace(t_start, t_end, 64))[:, :2]
    if not scene.contains(body_xy[:, 0], body_xy[:, 1]).all():
        raise InputError("trajectory leaves the scene bounds")

    duration = t_end - t_start
    n_frames = int(np.floor(duration * frame_rate - 1e-9)) + 1
    frame_times = t_start + np.arange(n_frames) / frame_rate
    # The reflectance sweep runs past the frame trigger; keep it inside the span.
    frame_times = frame_times[frame_times + params.scan_period <= t_end + 1e-9]

    frames = []
    for k, ft in enumerate(frame_times):
        rng = np.random.default_rng((int(seed), int(k)))
        body = interpolate_pose(path, float(ft))
        cam_world = body.compose(rig.cam_mount)
        rgb = render_rgb(scene, cam_world, rig.rgb_intrinsics,
                         illumination=profile.illumination, params=params)
        road_mask = render_road_mask(scene, cam_world, rig.rgb_intrinsics)
        th_l = render_thermal(scene, body.compose(rig.thermal_left_mount),
                              rig.thermal_intrinsics, rng, params)
        th_r = render_thermal(scene, body.compose(rig.thermal_right_mount),
                              rig.thermal_intrinsics, rng, params)
        scan = render_reflectance(scene, body.compose(rig.lidar_mount),
                                  rig.rgb_intrinsics, rng, params,
                                  t0=float(ft), traj=path,
                                  sensor_extrinsic=rig.lidar_mount)
        frames.append(FrameBundle(frame_time=float(ft), rgb=rgb,
                                  thermal_left=th_l, thermal_right=th_r,
                                  scan=scan, road_mask=road_mask))

    n_rws = int(np.floor(duration * rws_rate - 1e-9)) + 1
    rws_times = t_start + np.arange(n_rws) / rws_rate
    foot_body = rig.rws_mount.trans
    world = (path.rotations_at(rws_times).apply(
        np.broadcast_to(foot_body, (rws_times.size, 3)))
        + path.translations_at(rws_times))
    dw, di, ds = scene.sample_layers(world[:, 0], world[:, 1])
    grip = grip_oracle(dw, di, ds, gp)
    rws_rng = np.random.default_rng((int(seed), _RWS_STREAM))
    if label_noise_sd > 0:
        grip = np.clip(grip + label_noise_sd * rws_rng.standard_normal(grip.shape),
                       0.0, 1.0)
    trace = [RwsMeasurement(timestamp=float(t), grip=float(g), d_water=float(w),
                            d_ice=float(i), d_snow=float(s))
             for t, g, w, i, s in zip(rws_times, grip, dw, di, ds)]
    return DriveRecording(frames=frames, rws_trace=trace, trajectory=path,
                          rig=rig, frame_rate=frame_rate, rws_rate=rws_rate)
