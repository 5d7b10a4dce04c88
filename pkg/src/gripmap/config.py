"""Run configuration: one INI file drives every command.

The file uses flat ``key = value`` pairs grouped in sections; every
downstream dataclass (scene geometry, sensor rig, render constants, model
and training configs) is constructed eagerly at parse time, so a bad value
fails the run before any work starts.  Unknown sections or keys are
rejected to catch typos.  Command-line flags override file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ModelConfig
from .synth import (
    PROFILE_NAMES,
    ConditionProfile,
    RenderParams,
    SceneGeometry,
    SensorRig,
)
from .geometry import CameraIntrinsics
from .training import TrainConfig


@dataclass(frozen=True)
class SynthPlan:
    """How many drives to simulate and how they are laid out in the world."""

    n_drives: int
    profiles: tuple[str, ...]
    seed: int = 0
    duration: float = 20.0
    speed: float = 10.0
    corridor_spacing: float = 1000.0
    x_start: float = 0.0
    label_noise_sd: float = 0.02
    frame_rate: float = 2.0
    rws_rate: float = 40.0
    intensity: float = 1.0
    illumination: float = 1.0
    x_margin_before: float = 10.0
    x_margin_after: float = 50.0
    weave_amplitude: float = 0.0
    weave_period: float = 8.0

    def __post_init__(self):
        if self.n_drives < 1:
            raise ConfigError("synth.n_drives must be at least 1")
        if self.weave_amplitude < 0 or self.weave_period <= 0:
            raise ConfigError(
                "synth.weave_amplitude must be non-negative and weave_period positive")
        if len(self.profiles) == 0:
            raise ConfigError("synth.profiles must list at least one profile")
        for p in self.profiles:
            if p not in PROFILE_NAMES:
                raise ConfigError(
                    f"unknown profile {p!r} in synth.profiles; choose from {PROFILE_NAMES}")
        if self.duration <= 0 or self.speed < 0:
            raise ConfigError("synth.duration must be positive and speed non-negative")
        if self.frame_rate <= 0 or self.rws_rate <= 0:
            raise ConfigError("synth rates must be positive")

    def profile_for_drive(self, d: int) -> ConditionProfile:
        return ConditionProfile(
            name=self.profiles[d % len(self.profiles)],
            intensity=self.intensity,
            illumination=self.illumination,
        )

    def drive_y(self, d: int) -> float:
        return d * self.corridor_spacing

    def drive_seed(self, d: int) -> int:
        return self.seed * 100000 + d


@dataclass(frozen=True)
class SplitPlan:
    """Geofence circles and their held-out split labels."""

    centers: tuple[tuple[float, float], ...]
    radius: float = 200.0
    buffer: float = 55.0
    assignments: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.centers) == 0:
            raise ConfigError("split.centers must list at least one circle")
        labels = self.assignments or tuple("val" for _ in self.centers)
        object.__setattr__(self, "assignments", labels)
        if len(labels) != len(self.centers):
            raise ConfigError("split.assignments must match split.centers in length")
        for lab in labels:
            if lab not in ("val", "test"):
                raise ConfigError(f"split assignment must be val or test, got {lab!r}")
        if self.radius <= 0 or self.buffer < 0:
            raise ConfigError("split.radius must be positive and buffer non-negative")


@dataclass(frozen=True)
class EvalOptions:
    """Which sets to score and how exports are sampled."""

    sets: tuple[str, ...] = ("val", "test")
    scatter_n: int = 50000
    scatter_seed: int = 0
    scatter_replace: bool = False
    seeds: tuple[int, ...] = (0, 1, 2)
    subsets: tuple[tuple[str, ...], ...] | None = None

    def __post_init__(self):
        if len(self.sets) == 0:
            raise ConfigError("eval.sets must list at least one split")
        for s in self.sets:
            if s not in ("train", "val", "test"):
                raise ConfigError(f"eval set must be train, val or test, got {s!r}")
        if self.scatter_n < 1:
            raise ConfigError("eval.scatter_n must be positive")
        if len(self.seeds) == 0:
            raise ConfigError("eval.seeds must list at least one seed")


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs, parsed and validated."""

    root: Path
    out_dir: Path
    synth: SynthPlan
    scene: dict
    rig: SensorRig
    render: RenderParams
    split: SplitPlan | None
    model: ModelConfig
    train: TrainConfig
    eval: EvalOptions

    def geometry_for_drive(self, d: int) -> SceneGeometry:
        plan = self.synth
        return SceneGeometry(
            x_min=plan.x_start - plan.x_margin_before,
            x_max=plan.x_start + plan.speed * plan.duration + plan.x_margin_after,
            y_center=plan.drive_y(d),
            **self.scene,
        )


_SECTION_KEYS = {
    "dataset": {"root", "out_dir"},
    "synth": {
        "n_drives", "profiles", "seed", "duration", "speed", "corridor_spacing",
        "x_start", "label_noise_sd", "frame_rate", "rws_rate", "intensity",
        "illumination", "x_margin_before", "x_margin_after",
        "weave_amplitude", "weave_period",
    },
    "scene": {
        "half_width", "cell_size", "road_half_width", "track_offset",
        "track_half_width", "n_obstacles", "obstacle_size",
    },
    "rig": {
        "rgb_width", "rgb_height", "rgb_f", "thermal_width", "thermal_height",
        "thermal_f", "cam_height", "cam_pitch_deg", "thermal_yaw_deg",
        "lidar_height", "rws_offset_x",
    },
    "render": {
        "water_rgb_strength", "ice_rgb_strength", "snow_rgb_strength",
        "water_temp_offset", "ice_temp_offset", "snow_temp_offset",
        "obstacle_temp", "sky_temp", "thermal_noise_sd",
        "refl_asphalt", "refl_water", "refl_ice", "refl_snow",
        "refl_background", "refl_obstacle", "refl_noise_sd",
        "tau_optical_water", "tau_optical_ice", "tau_optical_snow",
    },
    "split": {"centers", "radius", "buffer", "assignments"},
    "model": {
        "modalities", "encoder_widths", "num_scales", "blocks_per_stage",
        "decoder_width", "dropout_final",
    },
    "train": {
        "lambda_aux", "epochs", "batch_size", "learning_rate", "beta1", "beta2",
        "eps", "p_scale_rot", "p_hflip", "p_blur", "p_color_jitter", "seed",
    },
    "eval": {
        "sets", "scatter_n", "scatter_seed", "scatter_replace", "seeds", "subsets",
    },
}

_SCENE_INT_KEYS = {"n_obstacles"}


class _Parsed:
    """Typed access to one parsed INI file with presence tracking."""

    def __init__(self, path: Path):
        cp = configparser.ConfigParser(interpolation=None)
        read = cp.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in cp.sections():
            if section not in _SECTION_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
            for key in cp[section]:
                if key not in _SECTION_KEYS[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
        self.cp = cp

    def has(self, section: str, key: str) -> bool:
        return self.cp.has_option(section, key)

    def raw(self, section: str, key: str) -> str:
        if not self.has(section, key):
            raise ConfigError(f"missing config key {section}.{key}")
        return self.cp.get(section, key).strip()

    def get(self, section: str, key: str, default=None, required: bool = False):
        if not self.has(section, key):
            if required:
                raise ConfigError(f"missing config key {section}.{key}")
            return default
        return self.cp.get(section, key).strip()

    def get_float(self, section: str, key: str, default=None, required=False):
        value = self.get(section, key, required=required)
        if value is None:
            return default
        try:
            return float(value)
        except ValueError:
            raise ConfigError(f"config key {section}.{key} must be a number, got {value!r}")

    def get_int(self, section: str, key: str, default=None, required=False):
        value = self.get(section, key, required=required)
        if value is None:
            return default
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"config key {section}.{key} must be an integer, got {value!r}")

    def get_bool(self, section: str, key: str, default=False):
        value = self.get(section, key)
        if value is None:
            return default
        lowered = value.lower()
        if lowered in ("true", "yes", "1", "on"):
            return True
        if lowered in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"config key {section}.{key} must be a boolean, got {value!r}")


def _split_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _parse_centers(text: str) -> tuple[tuple[float, float], ...]:
    centers = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        coords = _split_list(part)
        if len(coords) != 2:
            raise ConfigError(f"split center {part!r} must be x,y")
        try:
            centers.append((float(coords[0]), float(coords[1])))
        except ValueError:
            raise ConfigError(f"split center {part!r} must be numeric")
    return tuple(centers)


def _parse_subsets(text: str) -> tuple[tuple[str, ...], ...]:
    subsets = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        subsets.append(tuple(m.strip() for m in part.split("+") if m.strip()))
    return tuple(subsets)


def _build_rig(p: _Parsed) -> SensorRig:
    rgb_w = p.get_int("rig", "rgb_width", 96)
    rgb_h = p.get_int("rig", "rgb_height", 64)
    rgb_f = p.get_float("rig", "rgb_f", 80.0)
    th_w = p.get_int("rig", "thermal_width", 64)
    th_h = p.get_int("rig", "thermal_height", 48)
    th_f = p.get_float("rig", "thermal_f", 60.0)
    return SensorRig(
        rgb_intrinsics=CameraIntrinsics(
            fx=rgb_f, fy=rgb_f, cx=rgb_w / 2.0, cy=rgb_h / 2.0,
            width=rgb_w, height=rgb_h),
        thermal_intrinsics=CameraIntrinsics(
            fx=th_f, fy=th_f, cx=th_w / 2.0, cy=th_h / 2.0,
            width=th_w, height=th_h),
        cam_height=p.get_float("rig", "cam_height", 1.6),
        cam_pitch_down=float(np.deg2rad(p.get_float("rig", "cam_pitch_deg", 12.0))),
        thermal_yaw=float(np.deg2rad(p.get_float("rig", "thermal_yaw_deg", 23.0))),
        lidar_height=p.get_float("rig", "lidar_height", 1.8),
        rws_offset_x=p.get_float("rig", "rws_offset_x", -1.0),
    )


def _build_render(p: _Parsed) -> RenderParams:
    overrides = {}
    if p.cp.has_section("render"):
        for key in p.cp["render"]:
            overrides[key] = p.get_float("render", key, required=True)
    return replace(RenderParams(), **overrides)


def _build_scene_overrides(p: _Parsed) -> dict:
    overrides = {}
    if p.cp.has_section("scene"):
        for key in p.cp["scene"]:
            if key in _SCENE_INT_KEYS:
                overrides[key] = p.get_int("scene", key, required=True)
            else:
                overrides[key] = p.get_float("scene", key, required=True)
    return overrides


def load_config(
    path: Path | str,
    seed: int | None = None,
    modalities: tuple[str, ...] | None = None,
) -> RunConfig:
    """Parse and validate a run configuration file.

    ``seed`` overrides the synth, train, and scatter seeds together;
    ``modalities`` overrides the model's input set.  Both mirror the
    corresponding command-line flags.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    p = _Parsed(path)

    root = Path(p.raw("dataset", "root"))
    out_default = root / "runs"
    out_dir = Path(p.get("dataset", "out_dir", str(out_default)))

    synth = SynthPlan(
        n_drives=p.get_int("synth", "n_drives", required=True),
        profiles=tuple(_split_list(p.raw("synth", "profiles"))),
        seed=p.get_int("synth", "seed", 0),
        duration=p.get_float("synth", "duration", 20.0),
        speed=p.get_float("synth", "speed", 10.0),
        corridor_spacing=p.get_float("synth", "corridor_spacing", 1000.0),
        x_start=p.get_float("synth", "x_start", 0.0),
        label_noise_sd=p.get_float("synth", "label_noise_sd", 0.02),
        frame_rate=p.get_float("synth", "frame_rate", 2.0),
        rws_rate=p.get_float("synth", "rws_rate", 40.0),
        intensity=p.get_float("synth", "intensity", 1.0),
        illumination=p.get_float("synth", "illumination", 1.0),
        x_margin_before=p.get_float("synth", "x_margin_before", 10.0),
        x_margin_after=p.get_float("synth", "x_margin_after", 50.0),
        weave_amplitude=p.get_float("synth", "weave_amplitude", 0.0),
        weave_period=p.get_float("synth", "weave_period", 8.0),
    )

    split = None
    if p.cp.has_section("split"):
        assignments = p.get("split", "assignments")
        split = SplitPlan(
            centers=_parse_centers(p.raw("split", "centers")),
            radius=p.get_float("split", "radius", 200.0),
            buffer=p.get_float("split", "buffer", 55.0),
            assignments=tuple(_split_list(assignments)) if assignments else (),
        )

    model = ModelConfig(
        modalities=tuple(_split_list(p.get("model", "modalities", "rgb,thermal,reflectance"))),
        encoder_widths=tuple(
            int(w) for w in _split_list(p.get("model", "encoder_widths", "16,32,64,128"))),
        num_scales=p.get_int("model", "num_scales", 4),
        blocks_per_stage=p.get_int("model", "blocks_per_stage", 1),
        decoder_width=p.get_int("model", "decoder_width", 64),
        dropout_final=p.get_float("model", "dropout_final", 0.20),
    )

    train = TrainConfig(
        lambda_aux=p.get_float("train", "lambda_aux", 1.0),
        epochs=p.get_int("train", "epochs", 38),
        batch_size=p.get_int("train", "batch_size", 32),
        learning_rate=p.get_float("train", "learning_rate", 1e-3),
        beta1=p.get_float("train", "beta1", 0.9),
        beta2=p.get_float("train", "beta2", 0.999),
        eps=p.get_float("train", "eps", 1e-8),
        p_scale_rot=p.get_float("train", "p_scale_rot", 0.30),
        p_hflip=p.get_float("train", "p_hflip", 0.50),
        p_blur=p.get_float("train", "p_blur", 0.30),
        p_color_jitter=p.get_float("train", "p_color_jitter", 0.30),
        seed=p.get_int("train", "seed", 0),
    )

    subsets_raw = p.get("eval", "subsets")
    eval_opts = EvalOptions(
        sets=tuple(_split_list(p.get("eval", "sets", "val,test"))),
        scatter_n=p.get_int("eval", "scatter_n", 50000),
        scatter_seed=p.get_int("eval", "scatter_seed", 0),
        scatter_replace=p.get_bool("eval", "scatter_replace", False),
        seeds=tuple(int(s) for s in _split_list(p.get("eval", "seeds", "0,1,2"))),
        subsets=_parse_subsets(subsets_raw) if subsets_raw else None,
    )

    if seed is not None:
        synth = replace(synth, seed=int(seed))
        train = replace(train, seed=int(seed))
        eval_opts = replace(eval_opts, scatter_seed=int(seed))
    if modalities is not None:
        model = replace(model, modalities=tuple(modalities))

    return RunConfig(
        root=root,
        out_dir=out_dir,
        synth=synth,
        scene=_build_scene_overrides(p),
        rig=_build_rig(p),
        render=_build_render(p),
        split=split,
        model=model,
        train=train,
        eval=eval_opts,
    )
