"""Run configuration: one flat key-value text file determines a whole run.

Defaults reproduce the reference rig: camera 1.0 m above the footprint,
pitched 47 degrees down, 512x384 images, ground-pose sigmas of 0.10 m and
10 degrees, keyframes every 0.25 m or 2.5 degrees, 600 features per frame,
and a 10-match localization-failure threshold.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

import numpy as np

from . import se3
from .errors import ConfigError
from .estimation import GaussNewtonConfig
from .ground import GroundModel
from .matching import MatchConfig, RansacConfig
from .repeat import RepeatConfig
from .se3 import CameraIntrinsics, Pose, PoseGaussian
from .sim import NoiseConfig, Terrain, TerrainComponent
from .teach import KeyframeThresholds


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    pipeline_mode: str = "mono"  # mono | perfect_depth
    baseline_sigma: float = 0.01

    rig_camera_height: float = 1.0
    rig_pitch_deg: float = 47.0
    rig_f_u: float = 400.0
    rig_f_v: float = 400.0
    rig_c_u: float = 256.0
    rig_c_v: float = 192.0
    rig_width: int = 512
    rig_height: int = 384

    ground_sigma_trans: float = 0.10
    ground_sigma_rot_deg: float = 10.0
    ground_max_range: float = 10.0

    features_budget: int = 600
    features_descriptor_dim: int = 16
    features_sigma_base: float = 0.5

    teach_keyframe_translation: float = 0.25
    teach_keyframe_rotation_deg: float = 2.5
    teach_speed: float = 0.6

    sim_frame_rate: float = 15.0
    sim_landmark_density: float = 170.0
    sim_strip_halfwidth: float = 4.0
    sim_turn_rate_deg: float = 30.0

    terrain_kind: str = "plane"  # plane | bumps | composite
    terrain_bump_amplitude: float = 0.15
    terrain_bump_wavelength: float = 6.0
    terrain_hill_amplitude: float = 0.8
    terrain_hill_x: float = 15.0
    terrain_hill_y: float = 0.0
    terrain_hill_radius: float = 6.0
    terrain_valley_amplitude: float = -0.6
    terrain_valley_x: float = 35.0
    terrain_valley_y: float = 0.0
    terrain_valley_radius: float = 7.0

    noise_pixel_scale: float = 1.0
    noise_dropout: float = 0.10
    noise_corruption: float = 0.05
    noise_swap: float = 0.05
    noise_region_x0: float = 0.0
    noise_region_x1: float = 0.0
    noise_region_rate: float = 0.0

    script_waypoints: tuple[tuple[float, float], ...] = ((0.0, 0.0), (100.0, 0.0))

    repeat_speed: float = 0.6
    repeat_window_size: int = 5
    repeat_halt_distance: float = 2.0
    repeat_min_matches: int = 10
    repeat_start_vertex: int = 0
    repeat_destination: int = -1
    repeat_k_lateral: float = 1.7
    repeat_k_heading: float = 2.0
    repeat_max_yaw_rate: float = 1.5
    repeat_intervention_frames: int = 15
    repeat_give_up_distance: float = 15.0
    repeat_init_lateral_offset: float = 0.0

    ransac_max_iterations: int = 500
    ransac_inlier_chi2: float = 11.34
    ransac_confidence: float = 0.99

    match_gate_chi2: float = 11.34
    match_max_descriptor_distance: float = 0.35

    gn_max_iterations: int = 20
    gn_tol: float = 1e-8
    gn_damping: float = 1e-6

    # --- derived objects -------------------------------------------------

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            self.rig_f_u, self.rig_f_v, self.rig_c_u, self.rig_c_v, self.rig_width, self.rig_height
        )

    def t_cv(self) -> Pose:
        a = np.radians(self.rig_pitch_deg)
        r_cv = np.array(
            [
                [0.0, -1.0, 0.0],
                [-np.sin(a), 0.0, -np.cos(a)],
                [np.cos(a), 0.0, -np.sin(a)],
            ]
        )
        return Pose(r_cv, -r_cv @ np.array([0.0, 0.0, self.rig_camera_height]))

    def ground_model(self) -> GroundModel:
        sr = np.radians(self.ground_sigma_rot_deg)
        cov = np.diag([self.ground_sigma_trans**2] * 3 + [sr**2] * 3)
        return GroundModel(
            self.t_cv(), PoseGaussian(se3.identity_pose(), cov), self.ground_max_range
        )

    def terrain(self) -> Terrain:
        if self.terrain_kind == "plane":
            return Terrain.plane()
        if self.terrain_kind == "bumps":
            return Terrain.bumps(self.terrain_bump_amplitude, self.terrain_bump_wavelength)
        if self.terrain_kind == "composite":
            return Terrain.composite(
                [
                    TerrainComponent(
                        "bumps", self.terrain_bump_amplitude, self.terrain_bump_wavelength
                    ),
                    TerrainComponent(
                        "hill",
                        self.terrain_hill_amplitude,
                        center=(self.terrain_hill_x, self.terrain_hill_y),
                        radius=self.terrain_hill_radius,
                    ),
                    TerrainComponent(
                        "hill",
                        self.terrain_valley_amplitude,
                        center=(self.terrain_valley_x, self.terrain_valley_y),
                        radius=self.terrain_valley_radius,
                    ),
                ]
            )
        raise ConfigError(f"unknown terrain kind {self.terrain_kind!r}", "terrain.kind")

    def noise(self) -> NoiseConfig:
        region = None
        if self.noise_region_rate > 0.0:
            region = (self.noise_region_x0, self.noise_region_x1, self.noise_region_rate)
        return NoiseConfig(
            pixel_sigma_base=self.features_sigma_base,
            pixel_noise_scale=self.noise_pixel_scale,
            dropout=self.noise_dropout,
            corruption=self.noise_corruption,
            swap=self.noise_swap,
            dropout_region=region,
            seed=self.seed,
        )

    def thresholds(self) -> KeyframeThresholds:
        return KeyframeThresholds(
            self.teach_keyframe_translation, np.radians(self.teach_keyframe_rotation_deg)
        )

    def match_config(self) -> MatchConfig:
        return MatchConfig(self.match_gate_chi2, self.match_max_descriptor_distance)

    def ransac_config(self) -> RansacConfig:
        return RansacConfig(
            max_iterations=self.ransac_max_iterations,
            inlier_chi2=self.ransac_inlier_chi2,
            min_inliers=self.repeat_min_matches,
            confidence=self.ransac_confidence,
            seed=self.seed,
        )

    def gn_config(self) -> GaussNewtonConfig:
        return GaussNewtonConfig(self.gn_max_iterations, self.gn_tol, self.gn_damping)

    def repeat_config(self) -> RepeatConfig:
        return RepeatConfig(
            self.repeat_window_size, self.repeat_halt_distance, self.repeat_min_matches
        )

    def field_bounds(self) -> tuple[float, float, float, float]:
        wps = np.array(self.script_waypoints)
        m = self.sim_strip_halfwidth
        return (
            float(wps[:, 0].min() - m),
            float(wps[:, 0].max() + m),
            float(wps[:, 1].min() - m),
            float(wps[:, 1].max() + m),
        )

    def rig_fingerprint(self) -> str:
        keys = [
            self.rig_camera_height,
            self.rig_pitch_deg,
            self.rig_f_u,
            self.rig_f_v,
            self.rig_c_u,
            self.rig_c_v,
            self.rig_width,
            self.rig_height,
            self.ground_sigma_trans,
            self.ground_sigma_rot_deg,
            self.ground_max_range,
        ]
        return hashlib.sha256(repr(keys).encode()).hexdigest()[:16]


_KEY_OF_FIELD = {f.name: f.name.replace("_", ".", 1) for f in fields(RunConfig)}
_KEY_OF_FIELD["seed"] = "seed"
_FIELD_OF_KEY = {v: k for k, v in _KEY_OF_FIELD.items()}


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return "; ".join(f"{x}, {y}" for x, y in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{_KEY_OF_FIELD[f.name]} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def _parse_waypoints(text: str, key: str):
    pairs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 2:
            raise ConfigError(f"waypoint {chunk!r} is not 'x, y'", key)
        try:
            pairs.append((float(parts[0]), float(parts[1])))
        except ValueError as exc:
            raise ConfigError(f"waypoint {chunk!r} is not numeric", key) from exc
    if len(pairs) < 2:
        raise ConfigError("need at least two waypoints", key)
    return tuple(pairs)


def parse_config(text: str) -> RunConfig:
    """Parse the flat key = value format; '#' starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", raw.strip())
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_OF_KEY:
            raise ConfigError("unknown configuration key", key)
        name = _FIELD_OF_KEY[key]
        ftype = RunConfig.__dataclass_fields__[name].type
        try:
            if name == "script_waypoints":
                values[name] = _parse_waypoints(value, key)
            elif ftype == "int":
                values[name] = int(value)
            elif ftype == "float":
                values[name] = float(value)
            else:
                values[name] = value
        except ValueError as exc:
            raise ConfigError(f"cannot parse {value!r} as {ftype}", key) from exc
    try:
        config = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    positive = [
        ("rig.camera_height", config.rig_camera_height),
        ("ground.sigma_trans", config.ground_sigma_trans),
        ("ground.sigma_rot_deg", config.ground_sigma_rot_deg),
        ("ground.max_range", config.ground_max_range),
        ("features.budget", config.features_budget),
        ("teach.keyframe_translation", config.teach_keyframe_translation),
        ("teach.keyframe_rotation_deg", config.teach_keyframe_rotation_deg),
        ("teach.speed", config.teach_speed),
        ("sim.frame_rate", config.sim_frame_rate),
        ("sim.landmark_density", config.sim_landmark_density),
        ("repeat.speed", config.repeat_speed),
        ("repeat.halt_distance", config.repeat_halt_distance),
        ("repeat.min_matches", config.repeat_min_matches),
    ]
    for key, value in positive:
        if value <= 0:
            raise ConfigError("must be positive", key)
    if config.pipeline_mode not in ("mono", "perfect_depth"):
        raise ConfigError("must be 'mono' or 'perfect_depth'", "pipeline.mode")
    config.terrain()  # validates terrain.kind
    config.noise()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def with_seed(config: RunConfig, seed: int) -> RunConfig:
    return replace(config, seed=seed)
