"""Synthetic world: terrain, landmark fields, vehicle kinematics, rendering.

Observations are rendered from the *true* terrain and camera pose; only the
pipeline believes the locally-planar model. Detection noise (dropout,
descriptor corruption, descriptor swaps) is sampled per landmark per pass:
stable within a pass, resampled across passes, so teach-vs-repeat matching
degrades while frame-to-frame tracking survives.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import se3
from .container import read_container, write_container
from .errors import UnreachableWaypoint
from .ground import KeypointSet
from .se3 import CameraIntrinsics, Pose

FRAMES_FORMAT = "monovtr-frames"
FRAMES_VERSION = 1


# --- terrain ----------------------------------------------------------------


@dataclass(frozen=True)
class TerrainComponent:
    """One additive elevation term; see Terrain factory methods."""

    kind: str
    amplitude: float = 0.0
    wavelength: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)
    radius: float = 1.0
    slope: tuple[float, float] = (0.0, 0.0)
    # optional smooth rectangular window (x0, x1, y0, y1); taper in metres
    window: tuple[float, float, float, float] | None = None
    taper: float = 1.0


@dataclass(frozen=True)
class Terrain:
    components: tuple[TerrainComponent, ...] = ()
    kind: str = "plane"

    @staticmethod
    def plane() -> "Terrain":
        return Terrain((), "plane")

    @staticmethod
    def bumps(amplitude: float, wavelength: float, window=None, taper=1.0) -> "Terrain":
        return Terrain(
            (TerrainComponent("bumps", amplitude, wavelength, window=window, taper=taper),),
            "bumps",
        )

    @staticmethod
    def hill(amplitude: float, center, radius: float) -> "Terrain":
        return Terrain((TerrainComponent("hill", amplitude, center=tuple(center), radius=radius),), "hill")

    @staticmethod
    def slope(sx: float, sy: float) -> "Terrain":
        return Terrain((TerrainComponent("slope", slope=(sx, sy)),), "slope")

    @staticmethod
    def composite(components) -> "Terrain":
        return Terrain(tuple(components), "composite")

    def height(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        h = np.zeros(np.broadcast(x, y).shape)
        for c in self.components:
            h = h + _component_height(c, x, y)
        return h

    def gradient(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        gx = np.zeros(np.broadcast(x, y).shape)
        gy = np.zeros_like(gx)
        for c in self.components:
            cx, cy = _component_gradient(c, x, y)
            gx = gx + cx
            gy = gy + cy
        return gx, gy


def _smooth_window(c: TerrainComponent, x, y):
    """Product of sigmoids; returns (w, dw/dx, dw/dy)."""
    if c.window is None:
        one = np.ones(np.broadcast(x, y).shape)
        return one, np.zeros_like(one), np.zeros_like(one)
    x0, x1, y0, y1 = c.window
    t = max(c.taper, 1e-6)

    def edge(v, lo, hi):
        a = 1.0 / (1.0 + np.exp(-(v - lo) / t))
        b = 1.0 / (1.0 + np.exp((v - hi) / t))
        da = a * (1.0 - a) / t
        db = -b * (1.0 - b) / t
        return a * b, da * b + a * db

    wx, dwx = edge(x, x0, x1)
    wy, dwy = edge(y, y0, y1)
    return wx * wy, dwx * wy, wx * dwy


def _component_height(c: TerrainComponent, x, y):
    if c.kind == "bumps":
        base = c.amplitude * np.sin(2 * np.pi * x / c.wavelength) * np.sin(
            2 * np.pi * y / c.wavelength
        )
    elif c.kind == "hill":
        r2 = (x - c.center[0]) ** 2 + (y - c.center[1]) ** 2
        base = c.amplitude * np.exp(-r2 / (2 * c.radius**2))
    elif c.kind == "slope":
        base = c.slope[0] * x + c.slope[1] * y
    else:
        raise ValueError(f"unknown terrain component {c.kind!r}")
    w, _, _ = _smooth_window(c, x, y)
    return base * w


def _component_gradient(c: TerrainComponent, x, y):
    if c.kind == "bumps":
        k = 2 * np.pi / c.wavelength
        base = c.amplitude * np.sin(k * x) * np.sin(k * y)
        dbx = c.amplitude * k * np.cos(k * x) * np.sin(k * y)
        dby = c.amplitude * k * np.sin(k * x) * np.cos(k * y)
    elif c.kind == "hill":
        dx = x - c.center[0]
        dy = y - c.center[1]
        base = c.amplitude * np.exp(-(dx**2 + dy**2) / (2 * c.radius**2))
        dbx = base * (-dx / c.radius**2)
        dby = base * (-dy / c.radius**2)
    elif c.kind == "slope":
        shape = np.broadcast(x, y).shape
        base = c.slope[0] * x + c.slope[1] * y
        dbx = np.full(shape, c.slope[0])
        dby = np.full(shape, c.slope[1])
    else:
        raise ValueError(f"unknown terrain component {c.kind!r}")
    w, dwx, dwy = _smooth_window(c, x, y)
    return dbx * w + base * dwx, dby * w + base * dwy


# --- landmarks and noise ------------------------------------------------------


@dataclass(frozen=True)
class LandmarkField:
    ids: np.ndarray
    positions: np.ndarray  # (N, 3) on the terrain surface
    descriptors: np.ndarray  # (N, D) unit vectors
    levels: np.ndarray  # (N,) pyramid level 0..3
    density: float = 0.0

    @staticmethod
    def generate(
        terrain: Terrain,
        bounds,
        density: float,
        seed: int,
        descriptor_dim: int = 16,
        level_probs=(0.4, 0.3, 0.2, 0.1),
    ) -> "LandmarkField":
        x0, x1, y0, y1 = bounds
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0x1A4D)))
        n = int(round(density * (x1 - x0) * (y1 - y0)))
        x = rng.uniform(x0, x1, n)
        y = rng.uniform(y0, y1, n)
        z = terrain.height(x, y)
        desc = rng.standard_normal((n, descriptor_dim))
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
        levels = rng.choice(len(level_probs), size=n, p=np.asarray(level_probs))
        return LandmarkField(
            np.arange(n, dtype=np.int64),
            np.column_stack([x, y, z]),
            desc,
            levels.astype(np.int64),
            density,
        )


@dataclass(frozen=True)
class NoiseConfig:
    pixel_sigma_base: float = 0.5  # sigma = base * 2**level pixels
    pixel_noise_scale: float = 1.0  # 0 disables rendered noise, model sigmas stay
    dropout: float = 0.0
    corruption: float = 0.0
    swap: float = 0.0
    # optional low-texture band: landmarks with x in [x0, x1] drop out at `rate`
    dropout_region: tuple[float, float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        for rate in (self.dropout, self.corruption, self.swap):
            if not 0.0 <= rate <= 1.0:
                raise ValueError("noise rates must lie in [0, 1]")
        if self.pixel_sigma_base <= 0:
            raise ValueError("pixel sigma must be positive")


@dataclass(frozen=True)
class World:
    terrain: Terrain
    field: LandmarkField


# --- vehicle ------------------------------------------------------------------


@dataclass(frozen=True)
class VehicleState:
    """Vehicle pose in the world (x fwd, y left, z surface normal) plus commands."""

    pose: Pose
    speed: float = 0.0
    yaw_rate: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def heading(self) -> float:
        f = self.pose.rotation[:, 0]
        return float(np.arctan2(f[1], f[0]))


def place_on_terrain(terrain: Terrain, x: float, y: float, heading: float) -> Pose:
    """Pose with the origin on the surface and z along the local normal."""
    gx, gy = terrain.gradient(x, y)
    gx, gy = float(gx), float(gy)
    c, s = np.cos(heading), np.sin(heading)
    forward = np.array([c, s, gx * c + gy * s])
    forward /= np.linalg.norm(forward)
    up = np.array([-gx, -gy, 1.0])
    up /= np.linalg.norm(up)
    left = np.cross(up, forward)
    rot = np.column_stack([forward, left, up])
    return Pose(rot, np.array([x, y, float(terrain.height(x, y))]))


def advance_vehicle(state: VehicleState, terrain: Terrain, v: float, omega: float, dt: float) -> VehicleState:
    """Integrate plan-view unicycle motion, then re-seat the pose on the terrain."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x, y = state.position[:2]
    th = state.heading
    if abs(omega) < 1e-12:
        x += v * dt * np.cos(th)
        y += v * dt * np.sin(th)
    else:
        x += v / omega * (np.sin(th + omega * dt) - np.sin(th))
        y -= v / omega * (np.cos(th + omega * dt) - np.cos(th))
    th += omega * dt
    return VehicleState(place_on_terrain(terrain, float(x), float(y), float(th)), v, omega)


def scripted_drive(
    terrain: Terrain,
    waypoints,
    speed: float,
    dt: float,
    turn_rate: float = np.radians(30.0),
    position_tol: float = 1e-9,
):
    """Deterministic polyline follower: turn in place at vertices, drive straight.

    Emits the state *before* each integration step and never emits the arrival
    state; returns (states, final_state). Partial final steps snap exactly onto
    the target, so closed scripts close bit-tight in plan view.
    """
    wps = [np.asarray(w, dtype=np.float64) for w in waypoints]
    if any(not np.all(np.isfinite(w)) or w.shape != (2,) for w in wps):
        raise UnreachableWaypoint("waypoints must be finite (x, y) pairs")
    if len(wps) < 2:
        raise UnreachableWaypoint("need at least two waypoints")
    if speed <= 0 or turn_rate <= 0:
        raise UnreachableWaypoint("speed and turn rate must be positive")

    x, y = wps[0]
    heading = float(np.arctan2(wps[1][1] - y, wps[1][0] - x))
    states: list[VehicleState] = []
    state = VehicleState(place_on_terrain(terrain, x, y, heading), 0.0, 0.0)

    for target in wps[1:]:
        dx, dy = target[0] - x, target[1] - y
        dist = float(np.hypot(dx, dy))
        if dist <= position_tol:
            continue
        goal = float(np.arctan2(dy, dx))
        err = _wrap_angle(goal - heading)
        while abs(err) > 1e-12:
            step = float(np.clip(err, -turn_rate * dt, turn_rate * dt))
            states.append(replace(state, speed=0.0, yaw_rate=step / dt))
            heading = _wrap_angle(heading + step)
            state = VehicleState(place_on_terrain(terrain, x, y, heading), 0.0, step / dt)
            err = _wrap_angle(goal - heading)
        remaining = dist
        ux, uy = np.cos(heading), np.sin(heading)
        while remaining > position_tol:
            step = min(speed * dt, remaining)
            states.append(replace(state, speed=step / dt, yaw_rate=0.0))
            x, y = x + ux * step, y + uy * step
            state = VehicleState(place_on_terrain(terrain, float(x), float(y), heading), step / dt, 0.0)
            remaining -= step
        x, y = float(target[0]), float(target[1])
        state = VehicleState(place_on_terrain(terrain, x, y, heading), state.speed, 0.0)
    return states, state


def _wrap_angle(a: float) -> float:
    return float((a + np.pi) % (2 * np.pi) - np.pi)


# --- rendering ------------------------------------------------------------------


@dataclass(frozen=True)
class FrameObservations:
    """One frame's detections plus oracle-only ground truth columns."""

    uv: np.ndarray  # (N, 2) pixels
    sigmas: np.ndarray  # (N, 2) modeled sigma_u, sigma_v
    descriptors: np.ndarray  # (N, D)
    levels: np.ndarray  # (N,)
    true_ids: np.ndarray  # (N,) landmark ids, oracle use only
    true_cam_positions: np.ndarray  # (N, 3) true camera-frame points, oracle only

    def __len__(self) -> int:
        return len(self.uv)


class ObservationRenderer:
    """Renders noisy pinhole observations of a landmark field for one pass."""

    def __init__(
        self,
        world: World,
        t_cv: Pose,
        intrinsics: CameraIntrinsics,
        noise: NoiseConfig,
        pass_seed: int,
        budget: int = 600,
        cutoff: float = 30.0,
    ):
        self.world = world
        self.t_cv = t_cv
        self.intrinsics = intrinsics
        self.noise = noise
        self.pass_seed = pass_seed
        self.budget = budget
        self.cutoff = cutoff
        self._prepare_pass_appearance()

    def _prepare_pass_appearance(self):
        field_ = self.world.field
        n = len(field_.ids)
        rng = np.random.default_rng(
            np.random.SeedSequence((self.noise.seed, self.pass_seed, 0xA99EA))
        )
        detected = rng.random(n) >= self.noise.dropout
        if self.noise.dropout_region is not None:
            x0, x1, rate = self.noise.dropout_region
            in_region = (field_.positions[:, 0] >= x0) & (field_.positions[:, 0] <= x1)
            detected[in_region] = rng.random(int(in_region.sum())) >= rate
        descriptors = field_.descriptors.copy()
        corrupt = rng.random(n) < self.noise.corruption
        if np.any(corrupt):
            fresh = rng.standard_normal((int(corrupt.sum()), descriptors.shape[1]))
            descriptors[corrupt] = fresh / np.linalg.norm(fresh, axis=1, keepdims=True)
        n_swap = int(round(self.noise.swap * n / 2))
        if n_swap > 0:
            pick = rng.choice(n, size=2 * n_swap, replace=False)
            a, b = pick[:n_swap], pick[n_swap:]
            descriptors[a], descriptors[b] = descriptors[b].copy(), descriptors[a].copy()
        self._detected = detected
        self._descriptors = descriptors
        self._sigma_by_level = self.noise.pixel_sigma_base * (
            2.0 ** np.arange(int(field_.levels.max(initial=0)) + 1)
        )

    def render(self, state: VehicleState, frame_index: int) -> FrameObservations:
        k = self.intrinsics
        field_ = self.world.field
        t_wc = se3.compose(state.pose, se3.inverse(self.t_cv))
        cam_origin = t_wc.translation
        r_cw = t_wc.rotation.T

        d_sq = np.sum((field_.positions[:, :2] - cam_origin[:2]) ** 2, axis=1)
        radius = 6.0
        while True:
            near = (d_sq <= radius**2) & self._detected
            idx = np.flatnonzero(near)
            cam = (field_.positions[idx] - cam_origin) @ r_cw.T
            vis = cam[:, 2] > 1e-3
            uv = np.full((len(idx), 2), -1.0)
            zs = cam[vis, 2]
            uv[vis, 0] = k.f_u * cam[vis, 0] / zs + k.c_u
            uv[vis, 1] = k.f_v * cam[vis, 1] / zs + k.c_v
            vis &= (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
            if int(vis.sum()) >= self.budget or radius >= self.cutoff:
                break
            radius = min(radius * 2.0, self.cutoff)

        idx = idx[vis]
        cam = cam[vis]
        uv = uv[vis]
        levels = field_.levels[idx]
        sigma = self._sigma_by_level[levels]

        rng = np.random.default_rng(
            np.random.SeedSequence((self.noise.seed, self.pass_seed, 1, frame_index))
        )
        if self.noise.pixel_noise_scale > 0:
            uv = uv + rng.standard_normal(uv.shape) * (
                sigma[:, None] * self.noise.pixel_noise_scale
            )
            inb = (uv[:, 0] >= 0) & (uv[:, 0] < k.width) & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
            idx, cam, uv, levels, sigma = idx[inb], cam[inb], uv[inb], levels[inb], sigma[inb]

        if len(idx) > self.budget:
            order = np.argsort(np.linalg.norm(cam, axis=1), kind="stable")[: self.budget]
            idx, cam, uv, levels, sigma = (
                idx[order],
                cam[order],
                uv[order],
                levels[order],
                sigma[order],
            )

        return FrameObservations(
            uv,
            np.column_stack([sigma, sigma]),
            self._descriptors[idx],
            levels,
            field_.ids[idx],
            cam,
        )


def perfect_depth_keypoints(
    obs: FrameObservations, sigma: float, rng: np.random.Generator
) -> KeypointSet:
    """Stereo-like baseline: true 3D positions plus small isotropic noise."""
    n = len(obs)
    pos = obs.true_cam_positions + sigma * rng.standard_normal((n, 3))
    cov = np.tile(np.eye(3) * sigma**2, (n, 1, 1))
    return KeypointSet(pos, cov, obs.descriptors, obs.uv)


# --- frame-stream replay log -----------------------------------------------------


def save_frames(path, timestamps, states, observations) -> None:
    counts = np.array([len(o) for o in observations], dtype=np.int64)
    arrays = {
        "timestamps": np.asarray(timestamps, dtype=np.float64),
        "rotations": np.stack([s.pose.rotation for s in states]),
        "translations": np.stack([s.pose.translation for s in states]),
        "speeds": np.array([s.speed for s in states]),
        "yaw_rates": np.array([s.yaw_rate for s in states]),
        "counts": counts,
        "uv": np.concatenate([o.uv for o in observations]) if observations else np.zeros((0, 2)),
        "sigmas": np.concatenate([o.sigmas for o in observations])
        if observations
        else np.zeros((0, 2)),
        "descriptors": np.concatenate([o.descriptors for o in observations])
        if observations
        else np.zeros((0, 0)),
        "levels": np.concatenate([o.levels for o in observations]).astype(np.int64)
        if observations
        else np.zeros(0, dtype=np.int64),
        "true_ids": np.concatenate([o.true_ids for o in observations]).astype(np.int64)
        if observations
        else np.zeros(0, dtype=np.int64),
        "true_cam_positions": np.concatenate([o.true_cam_positions for o in observations])
        if observations
        else np.zeros((0, 3)),
    }
    write_container(path, FRAMES_FORMAT, FRAMES_VERSION, {"n_frames": len(states)}, arrays)


def load_frames(path):
    _, arrays = read_container(path, FRAMES_FORMAT, FRAMES_VERSION)
    states = []
    observations = []
    start = 0
    for i, count in enumerate(arrays["counts"]):
        stop = start + int(count)
        states.append(
            VehicleState(
                Pose(arrays["rotations"][i], arrays["translations"][i]),
                float(arrays["speeds"][i]),
                float(arrays["yaw_rates"][i]),
            )
        )
        observations.append(
            FrameObservations(
                arrays["uv"][start:stop],
                arrays["sigmas"][start:stop],
                arrays["descriptors"][start:stop],
                arrays["levels"][start:stop],
                arrays["true_ids"][start:stop],
                arrays["true_cam_positions"][start:stop],
            )
        )
        start = stop
    return arrays["timestamps"], states, observations
