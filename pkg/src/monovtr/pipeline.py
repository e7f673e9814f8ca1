"""End-to-end teach and repeat runs over the synthetic world."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import se3
from .config import RunConfig
from .errors import LocalizationFailure
from .estimation import chain_vo, refine_pose
from .ground import GroundModel, KeypointSet, backproject_frame
from .matching import RansacConfig, match_keypoints, ransac_pose
from .repeat import (
    RepeatMode,
    RepeatState,
    build_local_map,
    errors_from_frame,
    keyframe_positions_in_anchor,
    localize,
    path_frame,
    rebase_pose,
    step_state_machine,
    window_ids,
)
from .se3 import Pose, PoseGaussian
from .sim import (
    LandmarkField,
    ObservationRenderer,
    VehicleState,
    World,
    advance_vehicle,
    perfect_depth_keypoints,
    place_on_terrain,
    scripted_drive,
)
from .teach import TaughtPath, Teacher, path_length, vehicle_delta
from .traverselog import TraverseLog

TEACH_PASS = 1
REPEAT_PASS = 2


def build_world(config: RunConfig) -> World:
    terrain = config.terrain()
    field = LandmarkField.generate(
        terrain,
        config.field_bounds(),
        config.sim_landmark_density,
        config.seed,
        config.features_descriptor_dim,
    )
    return World(terrain, field)


def _keypoints_for_frame(config, model, intrinsics, obs, frame_index, pass_seed):
    if config.pipeline_mode == "perfect_depth":
        rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, pass_seed, 2, frame_index))
        )
        return perfect_depth_keypoints(obs, config.baseline_sigma, rng)
    kps, _ = backproject_frame(model, intrinsics, obs.uv, obs.sigmas, obs.descriptors)
    return kps


@dataclass
class TeachSummary:
    keyframes: int
    frames: int
    path_length: float


def run_teach(config: RunConfig, world: World | None = None) -> tuple[TaughtPath, TeachSummary]:
    world = world or build_world(config)
    model = config.ground_model()
    intrinsics = config.intrinsics()
    renderer = ObservationRenderer(
        world, model.T_cv, intrinsics, config.noise(), TEACH_PASS, config.features_budget
    )
    dt = 1.0 / config.sim_frame_rate
    states, _ = scripted_drive(
        world.terrain,
        config.script_waypoints,
        config.teach_speed,
        dt,
        np.radians(config.sim_turn_rate_deg),
    )
    teacher = Teacher(
        model,
        intrinsics,
        config.thresholds(),
        config.match_config(),
        config.ransac_config(),
        config.gn_config(),
        seed=config.seed,
    )
    for i, state in enumerate(states):
        obs = renderer.render(state, i)
        kps = _keypoints_for_frame(config, model, intrinsics, obs, i, TEACH_PASS)
        teacher.step(kps, i * dt, state.position)
    path = teacher.finish(config.rig_fingerprint())
    return path, TeachSummary(len(path.keyframes), len(states), path_length(path))


@dataclass
class RepeatSummary:
    frames: int
    final_mode: RepeatMode
    autonomy_rate: float
    lateral_rms: float
    lateral_max: float
    intervention_distance: float
    reached_destination: bool


class _TruePathTracker:
    """Signed plan-view lateral error against the taught true polyline."""

    def __init__(self, polyline: np.ndarray, start_index: int = 0):
        self.points = polyline[:, :2]
        self.index = start_index

    def lateral_and_heading(self, position, heading: float) -> tuple[float, float]:
        p = np.asarray(position[:2])
        lo = max(0, self.index - 5)
        hi = min(len(self.points) - 1, self.index + 10)
        ids = np.arange(lo, hi + 1)
        d = np.linalg.norm(self.points[ids] - p, axis=1)
        self.index = int(ids[np.argmin(d)])
        a = max(0, self.index - 1)
        b = min(len(self.points) - 1, self.index + 1)
        tangent = self.points[b] - self.points[a]
        norm = np.linalg.norm(tangent)
        if norm < 1e-12:
            return 0.0, 0.0
        tangent = tangent / norm
        offset = p - self.points[self.index]
        lateral = float(tangent[0] * offset[1] - tangent[1] * offset[0])
        err = (np.arctan2(tangent[1], tangent[0]) - heading + np.pi) % (2 * np.pi) - np.pi
        return lateral, float(-err)


def run_repeat(
    config: RunConfig, path: TaughtPath, world: World | None = None
) -> tuple[TraverseLog, RepeatSummary]:
    if path.true_positions is None:
        raise ValueError("taught path carries no true positions; cannot evaluate")
    world = world or build_world(config)
    model = path.ground_model
    intrinsics = path.intrinsics
    renderer = ObservationRenderer(
        world, model.T_cv, intrinsics, config.noise(), REPEAT_PASS, config.features_budget
    )
    dt = 1.0 / config.sim_frame_rate
    rc = config.repeat_config()

    start = config.repeat_start_vertex
    destination = config.repeat_destination
    if destination < 0:
        destination = len(path.keyframes) - 1

    truth = path.true_positions
    tracker = _TruePathTracker(truth, start)
    heading0 = _initial_heading(truth, start)
    x0, y0 = truth[start, :2]
    if config.repeat_init_lateral_offset:
        x0 += -np.sin(heading0) * config.repeat_init_lateral_offset
        y0 += np.cos(heading0) * config.repeat_init_lateral_offset
    vehicle = VehicleState(place_on_terrain(world.terrain, x0, y0, heading0))

    state = RepeatState(nearest_id=start)
    anchor = start
    anchor_cache: dict[int, tuple] = {}
    log = TraverseLog()

    def anchor_data(a: int):
        # local map plus cached geometry for the nearest-keyframe search and
        # lateral-error evaluation; identical to the uncached helpers
        if a not in anchor_cache:
            ids = list(
                range(max(0, a - rc.window_size), min(len(path.keyframes) - 1, a + rc.window_size) + 1)
            )
            anchor_cache[a] = (
                build_local_map(path, a, rc.window_size),
                ids,
                keyframe_positions_in_anchor(path, a, ids),
                path_frame(path, a),
            )
            while len(anchor_cache) > 4:
                drop = next(k for k in anchor_cache if k != a)
                anchor_cache.pop(drop)
        return anchor_cache[a]

    prev_kps: KeypointSet | None = None
    last_step = PoseGaussian.certain(se3.identity_pose())
    frames_in_search = 0
    operator_distance = 0.0
    reached = False

    route_length = float(
        np.sum(np.linalg.norm(np.diff(truth[:, :2], axis=0), axis=1))
    )
    max_frames = int(1.8 * route_length / max(config.repeat_speed * dt, 1e-9)) + 900

    for frame in range(max_frames):
        obs = renderer.render(vehicle, frame)
        kps = _keypoints_for_frame(config, model, intrinsics, obs, frame, REPEAT_PASS)

        # frame-to-frame VO
        vo_matches = 0
        if prev_kps is None:
            step = PoseGaussian.certain(se3.identity_pose())
        else:
            step, vo_matches = _vo_step(config, prev_kps, kps, last_step, frame)
        prev_kps = kps
        last_step = step

        pose = chain_vo(state.pose_in_anchor, step)

        local_map, ids, kf_positions, frame_geom = anchor_data(anchor)
        dists = np.linalg.norm(kf_positions - pose.mean.translation, axis=1)
        nearest = ids[int(np.argmin(dists))]
        if nearest != anchor:
            pose = rebase_pose(path, pose, anchor, nearest)
            anchor = nearest
            local_map, ids, kf_positions, frame_geom = anchor_data(anchor)

        map_matches = 0
        localized = False
        try:
            estimate, inliers = localize(
                local_map,
                kps,
                pose,
                rc.min_matches,
                config.match_config(),
                replace(config.ransac_config(), seed=(config.seed * 9176 + frame) & 0x7FFFFFFF),
                config.gn_config(),
            )
            pose = estimate.transform
            map_matches = len(inliers)
            localized = True
        except LocalizationFailure as exc:
            map_matches = exc.match_count

        veh_step = vehicle_delta(step.mean, model.T_cv)
        veh_step_gaussian = PoseGaussian(veh_step, step.covariance)
        new_state = step_state_machine(state, localized, veh_step_gaussian, rc)

        est_lat, est_head = errors_from_frame(frame_geom, pose.mean, model.T_cv)
        true_lat, true_head = tracker.lateral_and_heading(vehicle.position, vehicle.heading)
        state = replace(
            new_state,
            nearest_id=anchor,
            pose_in_anchor=pose,
            lateral_error_estimate=est_lat,
        )

        log.append(
            frame * dt,
            state.mode,
            vehicle.position,
            est_lat,
            true_lat,
            vo_matches,
            map_matches,
        )

        if anchor >= destination and localized:
            reached = True
            break

        # steering
        if state.mode in (RepeatMode.LOCALIZED, RepeatMode.VO_ONLY):
            v = config.repeat_speed
            omega = _steer(config, est_lat, est_head)
            frames_in_search = 0
        elif state.mode == RepeatMode.SEARCH:
            frames_in_search += 1
            if frames_in_search > config.repeat_intervention_frames:
                # scripted operator: drive along the true path until relocalized
                v = config.repeat_speed
                omega = _steer(config, true_lat, true_head)
                operator_distance += v * dt
                if operator_distance > config.repeat_give_up_distance:
                    state = step_state_machine(
                        state, False, veh_step_gaussian, rc, operator_halt=True
                    )
                    break
            else:
                v, omega = 0.0, 0.0
        else:  # HALTED
            break

        vehicle = advance_vehicle(vehicle, world.terrain, v, omega, dt)

    if not reached and state.mode != RepeatMode.HALTED and len(log) >= max_frames:
        state = replace(state, mode=RepeatMode.HALTED)

    summary = _summarize(log, state.mode, operator_distance, reached)
    return log, summary


def _initial_heading(truth: np.ndarray, start: int) -> float:
    nxt = min(start + 1, len(truth) - 1)
    d = truth[nxt, :2] - truth[start, :2]
    if np.linalg.norm(d) < 1e-12 and start > 0:
        d = truth[start, :2] - truth[start - 1, :2]
    return float(np.arctan2(d[1], d[0]))


def _vo_step(config, prev_kps, kps, last_step, frame) -> tuple[PoseGaussian, int]:
    try:
        matches = match_keypoints(prev_kps, kps, prior=last_step.mean, config=config.match_config())
        cfg = replace(config.ransac_config(), seed=(config.seed * 7919 + frame) & 0x7FFFFFFF)
        result = ransac_pose(matches, prev_kps, kps, cfg)
        est = refine_pose(result.inliers, prev_kps, kps, result.transform, config.gn_config())
        return est.transform, len(result.inliers)
    except Exception:
        # constant-velocity coast with inflated covariance; the paper saw no
        # VO failures, so this is a defensive path only
        return PoseGaussian(last_step.mean, 4.0 * last_step.covariance + 1e-6 * np.eye(6)), 0


def _steer(config, lateral: float, heading: float) -> float:
    omega = -(config.repeat_k_lateral * lateral + config.repeat_k_heading * heading)
    return float(np.clip(omega, -config.repeat_max_yaw_rate, config.repeat_max_yaw_rate))


def _summarize(log: TraverseLog, final_mode, operator_distance, reached) -> RepeatSummary:
    distances = log.distances()
    if len(log) < 2:
        return RepeatSummary(len(log), final_mode, 100.0, 0.0, 0.0, operator_distance, reached)
    steps = np.diff(distances)
    modes = log.mode[1:]
    bad = np.array([m in (RepeatMode.SEARCH, RepeatMode.HALTED) for m in modes])
    total = float(np.sum(steps))
    autonomy = 100.0 if total == 0 else 100.0 * float(np.sum(steps[~bad])) / total
    lat = np.asarray(log.true_lateral)
    return RepeatSummary(
        len(log),
        final_mode,
        autonomy,
        float(np.sqrt(np.mean(lat**2))),
        float(np.max(np.abs(lat))),
        operator_distance,
        reached,
    )
