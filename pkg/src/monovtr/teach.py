"""Teach-pass pose graph: keyframe policy, VO tracking, and persistence.

The teach pass tracks every frame's keypoints against the most recent
keyframe (match -> RANSAC -> Gauss-Newton), and spawns a new keyframe once
the vehicle has moved far enough. Keypoints live in their own keyframe's
camera frame; no global frame is ever built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se3
from .container import read_container, write_container
from .errors import InsufficientInliers, SingularNormalEquations, VOFailure
from .estimation import GaussNewtonConfig, refine_pose
from .ground import GroundModel, KeypointSet
from .matching import Match, MatchConfig, RansacConfig, match_keypoints, ransac_pose
from .se3 import CameraIntrinsics, Pose, PoseGaussian

MAP_FORMAT = "monovtr-map"
MAP_VERSION = 1


@dataclass(frozen=True)
class KeyframeThresholds:
    translation: float = 0.25  # metres of accumulated motion
    rotation: float = np.radians(2.5)  # radians of accumulated rotation


@dataclass
class Keyframe:
    id: int
    keypoints: KeypointSet
    timestamp: float


@dataclass
class PathEdge:
    """6DOF pose change between consecutive keyframes.

    `transform` maps points in the `to_id` camera frame into the `from_id`
    camera frame; `matches` index keypoints of the two keyframes.
    """

    from_id: int
    to_id: int
    transform: PoseGaussian
    matches: list[Match]


@dataclass
class TaughtPath:
    keyframes: list[Keyframe]
    edges: list[PathEdge]
    ground_model: GroundModel
    intrinsics: CameraIntrinsics
    config_fingerprint: str = ""
    # Evaluation-only: true vehicle positions of the keyframes in the world
    # frame, recorded by the simulator teach. The localizer never reads this.
    true_positions: np.ndarray | None = None

    def __post_init__(self):
        if len(self.edges) != max(len(self.keyframes) - 1, 0):
            raise ValueError("a taught path is a chain: |edges| == |keyframes| - 1")


def should_create_keyframe(delta: Pose, thresholds: KeyframeThresholds) -> bool:
    """True once accumulated motion crosses either threshold."""
    if np.linalg.norm(delta.translation) >= thresholds.translation:
        return True
    return se3.rotation_angle(delta.rotation) >= thresholds.rotation


def vehicle_delta(t_cam: Pose, t_cv: Pose) -> Pose:
    """Conjugate a camera-frame pose change into the vehicle frame."""
    return se3.compose(se3.inverse(t_cv), se3.compose(t_cam, t_cv))


@dataclass
class TeachState:
    keyframes: list[Keyframe] = field(default_factory=list)
    edges: list[PathEdge] = field(default_factory=list)
    true_positions: list[np.ndarray] = field(default_factory=list)
    # accumulated camera-frame motion since the last keyframe (kf -> current)
    delta: PoseGaussian | None = None
    last_vo_matches: int = 0


class Teacher:
    """Sequential consumer of the teach frame stream."""

    def __init__(
        self,
        ground_model: GroundModel,
        intrinsics: CameraIntrinsics,
        thresholds: KeyframeThresholds | None = None,
        match_config: MatchConfig | None = None,
        ransac_config: RansacConfig | None = None,
        gn_config: GaussNewtonConfig | None = None,
        seed: int = 0,
    ):
        self.ground_model = ground_model
        self.intrinsics = intrinsics
        self.thresholds = thresholds or KeyframeThresholds()
        self.match_config = match_config or MatchConfig()
        self.ransac_config = ransac_config or RansacConfig()
        self.gn_config = gn_config or GaussNewtonConfig()
        self.seed = seed
        self.state = TeachState()
        self._frame_index = 0

    def step(
        self,
        keypoints: KeypointSet,
        timestamp: float,
        true_position: np.ndarray | None = None,
    ) -> Keyframe | None:
        """Process one frame; returns the new keyframe when one is created."""
        st = self.state
        self._frame_index += 1
        if not st.keyframes:
            kf = Keyframe(0, keypoints, timestamp)
            st.keyframes.append(kf)
            st.true_positions.append(
                np.zeros(3) if true_position is None else np.asarray(true_position, float)
            )
            st.delta = PoseGaussian.certain(se3.identity_pose())
            return kf

        last = st.keyframes[-1]
        prior = st.delta.mean if st.delta is not None else se3.identity_pose()
        matches = match_keypoints(last.keypoints, keypoints, prior=prior, config=self.match_config)
        try:
            cfg = RansacConfig(
                max_iterations=self.ransac_config.max_iterations,
                inlier_chi2=self.ransac_config.inlier_chi2,
                min_inliers=self.ransac_config.min_inliers,
                confidence=self.ransac_config.confidence,
                seed=(self.seed * 1_000_003 + self._frame_index) & 0x7FFFFFFF,
            )
            ransac = ransac_pose(matches, last.keypoints, keypoints, cfg)
            estimate = refine_pose(
                ransac.inliers, last.keypoints, keypoints, ransac.transform, self.gn_config
            )
        except (InsufficientInliers, SingularNormalEquations) as exc:
            raise VOFailure(f"teach VO failed at frame {self._frame_index}: {exc}") from exc

        st.delta = estimate.transform
        st.last_vo_matches = len(ransac.inliers)

        if not should_create_keyframe(
            vehicle_delta(st.delta.mean, self.ground_model.T_cv), self.thresholds
        ):
            return None

        kf = Keyframe(last.id + 1, keypoints, timestamp)
        edge = PathEdge(last.id, kf.id, st.delta, ransac.inliers)
        st.keyframes.append(kf)
        st.edges.append(edge)
        st.true_positions.append(
            np.zeros(3) if true_position is None else np.asarray(true_position, float)
        )
        st.delta = PoseGaussian.certain(se3.identity_pose())
        return kf

    def finish(self, config_fingerprint: str = "") -> TaughtPath:
        return TaughtPath(
            self.state.keyframes,
            self.state.edges,
            self.ground_model,
            self.intrinsics,
            config_fingerprint,
            np.asarray(self.state.true_positions) if self.state.true_positions else None,
        )


def path_length(path: TaughtPath) -> float:
    """Sum of vehicle-frame edge translations, metres."""
    total = 0.0
    for edge in path.edges:
        total += float(
            np.linalg.norm(vehicle_delta(edge.transform.mean, path.ground_model.T_cv).translation)
        )
    return total


# --- persistence ----------------------------------------------------------


def save_path(path: TaughtPath, destination) -> None:
    kf_counts = np.array([len(kf.keypoints) for kf in path.keyframes], dtype=np.int64)
    match_counts = np.array([len(e.matches) for e in path.edges], dtype=np.int64)
    desc_dim = (
        path.keyframes[0].keypoints.descriptors.shape[1] if path.keyframes else 0
    )

    arrays: dict[str, np.ndarray] = {
        "kf_ids": np.array([kf.id for kf in path.keyframes], dtype=np.int64),
        "kf_timestamps": np.array([kf.timestamp for kf in path.keyframes]),
        "kf_counts": kf_counts,
        "kp_positions": _stack([kf.keypoints.positions for kf in path.keyframes], (0, 3)),
        "kp_covariances": _stack([kf.keypoints.covariances for kf in path.keyframes], (0, 3, 3)),
        "kp_descriptors": _stack(
            [kf.keypoints.descriptors for kf in path.keyframes], (0, desc_dim)
        ),
        "kp_pixels": _stack([kf.keypoints.source_pixels for kf in path.keyframes], (0, 2)),
        "edge_ids": np.array([[e.from_id, e.to_id] for e in path.edges], dtype=np.int64).reshape(
            -1, 2
        ),
        "edge_rotations": _stack([[e.transform.mean.rotation] for e in path.edges], (0, 3, 3)),
        "edge_translations": _stack([[e.transform.mean.translation] for e in path.edges], (0, 3)),
        "edge_covariances": _stack([[e.transform.covariance] for e in path.edges], (0, 6, 6)),
        "match_counts": match_counts,
        "match_indices": _stack(
            [[[m.index_a, m.index_b] for m in e.matches] for e in path.edges],
            (0, 2),
            dtype=np.int64,
        ),
        "match_values": _stack(
            [[[m.descriptor_distance, m.mahalanobis] for m in e.matches] for e in path.edges],
            (0, 2),
        ),
    }
    if path.true_positions is not None:
        arrays["true_positions"] = np.asarray(path.true_positions, dtype=np.float64)

    gm = path.ground_model
    meta = {
        "config_fingerprint": path.config_fingerprint,
        "descriptor_dim": int(desc_dim),
        "rig": {
            "T_cv_rotation": gm.T_cv.rotation.tolist(),
            "T_cv_translation": gm.T_cv.translation.tolist(),
            "T_vg_rotation": gm.T_vg.mean.rotation.tolist(),
            "T_vg_translation": gm.T_vg.mean.translation.tolist(),
            "T_vg_covariance": gm.T_vg.covariance.tolist(),
            "max_range": gm.max_range,
            "intrinsics": [
                path.intrinsics.f_u,
                path.intrinsics.f_v,
                path.intrinsics.c_u,
                path.intrinsics.c_v,
                path.intrinsics.width,
                path.intrinsics.height,
            ],
        },
        "has_true_positions": path.true_positions is not None,
    }
    write_container(destination, MAP_FORMAT, MAP_VERSION, meta, arrays)


def _stack(groups, trailing_shape, dtype=np.float64) -> np.ndarray:
    rows = [np.asarray(g, dtype=dtype).reshape((-1,) + trailing_shape[1:]) for g in groups]
    if not rows:
        return np.zeros((0,) + trailing_shape[1:], dtype=dtype)
    return np.concatenate(rows, axis=0) if rows else np.zeros(trailing_shape, dtype=dtype)


def load_path(source) -> TaughtPath:
    meta, arrays = read_container(source, MAP_FORMAT, MAP_VERSION)
    rig = meta["rig"]
    fu, fv, cu, cv, w, h = rig["intrinsics"]
    intrinsics = CameraIntrinsics(fu, fv, cu, cv, int(w), int(h))
    ground_model = GroundModel(
        Pose(np.array(rig["T_cv_rotation"]), np.array(rig["T_cv_translation"])),
        PoseGaussian(
            Pose(np.array(rig["T_vg_rotation"]), np.array(rig["T_vg_translation"])),
            np.array(rig["T_vg_covariance"]),
        ),
        rig["max_range"],
    )

    keyframes = []
    start = 0
    desc_dim = meta["descriptor_dim"]
    for kf_id, ts, count in zip(arrays["kf_ids"], arrays["kf_timestamps"], arrays["kf_counts"]):
        stop = start + int(count)
        kps = KeypointSet(
            arrays["kp_positions"][start:stop],
            arrays["kp_covariances"][start:stop],
            arrays["kp_descriptors"][start:stop].reshape(int(count), desc_dim),
            arrays["kp_pixels"][start:stop],
        )
        keyframes.append(Keyframe(int(kf_id), kps, float(ts)))
        start = stop

    edges = []
    mstart = 0
    for row, (ids, count) in enumerate(zip(arrays["edge_ids"], arrays["match_counts"])):
        mstop = mstart + int(count)
        matches = [
            Match(int(i), int(j), float(d), float(m))
            for (i, j), (d, m) in zip(
                arrays["match_indices"][mstart:mstop], arrays["match_values"][mstart:mstop]
            )
        ]
        edges.append(
            PathEdge(
                int(ids[0]),
                int(ids[1]),
                PoseGaussian(
                    Pose(arrays["edge_rotations"][row], arrays["edge_translations"][row]),
                    arrays["edge_covariances"][row],
                ),
                matches,
            )
        )
        mstart = mstop

    return TaughtPath(
        keyframes,
        edges,
        ground_model,
        intrinsics,
        meta["config_fingerprint"],
        arrays.get("true_positions"),
    )
