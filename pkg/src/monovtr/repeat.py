"""Repeat-pass machinery: local metric maps, localization, failure handling.

Each timestep the localizer chains frame-to-frame VO onto its pose estimate,
identifies the nearest taught keyframe, fuses a window of adjacent keyframes
into a local metric map anchored there, and localizes against it. Fewer than
`min_matches` map inliers is a localization failure; the state machine then
coasts on VO until a distance threshold trips it into SEARCH.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from . import se3
from .errors import InsufficientInliers, LocalizationFailure, SingularNormalEquations
from .estimation import GaussNewtonConfig, PoseEstimate, chain_vo, invert_gaussian, refine_pose
from .ground import KeypointSet
from .matching import MatchConfig, RansacConfig, match_keypoints, ransac_pose
from .se3 import Pose, PoseGaussian
from .teach import TaughtPath

_I3 = np.eye(3)


class RepeatMode(enum.Enum):
    LOCALIZED = "LOCALIZED"
    VO_ONLY = "VO_ONLY"
    SEARCH = "SEARCH"
    HALTED = "HALTED"


@dataclass(frozen=True)
class RepeatConfig:
    window_size: int = 5
    halt_distance: float = 2.0  # metres of pure VO before stopping
    min_matches: int = 10


@dataclass(frozen=True)
class RepeatState:
    mode: RepeatMode = RepeatMode.LOCALIZED
    nearest_id: int = 0
    pose_in_anchor: PoseGaussian = field(
        default_factory=lambda: PoseGaussian.certain(se3.identity_pose())
    )
    distance_since_localization: float = 0.0
    lateral_error_estimate: float = 0.0


@dataclass
class LocalMap:
    anchor_id: int
    window: list[int]
    fused_keypoints: KeypointSet
    # per-landmark covariances of every observation fused in (anchor frame),
    # populated on request for the Loewner-order consistency checks
    member_covariances: list[list[np.ndarray]] | None = None


def window_ids(path: TaughtPath, anchor_id: int, window_size: int) -> list[int]:
    half = (window_size - 1) // 2
    lo = max(0, anchor_id - half)
    hi = min(len(path.keyframes) - 1, anchor_id + half)
    return list(range(lo, hi + 1))


def chained_transform(path: TaughtPath, from_id: int, to_id: int) -> PoseGaussian:
    """Gaussian transform mapping `to_id`-frame points into `from_id` frame."""
    if from_id == to_id:
        return PoseGaussian.certain(se3.identity_pose())
    acc = PoseGaussian.certain(se3.identity_pose())
    if to_id > from_id:
        for k in range(from_id, to_id):
            acc = chain_vo(acc, path.edges[k].transform)
        return acc
    for k in range(to_id, from_id):
        acc = chain_vo(acc, path.edges[k].transform)
    return invert_gaussian(acc)


def _transform_keypoints(kps: KeypointSet, transform: PoseGaussian) -> tuple[np.ndarray, np.ndarray]:
    """Map keypoints through an uncertain transform: returns positions, covariances."""
    rot, trans = transform.mean.rotation, transform.mean.translation
    pos = kps.positions @ rot.T + trans
    cov = np.matmul(np.matmul(rot, kps.covariances), rot.T)
    # left-perturbation of the transform acts on a point via [I | -skew(p)]
    n = len(kps)
    jac = np.empty((n, 3, 6))
    jac[:, :, :3] = _I3
    jac[:, 0, 3], jac[:, 0, 4], jac[:, 0, 5] = 0.0, pos[:, 2], -pos[:, 1]
    jac[:, 1, 3], jac[:, 1, 4], jac[:, 1, 5] = -pos[:, 2], 0.0, pos[:, 0]
    jac[:, 2, 3], jac[:, 2, 4], jac[:, 2, 5] = pos[:, 1], -pos[:, 0], 0.0
    cov += np.matmul(np.matmul(jac, transform.covariance), np.transpose(jac, (0, 2, 1)))
    return pos, 0.5 * (cov + np.transpose(cov, (0, 2, 1)))


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, x: int) -> int:
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, x: int, y: int):
        rx, ry = self.find(x), self.find(y)
        if rx != ry:
            self.parent[max(rx, ry)] = min(rx, ry)


def build_local_map(
    path: TaughtPath, anchor_id: int, window_size: int, keep_members: bool = False
) -> LocalMap:
    """Fuse a window of keyframes into the anchor frame.

    Keypoints are transported through the chained edge transforms (covariance
    compounded through the adjoint), landmarks linked transitively by edge
    match lists are fused in information form, and unlinked keypoints pass
    through untouched.
    """
    from .matching import inv3

    ids = window_ids(path, anchor_id, window_size)
    pos_parts, cov_parts, desc_parts, px_parts = [], [], [], []
    kf_of_parts, idx_of_parts = [], []
    offsets = {}
    total = 0
    for k in ids:
        kps = path.keyframes[k].keypoints
        pos, cov = _transform_keypoints(kps, chained_transform(path, anchor_id, k))
        pos_parts.append(pos)
        cov_parts.append(cov)
        desc_parts.append(kps.descriptors)
        px_parts.append(kps.source_pixels)
        kf_of_parts.append(np.full(len(kps), k, dtype=np.intp))
        idx_of_parts.append(np.arange(len(kps), dtype=np.intp))
        offsets[k] = total
        total += len(kps)

    positions = np.concatenate(pos_parts)
    covariances = np.concatenate(cov_parts)
    descriptors = np.concatenate(desc_parts)
    pixels = np.concatenate(px_parts)
    kf_of = np.concatenate(kf_of_parts)

    uf = _UnionFind(total)
    for edge in path.edges:
        if edge.from_id in offsets and edge.to_id in offsets:
            base_a, base_b = offsets[edge.from_id], offsets[edge.to_id]
            for m in edge.matches:
                uf.union(base_a + m.index_a, base_b + m.index_b)

    roots = np.fromiter((uf.find(i) for i in range(total)), dtype=np.intp, count=total)

    # Group nodes by root; within each group order members by closeness to
    # the anchor (ties toward the lower keyframe id) so the first member is
    # the descriptor/pixel representative.
    order = np.lexsort((np.arange(total), kf_of, np.abs(kf_of - anchor_id), roots))
    sorted_roots = roots[order]
    starts = np.flatnonzero(np.concatenate([[True], sorted_roots[1:] != sorted_roots[:-1]]))
    counts = np.diff(np.concatenate([starts, [total]]))
    reps = order[starts]

    fused_pos = positions[reps].copy()
    fused_cov = covariances[reps].copy()

    multi = counts > 1
    if np.any(multi):
        infos = inv3(covariances[order])
        weighted = np.matmul(infos, positions[order][..., None])[..., 0]
        info_sums = np.add.reduceat(infos.reshape(total, 9), starts, axis=0).reshape(-1, 3, 3)
        pos_sums = np.add.reduceat(weighted, starts, axis=0)
        cov_multi = inv3(info_sums[multi])
        cov_multi = 0.5 * (cov_multi + np.transpose(cov_multi, (0, 2, 1)))
        fused_cov[multi] = cov_multi
        fused_pos[multi] = np.matmul(cov_multi, pos_sums[multi][..., None])[..., 0]

    fused = KeypointSet(fused_pos, fused_cov, descriptors[reps], pixels[reps])
    member_covs = None
    if keep_members:
        member_covs = [
            [covariances[order[j]] for j in range(start, start + count)]
            for start, count in zip(starts, counts)
        ]
    return LocalMap(anchor_id, ids, fused, member_covs)


def localize(
    local_map: LocalMap,
    keypoints: KeypointSet,
    prior: PoseGaussian,
    min_matches: int = 10,
    match_config: MatchConfig | None = None,
    ransac_config: RansacConfig | None = None,
    gn_config: GaussNewtonConfig | None = None,
) -> tuple[PoseEstimate, list]:
    """Match current keypoints against the fused map and refine the pose.

    Returns (anchor-from-camera estimate, inlier matches); raises
    LocalizationFailure when fewer than `min_matches` inliers support it.
    """
    matches = match_keypoints(
        local_map.fused_keypoints, keypoints, prior=prior.mean, config=match_config
    )
    if len(matches) < min_matches:
        raise LocalizationFailure(len(matches), min_matches)
    cfg = ransac_config or RansacConfig()
    cfg = replace(cfg, min_inliers=max(cfg.min_inliers, min_matches))
    try:
        result = ransac_pose(matches, local_map.fused_keypoints, keypoints, cfg)
        estimate = refine_pose(
            result.inliers, local_map.fused_keypoints, keypoints, result.transform, gn_config
        )
    except InsufficientInliers as exc:
        raise LocalizationFailure(exc.best_count, min_matches) from exc
    except SingularNormalEquations as exc:
        raise LocalizationFailure(0, min_matches) from exc
    return estimate, result.inliers


def step_state_machine(
    state: RepeatState,
    localized: bool,
    vo_step: PoseGaussian,
    config: RepeatConfig,
    operator_halt: bool = False,
) -> RepeatState:
    """Advance the failure-handling state machine by one frame.

    Success from any driving state returns to LOCALIZED with the distance
    reset; failures accumulate VO distance until `halt_distance` trips SEARCH
    (vehicle commanded to stop). SEARCH exits only on a successful
    localization, or to HALTED on operator input.
    """
    if state.mode == RepeatMode.HALTED:
        return state
    if localized:
        return replace(state, mode=RepeatMode.LOCALIZED, distance_since_localization=0.0)
    if state.mode == RepeatMode.SEARCH:
        if operator_halt:
            return replace(state, mode=RepeatMode.HALTED)
        return state
    step_distance = float(np.linalg.norm(vo_step.mean.translation))
    distance = state.distance_since_localization + step_distance
    if distance > config.halt_distance:
        return replace(state, mode=RepeatMode.SEARCH, distance_since_localization=distance)
    return replace(state, mode=RepeatMode.VO_ONLY, distance_since_localization=distance)


def keyframe_positions_in_anchor(path: TaughtPath, anchor_id: int, ids) -> np.ndarray:
    return np.stack(
        [chained_transform(path, anchor_id, k).mean.translation for k in ids]
    )


def nearest_keyframe(path: TaughtPath, anchor_id: int, pose_estimate: Pose, window: int) -> int:
    """Nearest keyframe to the estimate, searched within +/- window of the anchor."""
    lo = max(0, anchor_id - window)
    hi = min(len(path.keyframes) - 1, anchor_id + window)
    ids = list(range(lo, hi + 1))
    positions = keyframe_positions_in_anchor(path, anchor_id, ids)
    dists = np.linalg.norm(positions - pose_estimate.translation, axis=1)
    return ids[int(np.argmin(dists))]


@dataclass(frozen=True)
class PathFrame:
    """Taught-path geometry at one keyframe, in that keyframe's camera frame."""

    v_here: np.ndarray  # taught vehicle position
    tangent: np.ndarray  # unit path tangent, projected off the ground normal
    left: np.ndarray  # unit left direction (normal x tangent)
    degenerate: bool = False


def path_frame(path: TaughtPath, nearest_id: int) -> PathFrame:
    """Tangent from the neighbouring keyframes' vehicle positions, ground
    normal from the keyframe's vehicle z-axis."""
    t_cv = path.ground_model.T_cv
    cam_of_vehicle = t_cv.translation  # vehicle origin seen in its camera frame

    lo = max(0, nearest_id - 1)
    hi = min(len(path.keyframes) - 1, nearest_id + 1)
    v_lo = se3.apply(chained_transform(path, nearest_id, lo).mean, cam_of_vehicle)
    v_hi = se3.apply(chained_transform(path, nearest_id, hi).mean, cam_of_vehicle)

    up = t_cv.rotation @ np.array([0.0, 0.0, 1.0])
    tangent = v_hi - v_lo
    tangent -= np.dot(tangent, up) * up
    norm = np.linalg.norm(tangent)
    if norm < 1e-12:
        return PathFrame(cam_of_vehicle, np.zeros(3), np.zeros(3), degenerate=True)
    tangent = tangent / norm
    return PathFrame(cam_of_vehicle, tangent, np.cross(up, tangent))


def errors_from_frame(frame: PathFrame, pose_estimate: Pose, t_cv: Pose) -> tuple[float, float]:
    if frame.degenerate:
        return 0.0, 0.0
    v_cur = se3.apply(pose_estimate, t_cv.translation)
    lateral = float(np.dot(v_cur - frame.v_here, frame.left))
    f_cur = pose_estimate.rotation @ (t_cv.rotation @ np.array([1.0, 0.0, 0.0]))
    heading = float(np.arctan2(np.dot(f_cur, frame.left), np.dot(f_cur, frame.tangent)))
    return lateral, heading


def lateral_and_heading_error(
    path: TaughtPath, nearest_id: int, pose_estimate: Pose
) -> tuple[float, float]:
    """Signed lateral offset (positive left) and heading error vs the taught
    path. `pose_estimate` maps current-camera points into the nearest
    keyframe's camera frame."""
    return errors_from_frame(
        path_frame(path, nearest_id), pose_estimate, path.ground_model.T_cv
    )


def lateral_error(path: TaughtPath, nearest_id: int, pose_estimate: Pose) -> float:
    return lateral_and_heading_error(path, nearest_id, pose_estimate)[0]


def rebase_pose(path: TaughtPath, pose: PoseGaussian, old_anchor: int, new_anchor: int) -> PoseGaussian:
    """Re-express an anchor-relative pose in a different anchor frame."""
    if old_anchor == new_anchor:
        return pose
    link = chained_transform(path, new_anchor, old_anchor).mean
    ad = se3.adjoint(link)
    return PoseGaussian(
        se3.compose(link, pose.mean), ad @ pose.covariance @ ad.T
    )
