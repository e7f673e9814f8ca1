"""Descriptor matching with spatial gating, and 3-point RANSAC.

Matching is mutual-nearest-neighbour in descriptor space. When a prior
transform between the two frames is available, candidate pairs must first
pass a chi-square(3) Mahalanobis gate computed under the summed keypoint
covariances; descriptor ranking then runs over the surviving pairs only.

RANSAC samples minimal 3-point correspondences, solves the rigid alignment
in closed form (orthogonal Procrustes on the centred triad), and scores
inliers with the same Mahalanobis metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InsufficientInliers
from .ground import KeypointSet
from .se3 import Pose

# 0.99 quantile of chi-square with 3 dof.
CHI2_3_99 = 11.34


@dataclass(frozen=True)
class MatchConfig:
    gate_chi2: float = CHI2_3_99
    # Absolute ceiling on descriptor distance; pairs beyond it never match.
    # Descriptors are unit vectors, so random pairs concentrate near sqrt(2);
    # 0.35 keeps every stable match while rejecting near-twin coincidences.
    max_descriptor_distance: float = 0.35


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 500
    inlier_chi2: float = CHI2_3_99
    min_inliers: int = 10
    confidence: float = 0.99
    seed: int = 0


class Match(NamedTuple):
    """One correspondence between keypoint lists a and b."""

    index_a: int
    index_b: int
    descriptor_distance: float
    mahalanobis: float = 0.0


@dataclass(frozen=True)
class RansacResult:
    transform: Pose  # maps frame-b points into frame a
    inliers: list[Match] = field(default_factory=list)
    iterations_used: int = 0


def inv3(m: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a stack (..., 3, 3) of well-conditioned matrices."""
    a, b, c = m[..., 0, 0], m[..., 0, 1], m[..., 0, 2]
    d, e, f = m[..., 1, 0], m[..., 1, 1], m[..., 1, 2]
    g, h, i = m[..., 2, 0], m[..., 2, 1], m[..., 2, 2]
    co_a = e * i - f * h
    co_b = c * h - b * i
    co_c = b * f - c * e
    det = a * co_a + d * co_b + g * co_c
    inv = np.empty_like(m)
    inv[..., 0, 0] = co_a
    inv[..., 0, 1] = co_b
    inv[..., 0, 2] = co_c
    inv[..., 1, 0] = f * g - d * i
    inv[..., 1, 1] = a * i - c * g
    inv[..., 1, 2] = c * d - a * f
    inv[..., 2, 0] = d * h - e * g
    inv[..., 2, 1] = b * g - a * h
    inv[..., 2, 2] = a * e - b * d
    return inv / det[..., None, None]


def mahalanobis_sq(residuals: np.ndarray, covariances: np.ndarray) -> np.ndarray:
    """Batched r^T S^-1 r for (N, 3) residuals and (N, 3, 3) covariances."""
    sol = np.matmul(inv3(covariances), residuals[..., None])[..., 0]
    return np.sum(residuals * sol, axis=-1)


def _descriptor_distance_sq(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(da**2, axis=1)[:, None]
        + np.sum(db**2, axis=1)[None, :]
        - 2.0 * (da @ db.T)
    )
    return np.maximum(sq, 0.0)


def match_keypoints(a, b, prior: Pose | None = None, config: MatchConfig | None = None) -> list[Match]:
    """Mutual-nearest-neighbour matches from b into a, optionally prior-gated.

    With a prior transform (b -> a), pairs whose Mahalanobis distance under
    summed covariances exceeds the gate are removed before descriptor ranking.
    """
    config = config or MatchConfig()
    a = KeypointSet.from_keypoints(a)
    b = KeypointSet.from_keypoints(b)
    if len(a) == 0 or len(b) == 0:
        return []
    if a.descriptors.shape[1] != b.descriptors.shape[1]:
        raise ValueError("descriptor lengths disagree")

    if prior is None:
        dist_sq = _descriptor_distance_sq(a.descriptors, b.descriptors)
        masked = np.where(dist_sq > config.max_descriptor_distance**2, np.inf, dist_sq)
        rows = np.argmin(masked, axis=1)
        cols = np.argmin(masked, axis=0)
        ii = np.flatnonzero(cols[rows] == np.arange(len(a)))
        ii = ii[np.isfinite(masked[ii, rows[ii]])]
        dists = _exact_distances(a.descriptors, b.descriptors, ii, rows[ii])
        return [Match(int(i), int(j), float(d), 0.0) for i, j, d in zip(ii, rows[ii], dists)]
    return _match_gated(a, b, prior, config)


def _exact_distances(da, db, ii, jj) -> np.ndarray:
    diff = da[ii] - db[jj]
    return np.sqrt(np.sum(diff * diff, axis=1))


def _match_gated(a: KeypointSet, b: KeypointSet, prior: Pose, config: MatchConfig) -> list[Match]:
    """Gated mutual-NN, evaluated lazily.

    Equivalent to masking every gate-failing pair out of the descriptor
    distance matrix before taking row/column argmins, but the exact
    Mahalanobis test only ever runs on argmin winners: a failed winner is
    masked and the argmin repeated, so each row settles on the nearest
    descriptor among gate-passing candidates without testing the rest.
    """
    gate = config.gate_chi2
    pb = b.positions @ prior.rotation.T + prior.translation
    qb = np.matmul(np.matmul(prior.rotation, b.covariances), prior.rotation.T)

    # Ranking runs in float32 for speed; gate tests and reported distances
    # stay float64. Ceiling in the same precision as the ranking matrix.
    da = a.descriptors.astype(np.float32)
    db = b.descriptors.astype(np.float32)
    d2 = -2.0 * (da @ db.T)
    d2 += np.sum(da**2, axis=1)[:, None]
    d2 += np.sum(db**2, axis=1)[None, :]
    ceil_sq = np.float32(config.max_descriptor_distance**2)

    passed = np.zeros(d2.shape, dtype=bool)
    mahal_sq: dict[int, float] = {}
    n_cols = d2.shape[1]

    def exact_pass(pi: np.ndarray, pj: np.ndarray) -> np.ndarray:
        res = a.positions[pi] - pb[pj]
        m_sq = mahalanobis_sq(res, a.covariances[pi] + qb[pj])
        ok = m_sq <= gate
        passed[pi[ok], pj[ok]] = True
        for i, j, m in zip(pi[ok], pj[ok], m_sq[ok]):
            mahal_sq[int(i) * n_cols + int(j)] = float(m)
        return ok

    def settle(axis: int) -> np.ndarray:
        size = d2.shape[0] if axis == 1 else d2.shape[1]
        live = np.arange(size)
        winners = np.full(size, -1, dtype=np.intp)
        while len(live):
            full = len(live) == size
            if axis == 1:
                arg = np.argmin(d2 if full else d2[live, :], axis=1)
                ii, jj = live, arg
            else:
                arg = np.argmin(d2 if full else d2[:, live], axis=0)
                ii, jj = arg, live
            vals = d2[ii, jj]
            keep = np.isfinite(vals) & (vals <= ceil_sq)
            ii, jj = ii[keep], jj[keep]
            rows = ii if axis == 1 else jj
            known = passed[ii, jj]
            if np.any(~known):
                ok = exact_pass(ii[~known], jj[~known])
                d2[ii[~known][~ok], jj[~known][~ok]] = np.inf
            settled = known.copy()
            settled[~known] = ok if np.any(~known) else False
            winners[rows[settled]] = (jj if axis == 1 else ii)[settled]
            live = rows[~settled]
        return winners

    row_winner = settle(axis=1)
    col_winner = settle(axis=0)
    ii = np.flatnonzero(row_winner >= 0)
    ii = ii[col_winner[row_winner[ii]] == ii]
    jj = row_winner[ii]
    dists = _exact_distances(a.descriptors, b.descriptors, ii, jj)
    return [
        Match(int(i), int(j), float(d), mahal_sq[int(i) * n_cols + int(j)])
        for i, j, d in zip(ii, jj, dists)
    ]


def _solve_rigid_raw(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    c_src = src.mean(axis=0)
    c_dst = dst.mean(axis=0)
    h = (src - c_src).T @ (dst - c_dst)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, c_dst - r @ c_src


def solve_rigid_triad(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping src points onto dst points."""
    r, t = _solve_rigid_raw(src, dst)
    return Pose(r, t)


def _triad_degenerate(points: np.ndarray, min_altitude: float = 1e-6) -> bool:
    e01 = points[1] - points[0]
    e02 = points[2] - points[0]
    e12 = points[2] - points[1]
    area2 = np.linalg.norm(np.cross(e01, e02))
    longest = max(np.linalg.norm(e01), np.linalg.norm(e02), np.linalg.norm(e12))
    if longest < min_altitude:
        return True
    return (area2 / longest) < min_altitude


def ransac_pose(matches, a, b, config: RansacConfig | None = None) -> RansacResult:
    """Robust 6DOF alignment of matched keypoints (b -> a).

    Adaptive iteration count N = log(1 - confidence) / log(1 - w^3) with w the
    best inlier ratio so far, capped at max_iterations. Collinear samples are
    skipped and resampled. Deterministic given the seed; ties between equally
    good hypotheses go to the earliest iteration.
    """
    config = config or RansacConfig()
    matches = list(matches)
    if len(matches) < 3:
        raise InsufficientInliers(len(matches), max(3, config.min_inliers))
    a = KeypointSet.from_keypoints(a)
    b = KeypointSet.from_keypoints(b)
    ia = np.array([m.index_a for m in matches], dtype=np.intp)
    ib = np.array([m.index_b for m in matches], dtype=np.intp)
    pa, qa = a.positions[ia], a.covariances[ia]
    pb, qb = b.positions[ib], b.covariances[ib]
    n = len(matches)

    rng = np.random.default_rng(config.seed)
    best: tuple[np.ndarray, np.ndarray] | None = None
    best_count = 0
    needed = config.max_iterations
    it = 0
    while it < min(needed, config.max_iterations):
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        if _triad_degenerate(pa[idx]) or _triad_degenerate(pb[idx]):
            continue
        r, t = _solve_rigid_raw(pb[idx], pa[idx])
        count = int(np.sum(_score_raw(r, t, pa, qa, pb, qb) <= config.inlier_chi2))
        if count > best_count:
            best_count = count
            best = (r, t)
            w = count / n
            if w >= 1.0:
                needed = it
            else:
                needed = int(
                    np.ceil(np.log(1.0 - config.confidence) / np.log(1.0 - w**3))
                )

    if best is None or best_count < config.min_inliers:
        raise InsufficientInliers(best_count, config.min_inliers)

    # Consensus polish: re-solve on the full inlier set, keep it only if
    # support does not drop. Two rounds are plenty.
    for _ in range(2):
        m_sq = _score_raw(*best, pa, qa, pb, qb)
        support = np.flatnonzero(m_sq <= config.inlier_chi2)
        refined = _solve_rigid_raw(pb[support], pa[support])
        refined_sq = _score_raw(*refined, pa, qa, pb, qb)
        if int(np.sum(refined_sq <= config.inlier_chi2)) < len(support):
            break
        best = refined

    m_sq = _score_raw(*best, pa, qa, pb, qb)
    inliers = [
        Match(matches[i].index_a, matches[i].index_b, matches[i].descriptor_distance, float(m_sq[i]))
        for i in np.flatnonzero(m_sq <= config.inlier_chi2)
    ]
    if len(inliers) < config.min_inliers:
        raise InsufficientInliers(len(inliers), config.min_inliers)
    return RansacResult(Pose(best[0], best[1]), inliers, it)


def _score_raw(rot: np.ndarray, trans: np.ndarray, pa, qa, pb, qb) -> np.ndarray:
    res = pa - (pb @ rot.T + trans)
    s = qa + np.matmul(np.matmul(rot, qb), rot.T)
    return mahalanobis_sq(res, s)


def _score(pose: Pose, pa, qa, pb, qb) -> np.ndarray:
    return _score_raw(pose.rotation, pose.translation, pa, qa, pb, qb)
