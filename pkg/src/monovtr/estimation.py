"""Covariance-weighted Gauss-Newton pose refinement and VO compounding.

The cost being minimized is the 3D point-to-point Mahalanobis error

    sum_i e_i^T W_i e_i,   e_i = z_i^a - T(z_i^b),
    W_i = (Q_i^a + R Q_i^b R^T)^-1,

updated multiplicatively on the left, T <- exp(delta) o T. Light Levenberg
damping guards the rare cost increase; with clean data the behaviour is
plain Gauss-Newton.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import se3
from .errors import SingularNormalEquations
from .ground import KeypointSet
from .matching import inv3
from .se3 import Pose, PoseGaussian


@dataclass(frozen=True)
class GaussNewtonConfig:
    max_iterations: int = 20
    convergence_tol: float = 1e-8
    damping: float = 1e-6

    def __post_init__(self):
        if self.max_iterations < 1 or self.convergence_tol <= 0 or self.damping < 0:
            raise ValueError("invalid Gauss-Newton configuration")


@dataclass(frozen=True)
class PoseEstimate:
    transform: PoseGaussian
    iterations: int
    final_cost: float
    converged: bool


def _weights(rot: np.ndarray, qa: np.ndarray, qb: np.ndarray) -> np.ndarray:
    s = qa + np.matmul(np.matmul(rot, qb), rot.T)
    return inv3(s)


def _cost(pose: Pose, pa, qa, pb, qb) -> tuple[float, np.ndarray, np.ndarray]:
    res = pa - (pb @ pose.rotation.T + pose.translation)
    w = _weights(pose.rotation, qa, qb)
    wr = np.matmul(w, res[..., None])[..., 0]
    c = float(np.sum(res * wr))
    return c, res, w


def refine_pose(
    inliers,
    a,
    b,
    initial: Pose,
    config: GaussNewtonConfig | None = None,
) -> PoseEstimate:
    """Refine the b->a transform from inlying 3D-3D correspondences.

    Raises SingularNormalEquations on rank-deficient geometry. If damping
    retries cannot find a cost-decreasing step, the best iterate is returned
    with converged=False; accepted iterations never increase the cost.
    """
    config = config or GaussNewtonConfig()
    inliers = list(inliers)
    if len(inliers) < 3:
        raise SingularNormalEquations(f"{len(inliers)} correspondences, need >= 3")
    a = KeypointSet.from_keypoints(a)
    b = KeypointSet.from_keypoints(b)
    ia = np.array([m.index_a for m in inliers], dtype=np.intp)
    ib = np.array([m.index_b for m in inliers], dtype=np.intp)
    pa, qa = a.positions[ia], a.covariances[ia]
    pb, qb = b.positions[ib], b.covariances[ib]

    pose = initial
    cost, res, w = _cost(pose, pa, qa, pb, qb)
    lam = config.damping
    iterations = 0
    converged = False
    n = len(inliers)

    jac = np.zeros((n, 3, 6))
    jac[:, :, :3] = -np.eye(3)

    for _ in range(config.max_iterations):
        iterations += 1
        tb = pb @ pose.rotation.T + pose.translation
        # e = za - T(zb); d e / d delta = [-I | +skew(T zb)] under left updates.
        _fill_rotation_block(jac, tb)

        wj = np.matmul(w, jac)
        h = np.tensordot(jac, wj, axes=([0, 1], [0, 1]))
        g = np.tensordot(res, wj, axes=([0, 1], [0, 1]))

        accepted = False
        for retry in range(8):
            try:
                delta = np.linalg.solve(h + lam * np.eye(6), -g)
            except np.linalg.LinAlgError as exc:
                raise SingularNormalEquations("normal equations not solvable") from exc
            if not np.all(np.isfinite(delta)):
                raise SingularNormalEquations("non-finite update")
            if retry == 0 and np.linalg.norm(delta) < config.convergence_tol:
                converged = True  # already at a stationary point
                break
            candidate = se3.compose(se3.exp_se3(delta), pose)
            new_cost, new_res, new_w = _cost(candidate, pa, qa, pb, qb)
            if new_cost <= cost:
                accepted = True
                break
            lam = max(lam, 1e-9) * 10.0
        if converged or not accepted:
            break
        pose, cost, res, w = candidate, new_cost, new_res, new_w
        lam = max(lam * 0.1, config.damping)
        if np.linalg.norm(delta) < config.convergence_tol:
            converged = True
            break

    h = _final_information(pose, pb, qa, qb, w)
    try:
        cov = np.linalg.inv(h)
    except np.linalg.LinAlgError as exc:
        raise SingularNormalEquations("final Hessian not invertible") from exc
    cov = 0.5 * (cov + cov.T)
    return PoseEstimate(PoseGaussian(pose, cov), iterations, cost, converged)


def _fill_rotation_block(jac: np.ndarray, tb: np.ndarray) -> None:
    """Write +skew(tb) into columns 3:6 of the per-point error Jacobians."""
    jac[:, 0, 4] = -tb[:, 2]
    jac[:, 0, 5] = tb[:, 1]
    jac[:, 1, 3] = tb[:, 2]
    jac[:, 1, 5] = -tb[:, 0]
    jac[:, 2, 3] = -tb[:, 1]
    jac[:, 2, 4] = tb[:, 0]


def _final_information(pose: Pose, pb, qa, qb, w) -> np.ndarray:
    n = len(pb)
    tb = pb @ pose.rotation.T + pose.translation
    jac = np.zeros((n, 3, 6))
    jac[:, :, :3] = -np.eye(3)
    _fill_rotation_block(jac, tb)
    return np.tensordot(jac, np.matmul(w, jac), axes=([0, 1], [0, 1]))


def chain_vo(previous: PoseGaussian, step: PoseGaussian) -> PoseGaussian:
    """Compound a VO step onto an accumulated pose, first order in the adjoint."""
    mean = se3.compose(previous.mean, step.mean)
    ad = se3.adjoint(previous.mean)
    cov = previous.covariance + ad @ step.covariance @ ad.T
    return PoseGaussian(mean, 0.5 * (cov + cov.T))


def invert_gaussian(g: PoseGaussian) -> PoseGaussian:
    """Gaussian of the inverse transform under the left-perturbation convention."""
    inv_mean = se3.inverse(g.mean)
    ad = se3.adjoint(inv_mean)
    cov = ad @ g.covariance @ ad.T
    return PoseGaussian(inv_mean, 0.5 * (cov + cov.T))
