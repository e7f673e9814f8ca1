"""SE(3) rigid-body math, Gaussians on SE(3), and the pinhole camera model.

Conventions used by every module in this package:

* A transform ``T_ab`` maps points from frame ``b`` into frame ``a``:
  ``p_a = R @ p_b + t``.
* 6-vectors over the SE(3) generators are ordered translation (x, y, z)
  followed by rotation (x, y, z).
* Gaussian poses perturb on the left: ``T = exp(xi) o mean`` with
  ``xi ~ N(0, covariance)``. This is the convention under which the
  adjoint transports covariances as ``Ad(T) @ S @ Ad(T).T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth, NonPSDCovariance

_ROT_TOL = 1e-6
_SMALL_ANGLE = 1e-6


def _as_matrix(value, shape, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class Pose:
    """Rigid transform: 3x3 rotation and a translation in metres."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = _as_matrix(self.rotation, (3, 3), "rotation")
        t = _as_matrix(self.translation, (3,), "translation")
        drift = np.linalg.norm(r.T @ r - np.eye(3))
        if drift > _ROT_TOL:
            raise ValueError(f"rotation is not orthonormal (drift {drift:.3e})")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation has negative determinant")
        r = r.copy()
        t = t.copy()
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def matrix(self) -> np.ndarray:
        """Return the 3x4 matrix [R | t]."""
        return np.hstack([self.rotation, self.translation[:, None]])


@dataclass(frozen=True)
class PoseGaussian:
    """Gaussian on SE(3): mean pose plus 6x6 covariance over left perturbations."""

    mean: Pose
    covariance: np.ndarray

    def __post_init__(self):
        cov = _as_matrix(self.covariance, (6, 6), "covariance")
        if np.max(np.abs(cov - cov.T)) > 1e-9:
            raise ValueError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        if np.min(np.linalg.eigvalsh(cov)) < -1e-8:
            raise ValueError("covariance has a significantly negative eigenvalue")
        cov.setflags(write=False)
        object.__setattr__(self, "covariance", cov)

    @staticmethod
    def certain(mean: Pose) -> "PoseGaussian":
        return PoseGaussian(mean, np.zeros((6, 6)))


@dataclass(frozen=True)
class CameraIntrinsics:
    """Ideal pinhole camera: focal lengths, principal point and image size in pixels."""

    f_u: float
    f_v: float
    c_u: float
    c_v: float
    width: int
    height: int

    def __post_init__(self):
        if self.f_u <= 0 or self.f_v <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.c_u < self.width and 0 < self.c_v < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.f_u, 0.0, self.c_u], [0.0, self.f_v, self.c_v], [0.0, 0.0, 1.0]]
        )

    def normalize(self, u, v):
        """Pixel coordinates -> normalized image-plane coordinates."""
        return (np.asarray(u) - self.c_u) / self.f_u, (np.asarray(v) - self.c_v) / self.f_v


@dataclass(frozen=True)
class PixelObservation:
    """A detected feature: sub-pixel location, per-axis sigma, and a descriptor."""

    u: float
    v: float
    sigma_u: float
    sigma_v: float
    descriptor: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.sigma_u <= 0 or self.sigma_v <= 0:
            raise ValueError("pixel sigmas must be positive")
        d = np.asarray(self.descriptor, dtype=np.float64).copy()
        d.setflags(write=False)
        object.__setattr__(self, "descriptor", d)


def _pose_trusted(rotation: np.ndarray, translation: np.ndarray) -> Pose:
    """Construct a Pose from matrices that are valid by construction.

    Skips the orthonormality re-check; callers guarantee the invariant
    (products/transposes of orthonormal matrices, Rodrigues outputs).
    """
    p = object.__new__(Pose)
    rotation = rotation.copy()
    translation = np.asarray(translation, dtype=np.float64).copy()
    rotation.setflags(write=False)
    translation.setflags(write=False)
    object.__setattr__(p, "rotation", rotation)
    object.__setattr__(p, "translation", translation)
    return p


def identity_pose() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def skew(v) -> np.ndarray:
    """Cross-product matrix: skew(v) @ w == cross(v, w)."""
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def compose(a: Pose, b: Pose) -> Pose:
    """Apply b then a: p_out = a(b(p))."""
    r = a.rotation @ b.rotation
    # Long chains accumulate drift; re-orthonormalize once it is measurable.
    if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-9:
        u, _, vt = np.linalg.svd(r)
        r = u @ vt
    return _pose_trusted(r, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    return _pose_trusted(p.rotation.T.copy(), -(p.rotation.T @ p.translation))


def apply(p: Pose, points) -> np.ndarray:
    """Transform one (3,) point or a stack (N, 3) of points."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        return p.rotation @ pts + p.translation
    return pts @ p.rotation.T + p.translation


def adjoint(p: Pose) -> np.ndarray:
    """6x6 adjoint, block form [[R, skew(t) R], [0, R]] in translation-first order."""
    out = np.zeros((6, 6))
    out[:3, :3] = p.rotation
    out[:3, 3:] = skew(p.translation) @ p.rotation
    out[3:, 3:] = p.rotation
    return out


def so3_exp(theta) -> np.ndarray:
    """Rodrigues formula with a series fallback near zero angle."""
    theta = np.asarray(theta, dtype=np.float64)
    angle = np.linalg.norm(theta)
    k = skew(theta)
    k2 = k @ k
    if angle < _SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k2
    s, c = np.sin(angle), np.cos(angle)
    return np.eye(3) + (s / angle) * k + ((1.0 - c) / angle**2) * k2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of an orthonormal matrix, |theta| in [0, pi]."""
    trace = np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    if angle < _SMALL_ANGLE:
        return 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if np.pi - angle < 1e-6:
        # Near pi the antisymmetric part vanishes; recover the axis from R + I.
        m = 0.5 * (r + np.eye(3))
        axis = np.sqrt(np.maximum(np.diagonal(m), 0.0))
        i = int(np.argmax(axis))
        if axis[i] > 0:
            axis = m[i] / axis[i]
            axis /= np.linalg.norm(axis)
        sign_probe = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        if np.dot(sign_probe, axis) < 0:
            axis = -axis
        return angle * axis
    factor = angle / (2.0 * np.sin(angle))
    return factor * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])


def _so3_left_jacobian(theta: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(theta)
    k = skew(theta)
    k2 = k @ k
    if angle < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    a2 = angle * angle
    return (
        np.eye(3)
        + ((1.0 - np.cos(angle)) / a2) * k
        + ((angle - np.sin(angle)) / (a2 * angle)) * k2
    )


def _so3_left_jacobian_inv(theta: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(theta)
    k = skew(theta)
    k2 = k @ k
    if angle < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k2 / 12.0
    half = 0.5 * angle
    coeff = (1.0 - half / np.tan(half)) / (angle * angle)
    return np.eye(3) - 0.5 * k + coeff * k2


def exp_se3(xi) -> Pose:
    """SE(3) exponential of a translation-first 6-vector."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, theta = xi[:3], xi[3:]
    return _pose_trusted(so3_exp(theta), _so3_left_jacobian(theta) @ rho)


def log_se3(p: Pose) -> np.ndarray:
    theta = so3_log(p.rotation)
    rho = _so3_left_jacobian_inv(theta) @ p.translation
    return np.concatenate([rho, theta])


def rotation_angle(r: np.ndarray) -> float:
    """Magnitude of the rotation in radians."""
    return float(np.arccos(np.clip((np.trace(r) - 1.0) * 0.5, -1.0, 1.0)))


def sample_pose_gaussian(g: PoseGaussian, seed: int) -> Pose:
    """Draw exp(xi) o mean with xi ~ N(0, covariance); deterministic in seed."""
    factor = _covariance_factor(g.covariance)
    rng = np.random.default_rng(seed)
    xi = factor @ rng.standard_normal(6)
    return compose(exp_se3(xi), g.mean)


def _covariance_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    try:
        vals, vecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - numpy internal failure
        raise NonPSDCovariance("eigendecomposition failed") from exc
    if np.min(vals) < -1e-8:
        raise NonPSDCovariance(f"negative eigenvalue {np.min(vals):.3e}")
    return vecs * np.sqrt(np.maximum(vals, 0.0))


def project(k: CameraIntrinsics, point) -> tuple[float, float]:
    """Pinhole projection of a camera-frame point with positive depth."""
    x, y, z = np.asarray(point, dtype=np.float64)
    if z <= 0.0:
        raise NonPositiveDepth(f"point depth {z} is not positive")
    return k.f_u * x / z + k.c_u, k.f_v * y / z + k.c_v


def project_many(k: CameraIntrinsics, points: np.ndarray) -> np.ndarray:
    """Vectorized projection; caller guarantees positive depths."""
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    return np.column_stack([k.f_u * pts[:, 0] / z + k.c_u, k.f_v * pts[:, 1] / z + k.c_v])


# Batched SO(3) maps for Monte-Carlo oracles and the simulator hot path.


def so3_exp_many(thetas: np.ndarray) -> np.ndarray:
    """(N, 3) rotation vectors -> (N, 3, 3) rotation matrices."""
    thetas = np.asarray(thetas, dtype=np.float64)
    n = thetas.shape[0]
    angle = np.linalg.norm(thetas, axis=1)
    k = np.zeros((n, 3, 3))
    k[:, 0, 1] = -thetas[:, 2]
    k[:, 0, 2] = thetas[:, 1]
    k[:, 1, 0] = thetas[:, 2]
    k[:, 1, 2] = -thetas[:, 0]
    k[:, 2, 0] = -thetas[:, 1]
    k[:, 2, 1] = thetas[:, 0]
    k2 = k @ k
    small = angle < _SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    c1 = np.where(small, 1.0, np.sin(safe) / safe)
    c2 = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return np.eye(3)[None] + c1[:, None, None] * k + c2[:, None, None] * k2


def so3_log_many(rs: np.ndarray) -> np.ndarray:
    """(N, 3, 3) rotation matrices -> (N, 3) rotation vectors (angles < pi - 1e-6)."""
    rs = np.asarray(rs, dtype=np.float64)
    trace = np.clip((rs[:, 0, 0] + rs[:, 1, 1] + rs[:, 2, 2] - 1.0) * 0.5, -1.0, 1.0)
    angle = np.arccos(trace)
    vee = 0.5 * np.column_stack(
        [rs[:, 2, 1] - rs[:, 1, 2], rs[:, 0, 2] - rs[:, 2, 0], rs[:, 1, 0] - rs[:, 0, 1]]
    )
    small = angle < _SMALL_ANGLE
    safe = np.where(small, 1.0, angle)
    factor = np.where(small, 1.0, safe / np.sin(safe))
    return vee * factor[:, None]
