"""Metric depth for ground-plane features and its 3D uncertainty.

Every feature is assumed to lie in the xy-plane of a local ground frame.
With the camera-from-ground transform T_cg known, the depth of a pixel with
normalized coordinates (p_x, p_y) is the closed form

    z = k1 / (k2 + k3 * p_x + k4 * p_y)

where k1..k4 are polynomial combinations of T_cg entries. Back-projecting
the pixel through the calibrated camera then yields the full 3D point, and
propagating pixel noise plus ground-frame pose uncertainty through the
combined Jacobian yields its 3x3 covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import DegenerateRay, NegativeDepth, OutOfRange
from .se3 import CameraIntrinsics, PixelObservation, Pose, PoseGaussian

_DEGENERATE_DENOM = 1e-9


@dataclass(frozen=True)
class GroundModel:
    """Rig calibration plus the uncertain ground-frame prior.

    T_cv is the fixed vehicle-to-camera transform; T_vg the ground-to-vehicle
    transform with its diagonal uncertainty; max_range cuts off the useless
    near-horizon depths.
    """

    T_cv: Pose
    T_vg: PoseGaussian
    max_range: float = 10.0

    def __post_init__(self):
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        cam_in_ground = se3.apply(se3.inverse(self.T_cg()), np.zeros(3))
        if cam_in_ground[2] <= 0:
            raise ValueError("camera must sit strictly above the ground plane")

    def T_cg(self) -> Pose:
        """Mean camera-from-ground transform."""
        return se3.compose(self.T_cv, self.T_vg.mean)


@dataclass(frozen=True)
class PlaneCoefficients:
    """The four scalars that turn normalized pixel coordinates into depth."""

    k1: float
    k2: float
    k3: float
    k4: float

    @staticmethod
    def from_transform(t_cg: Pose) -> "PlaneCoefficients":
        return plane_coefficients(t_cg)


@dataclass(frozen=True)
class Keypoint3D:
    """A landmark estimate in a camera frame: position, covariance, descriptor."""

    position: np.ndarray
    covariance: np.ndarray
    descriptor: np.ndarray = field(repr=False)
    source_pixel: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).copy()
        cov = np.asarray(self.covariance, dtype=np.float64)
        if pos.shape != (3,) or cov.shape != (3, 3):
            raise ValueError("position must be (3,), covariance (3, 3)")
        cov = 0.5 * (cov + cov.T)
        desc = np.asarray(self.descriptor, dtype=np.float64).copy()
        for arr in (pos, cov, desc):
            arr.setflags(write=False)
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "descriptor", desc)
        object.__setattr__(self, "source_pixel", tuple(float(x) for x in self.source_pixel))


class KeypointSet:
    """Column-packed sequence of Keypoint3D, the pipeline's working currency.

    Behaves like a read-only list of Keypoint3D while storing positions,
    covariances, descriptors and source pixels as contiguous arrays.
    """

    __slots__ = ("positions", "covariances", "descriptors", "source_pixels")

    def __init__(self, positions, covariances, descriptors, source_pixels):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.covariances = np.asarray(covariances, dtype=np.float64).reshape(n, 3, 3)
        self.descriptors = np.asarray(descriptors, dtype=np.float64).reshape(n, -1)
        self.source_pixels = np.asarray(source_pixels, dtype=np.float64).reshape(n, 2)

    @staticmethod
    def empty(descriptor_dim: int) -> "KeypointSet":
        return KeypointSet(
            np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, descriptor_dim)), np.zeros((0, 2))
        )

    @staticmethod
    def from_keypoints(keypoints) -> "KeypointSet":
        if isinstance(keypoints, KeypointSet):
            return keypoints
        kps = list(keypoints)
        if not kps:
            return KeypointSet.empty(0)
        return KeypointSet(
            np.stack([k.position for k in kps]),
            np.stack([k.covariance for k in kps]),
            np.stack([k.descriptor for k in kps]),
            np.array([k.source_pixel for k in kps]),
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> Keypoint3D:
        return Keypoint3D(
            self.positions[i],
            self.covariances[i],
            self.descriptors[i],
            (self.source_pixels[i, 0], self.source_pixels[i, 1]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


def plane_coefficients(t_cg: Pose) -> PlaneCoefficients:
    """Depth coefficients from the camera-from-ground transform.

    T[m][n] below is the m-th row / n-th column of the 3x4 matrix [R | t].
    """
    t = t_cg.matrix()
    k1 = (
        t[0, 0] * (t[1, 1] * t[2, 3] - t[1, 3] * t[2, 1])
        + t[0, 1] * (t[1, 3] * t[2, 0] - t[1, 0] * t[2, 3])
        + t[0, 3] * (t[1, 0] * t[2, 1] - t[1, 1] * t[2, 0])
    )
    k2 = t[0, 0] * t[1, 1] - t[0, 1] * t[1, 0]
    k3 = t[1, 0] * t[2, 1] - t[1, 1] * t[2, 0]
    k4 = t[0, 1] * t[2, 0] - t[0, 0] * t[2, 1]
    return PlaneCoefficients(float(k1), float(k2), float(k3), float(k4))


def depth_from_normalized(
    coeffs: PlaneCoefficients, p_x: float, p_y: float, max_range: float = np.inf
) -> float:
    """Depth of the ground intersection along the pixel ray (p_x, p_y, 1)."""
    denom = coeffs.k2 + coeffs.k3 * p_x + coeffs.k4 * p_y
    if abs(denom) < _DEGENERATE_DENOM:
        raise DegenerateRay(f"denominator {denom:.3e} below threshold")
    depth = coeffs.k1 / denom
    if depth <= 0.0:
        raise NegativeDepth(f"depth {depth:.3e} is not positive")
    if depth > max_range:
        raise OutOfRange(f"depth {depth:.3f} exceeds max_range {max_range}")
    return depth


def pixel_jacobian(
    coeffs: PlaneCoefficients, k: CameraIntrinsics, position: np.ndarray
) -> np.ndarray:
    """d(position)/d(pixel), 3x2, evaluated at a back-projected point.

    Derived by differentiating the closed-form depth: d z / d p = -k * z^2 / k1,
    which puts a minus sign on every k3/k4 term.
    """
    x, y, z = position
    k1, k3, k4 = coeffs.k1, coeffs.k3, coeffs.k4
    pref = z / k1
    return pref * np.array(
        [
            [(k1 - k3 * x) / k.f_u, -k4 * x / k.f_v],
            [-k3 * y / k.f_u, (k1 - k4 * y) / k.f_v],
            [-k3 * z / k.f_u, -k4 * z / k.f_v],
        ]
    )


def ground_pose_jacobian(model: GroundModel, position) -> np.ndarray:
    """d(position)/d(T_vg), 3x6: [I | -skew(position)] @ Ad(T_cv).

    Jacobian of the point-transport map: the feature's ground coordinates are
    held fixed while the ground-to-vehicle transform takes a left perturbation.
    """
    position = np.asarray(position, dtype=np.float64)
    j = np.hstack([np.eye(3), -se3.skew(position)])
    return j @ se3.adjoint(model.T_cv)


def jacobian_wrt_pixel(
    model: GroundModel, k: CameraIntrinsics, obs: PixelObservation
) -> np.ndarray:
    """Pixel Jacobian at an observation (propagates depth errors from the model)."""
    coeffs = plane_coefficients(model.T_cg())
    p_x, p_y = k.normalize(obs.u, obs.v)
    depth = depth_from_normalized(coeffs, float(p_x), float(p_y), model.max_range)
    position = depth * np.array([p_x, p_y, 1.0])
    return pixel_jacobian(coeffs, k, position)


def jacobian_wrt_ground_pose(model: GroundModel, point) -> np.ndarray:
    return ground_pose_jacobian(model, point)


def backproject(model: GroundModel, k: CameraIntrinsics, obs: PixelObservation) -> Keypoint3D:
    """Lift one pixel observation to a 3D keypoint with covariance.

    The covariance combines pixel noise (diag sigma_u^2, sigma_v^2) and the
    ground-frame pose uncertainty through the stacked 3x8 Jacobian.
    """
    coeffs = plane_coefficients(model.T_cg())
    p_x, p_y = k.normalize(obs.u, obs.v)
    depth = depth_from_normalized(coeffs, float(p_x), float(p_y), model.max_range)
    position = depth * np.array([float(p_x), float(p_y), 1.0])
    g_pix = pixel_jacobian(coeffs, k, position)
    g_pose = ground_pose_jacobian(model, position)
    r_pix = np.diag([obs.sigma_u**2, obs.sigma_v**2])
    cov = g_pix @ r_pix @ g_pix.T + g_pose @ model.T_vg.covariance @ g_pose.T
    return Keypoint3D(position, cov, obs.descriptor, (obs.u, obs.v))


def backproject_frame(
    model: GroundModel,
    k: CameraIntrinsics,
    uv: np.ndarray,
    sigmas: np.ndarray,
    descriptors: np.ndarray,
) -> tuple[KeypointSet, np.ndarray]:
    """Vectorized backprojection of a whole frame.

    Observations whose rays are degenerate, above the horizon, or beyond
    max_range are dropped. Returns the surviving keypoints and the indices
    of the observations they came from.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    n = len(uv)
    if n == 0:
        return KeypointSet.empty(descriptors.shape[1] if descriptors.ndim == 2 else 0), np.zeros(
            0, dtype=np.intp
        )
    coeffs = plane_coefficients(model.T_cg())
    p_x, p_y = k.normalize(uv[:, 0], uv[:, 1])
    denom = coeffs.k2 + coeffs.k3 * p_x + coeffs.k4 * p_y
    with np.errstate(divide="ignore", invalid="ignore"):
        depth = coeffs.k1 / denom
    keep = (np.abs(denom) >= _DEGENERATE_DENOM) & (depth > 0.0) & (depth <= model.max_range)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return KeypointSet.empty(descriptors.shape[1]), idx

    px, py, z = p_x[idx], p_y[idx], depth[idx]
    pos = np.column_stack([z * px, z * py, z])

    k1, k3, k4 = coeffs.k1, coeffs.k3, coeffs.k4
    pref = z / k1
    g_pix = np.empty((len(idx), 3, 2))
    g_pix[:, 0, 0] = pref * (k1 - k3 * pos[:, 0]) / k.f_u
    g_pix[:, 0, 1] = pref * (-k4 * pos[:, 0]) / k.f_v
    g_pix[:, 1, 0] = pref * (-k3 * pos[:, 1]) / k.f_u
    g_pix[:, 1, 1] = pref * (k1 - k4 * pos[:, 1]) / k.f_v
    g_pix[:, 2, 0] = pref * (-k3 * z) / k.f_u
    g_pix[:, 2, 1] = pref * (-k4 * z) / k.f_v

    sig = np.asarray(sigmas, dtype=np.float64).reshape(-1, 2)[idx]
    cov_pix = np.matmul(g_pix * (sig**2)[:, None, :], np.transpose(g_pix, (0, 2, 1)))

    ad = se3.adjoint(model.T_cv)
    g_pose = np.empty((len(idx), 3, 6))
    g_pose[:, :, :3] = np.eye(3)
    g_pose[:, :, 3:] = -_skew_many(pos)
    g_pose = g_pose @ ad
    cov_pose = np.matmul(
        np.matmul(g_pose, model.T_vg.covariance), np.transpose(g_pose, (0, 2, 1))
    )

    cov = cov_pix + cov_pose
    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return KeypointSet(pos, cov, np.asarray(descriptors)[idx], uv[idx]), idx


def _skew_many(v: np.ndarray) -> np.ndarray:
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out
