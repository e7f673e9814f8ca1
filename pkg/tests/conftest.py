import numpy as np
import pytest

from monovtr import se3
from monovtr.ground import GroundModel
from monovtr.se3 import CameraIntrinsics, Pose, PoseGaussian


def random_pose(rng: np.random.Generator, t_scale: float = 1.0) -> Pose:
    return se3.compose(
        se3.exp_se3(np.concatenate([t_scale * rng.standard_normal(3), rng.uniform(-2.0, 2.0, 3)])),
        se3.identity_pose(),
    )


def paper_rig_T_cv(height: float = 1.0, pitch_deg: float = 47.0) -> Pose:
    """Vehicle->camera transform: camera `height` above the footprint, pitched down.

    Vehicle frame: x forward, y left, z up. Camera frame: z optical axis,
    x right, y down.
    """
    a = np.radians(pitch_deg)
    r_cv = np.array(
        [
            [0.0, -1.0, 0.0],
            [-np.sin(a), 0.0, -np.cos(a)],
            [np.cos(a), 0.0, -np.sin(a)],
        ]
    )
    t_cv = -r_cv @ np.array([0.0, 0.0, height])
    return Pose(r_cv, t_cv)


def paper_ground_model(
    sigma_trans: float = 0.10,
    sigma_rot_deg: float = 10.0,
    height: float = 1.0,
    pitch_deg: float = 47.0,
    max_range: float = 10.0,
) -> GroundModel:
    sr = np.radians(sigma_rot_deg)
    cov = np.diag([sigma_trans**2] * 3 + [sr**2] * 3)
    return GroundModel(
        paper_rig_T_cv(height, pitch_deg),
        PoseGaussian(se3.identity_pose(), cov),
        max_range,
    )


def paper_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(400.0, 400.0, 256.0, 192.0, 512, 384)


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
