import numpy as np
import pytest

from monovtr import ground, se3
from monovtr.errors import DegenerateRay, NegativeDepth, OutOfRange
from monovtr.ground import (
    GroundModel,
    Keypoint3D,
    KeypointSet,
    backproject,
    backproject_frame,
    depth_from_normalized,
    jacobian_wrt_ground_pose,
    jacobian_wrt_pixel,
    plane_coefficients,
)
from monovtr.se3 import CameraIntrinsics, PixelObservation, Pose, PoseGaussian

from conftest import paper_ground_model, paper_intrinsics, paper_rig_T_cv


def nadir_T_cg(height: float) -> Pose:
    """Camera looking straight down from `height`, x-axes aligned."""
    return Pose(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, height]))


def nadir_model(height: float = 1.0, sigma_trans=0.10, sigma_rot_deg=10.0) -> GroundModel:
    sr = np.radians(sigma_rot_deg)
    cov = np.diag([sigma_trans**2] * 3 + [sr**2] * 3)
    return GroundModel(nadir_T_cg(height), PoseGaussian(se3.identity_pose(), cov), 10.0)


def ray_plane_depth(t_cg: Pose, p_x: float, p_y: float) -> float:
    """Independent oracle: parametrize the pixel ray in the ground frame and
    solve for the z=0 crossing. The parameter equals the camera-frame depth."""
    t_gc = se3.inverse(t_cg)
    origin = t_gc.translation
    direction = t_gc.rotation @ np.array([p_x, p_y, 1.0])
    return -origin[2] / direction[2]


def random_looking_down_T_cg(rng) -> Pose:
    """Random camera pose above the plane whose optical axis hits the ground."""
    while True:
        r = se3.so3_exp(rng.uniform(-np.pi, np.pi, 3))
        cam_pos = np.array([rng.uniform(-5, 5), rng.uniform(-5, 5), rng.uniform(0.3, 4.0)])
        # optical axis in ground coordinates is row-wise inverse: R^T e_z
        axis = r.T @ np.array([0.0, 0.0, 1.0])
        if axis[2] < -0.2:  # pointing down far enough to be useful
            return Pose(r, -(r @ cam_pos))


class TestPlaneCoefficients:
    def test_nadir_depth_is_height(self):
        coeffs = plane_coefficients(nadir_T_cg(1.7))
        assert depth_from_normalized(coeffs, 0.0, 0.0) == pytest.approx(1.7, abs=1e-12)

    def test_identity_transform_depth_degenerates(self):
        coeffs = plane_coefficients(se3.identity_pose())
        assert coeffs.k1 == 0.0
        with pytest.raises(NegativeDepth):
            depth_from_normalized(coeffs, 0.0, 0.0)

    def test_recompute_is_exact(self, rng):
        t_cg = random_looking_down_T_cg(rng)
        a = plane_coefficients(t_cg)
        b = plane_coefficients(t_cg)
        assert (a.k1, a.k2, a.k3, a.k4) == (b.k1, b.k2, b.k3, b.k4)

    def test_matches_ray_plane_oracle(self, rng):
        for _ in range(500):
            t_cg = random_looking_down_T_cg(rng)
            coeffs = plane_coefficients(t_cg)
            p_x, p_y = rng.uniform(-0.6, 0.6, 2)
            expected = ray_plane_depth(t_cg, p_x, p_y)
            if not (1e-3 < expected < 1e3):
                continue
            got = depth_from_normalized(coeffs, p_x, p_y, max_range=np.inf)
            assert abs(got - expected) / expected < 1e-9


class TestDepth:
    def test_paper_rig_optical_axis(self):
        # Right-triangle oracle: slant range to the ground along the optical
        # axis of a camera 1 m up, pitched 47 degrees below horizontal.
        model = paper_ground_model()
        coeffs = plane_coefficients(model.T_cg())
        expected = 1.0 / np.sin(np.radians(47.0))
        assert depth_from_normalized(coeffs, 0.0, 0.0) == pytest.approx(expected, rel=1e-12)
        # cross-check against the ray-plane oracle
        assert ray_plane_depth(model.T_cg(), 0.0, 0.0) == pytest.approx(expected, rel=1e-12)

    def test_horizon_ray_degenerates(self):
        model = paper_ground_model()
        coeffs = plane_coefficients(model.T_cg())
        # Elevation angle zero: denominator k2 + k4 * p_y vanishes.
        p_y = -coeffs.k2 / coeffs.k4
        with pytest.raises(DegenerateRay):
            depth_from_normalized(coeffs, 0.0, p_y)

    def test_above_horizon_is_negative(self):
        model = paper_ground_model()
        coeffs = plane_coefficients(model.T_cg())
        p_y = -coeffs.k2 / coeffs.k4
        with pytest.raises(NegativeDepth):
            depth_from_normalized(coeffs, 0.0, p_y - 0.2)

    def test_out_of_range(self):
        model = paper_ground_model()
        coeffs = plane_coefficients(model.T_cg())
        p_y = -coeffs.k2 / coeffs.k4
        with pytest.raises(OutOfRange):
            depth_from_normalized(coeffs, 0.0, p_y + 1e-4, max_range=10.0)


def obs(u, v, sigma=1.0, dim=4):
    return PixelObservation(u, v, sigma, sigma, np.zeros(dim))


class TestBackproject:
    def test_nadir_principal_point(self):
        model = nadir_model(height=1.0)
        k = paper_intrinsics()
        kp = backproject(model, k, obs(256.0, 192.0))
        np.testing.assert_allclose(kp.position, [0.0, 0.0, 1.0], atol=1e-12)

    def test_matches_ray_plane_oracle_and_reprojects(self, rng):
        model = paper_ground_model()
        k = paper_intrinsics()
        for _ in range(200):
            u = rng.uniform(1.0, 511.0)
            v = rng.uniform(60.0, 383.0)  # keep below the horizon
            try:
                kp = backproject(model, k, obs(u, v))
            except (NegativeDepth, OutOfRange, DegenerateRay):
                continue
            p_x, p_y = k.normalize(u, v)
            expected = ray_plane_depth(model.T_cg(), float(p_x), float(p_y))
            assert abs(kp.position[2] - expected) / expected < 1e-9
            # reprojection consistency
            u2, v2 = se3.project(k, kp.position)
            assert abs(u2 - u) < 1e-9 and abs(v2 - v) < 1e-9
            # ground-plane membership
            in_ground = se3.apply(se3.inverse(model.T_cg()), kp.position)
            assert abs(in_ground[2]) < 1e-9

    def test_covariance_is_symmetric_psd(self, rng):
        model = paper_ground_model()
        k = paper_intrinsics()
        for _ in range(100):
            u = rng.uniform(1.0, 511.0)
            v = rng.uniform(100.0, 383.0)
            try:
                kp = backproject(model, k, obs(u, v))
            except (NegativeDepth, OutOfRange):
                continue
            np.testing.assert_allclose(kp.covariance, kp.covariance.T, atol=1e-15)
            assert np.min(np.linalg.eigvalsh(kp.covariance)) >= -1e-12

    def test_trace_grows_with_ground_range_along_centreline(self):
        # Uncertainty ellipsoids grow monotonically with distance: walk the
        # image column through the principal point from near (bottom) to far.
        model = paper_ground_model()
        k = paper_intrinsics()
        vs = np.linspace(380.0, 40.0, 40)  # decreasing v = increasing range
        traces, depths = [], []
        for v in vs:
            kp = backproject(model, k, obs(256.0, float(v)))
            traces.append(np.trace(kp.covariance))
            depths.append(kp.position[2])
        assert np.all(np.diff(depths) > 0)
        assert np.all(np.diff(traces) > 0)

    def test_monte_carlo_covariance(self, rng):
        # Generative model matching the linearization: pixel noise slides the
        # ground point along the mean plane; the pose perturbation then moves
        # that point rigidly through the perturbed chain.
        model = paper_ground_model(sigma_trans=0.03, sigma_rot_deg=3.0)
        k = paper_intrinsics()
        u, v = 300.0, 250.0
        sigma_pix = 0.5
        kp = backproject(model, k, PixelObservation(u, v, sigma_pix, sigma_pix, np.zeros(4)))

        n = 100_000
        t_cg = model.T_cg()
        t_gc = se3.inverse(t_cg)
        uv = np.array([u, v]) + sigma_pix * rng.standard_normal((n, 2))
        p_x, p_y = k.normalize(uv[:, 0], uv[:, 1])
        coeffs = plane_coefficients(t_cg)
        z = coeffs.k1 / (coeffs.k2 + coeffs.k3 * p_x + coeffs.k4 * p_y)
        cam_pts = np.column_stack([z * p_x, z * p_y, z])
        ground_pts = cam_pts @ t_gc.rotation.T + t_gc.translation

        sig = np.sqrt(np.diag(model.T_vg.covariance))
        xi = rng.standard_normal((n, 6)) * sig
        rot_xi = se3.so3_exp_many(xi[:, 3:])
        # T_vg' = exp(xi) o T_vg with T_vg mean = identity
        veh_pts = np.einsum("nij,nj->ni", rot_xi, ground_pts) + xi[:, :3]
        cam_samples = veh_pts @ model.T_cv.rotation.T + model.T_cv.translation

        mc_cov = np.cov(cam_samples.T)
        err = np.linalg.norm(mc_cov - kp.covariance) / np.linalg.norm(kp.covariance)
        assert err < 0.10

    def test_batch_matches_scalar(self, rng):
        model = paper_ground_model()
        k = paper_intrinsics()
        uv = np.column_stack([rng.uniform(1, 511, 50), rng.uniform(1, 383, 50)])
        sig = np.full((50, 2), 1.0)
        desc = rng.standard_normal((50, 4))
        kps, idx = backproject_frame(model, k, uv, sig, desc)
        assert len(kps) == len(idx)
        for row, i in enumerate(idx):
            scalar = backproject(model, k, PixelObservation(uv[i, 0], uv[i, 1], 1.0, 1.0, desc[i]))
            np.testing.assert_allclose(kps.positions[row], scalar.position, atol=1e-12)
            np.testing.assert_allclose(kps.covariances[row], scalar.covariance, atol=1e-12)
        # dropped observations must be ones the scalar path rejects
        dropped = set(range(50)) - set(int(i) for i in idx)
        for i in dropped:
            with pytest.raises((NegativeDepth, OutOfRange, DegenerateRay)):
                backproject(model, k, PixelObservation(uv[i, 0], uv[i, 1], 1.0, 1.0, desc[i]))


class TestPixelJacobian:
    def test_matches_central_differences(self, rng):
        k = paper_intrinsics()
        model = paper_ground_model()
        step = 1e-4
        checked = 0
        while checked < 200:
            u = rng.uniform(2.0, 510.0)
            v = rng.uniform(120.0, 382.0)
            try:
                j = jacobian_wrt_pixel(model, k, obs(u, v))
                cols = []
                for du, dv in ((step, 0.0), (0.0, step)):
                    hi = backproject(model, k, obs(u + du, v + dv)).position
                    lo = backproject(model, k, obs(u - du, v - dv)).position
                    cols.append((hi - lo) / (2 * step))
            except (NegativeDepth, OutOfRange, DegenerateRay):
                continue
            fd = np.column_stack(cols)
            assert np.linalg.norm(j - fd) / np.linalg.norm(fd) < 1e-5
            checked += 1

    def test_nadir_principal_point_symmetry(self):
        model = nadir_model(height=1.0)
        k = CameraIntrinsics(400.0, 400.0, 256.0, 192.0, 512, 384)
        j = jacobian_wrt_pixel(model, k, obs(256.0, 192.0))
        # straight down: pure per-axis scaling, symmetric under 90-degree
        # image rotation (swap of the two columns and the x/y rows)
        assert j[0, 0] == pytest.approx(j[1, 1], rel=1e-12)
        assert abs(j[0, 1]) < 1e-15 and abs(j[1, 0]) < 1e-15
        assert abs(j[2, 0]) < 1e-15 and abs(j[2, 1]) < 1e-15

    def test_zero_height_limit_vanishes(self):
        model = nadir_model(height=1e-9)
        k = paper_intrinsics()
        j = jacobian_wrt_pixel(model, k, obs(256.0, 192.0))
        assert np.max(np.abs(j)) < 1e-8


class TestGroundPoseJacobian:
    def test_identity_rig(self):
        # With T_cv = I the Jacobian is [I | -skew(point)].
        model = GroundModel(
            se3.identity_pose(),
            PoseGaussian(nadir_T_cg(1.0), np.zeros((6, 6))),
            10.0,
        )
        point = np.array([0.3, -0.2, 1.5])
        j = jacobian_wrt_ground_pose(model, point)
        np.testing.assert_allclose(j[:, :3], np.eye(3), atol=1e-15)
        np.testing.assert_allclose(j[:, 3:], -se3.skew(point), atol=1e-15)

    def test_point_at_origin(self):
        model = paper_ground_model()
        j = jacobian_wrt_ground_pose(model, np.zeros(3))
        ad = se3.adjoint(model.T_cv)
        np.testing.assert_allclose(j, np.hstack([np.eye(3), np.zeros((3, 3))]) @ ad)

    def test_matches_point_transport_finite_differences(self, rng):
        # Central differences of the point-transport map: hold the feature's
        # ground coordinates fixed, perturb T_vg on the left, re-transform.
        model = paper_ground_model()
        k = paper_intrinsics()
        step = 1e-6
        checked = 0
        while checked < 100:
            u, v = rng.uniform(2, 510), rng.uniform(150, 382)
            try:
                kp = backproject(model, k, obs(u, v))
            except (NegativeDepth, OutOfRange):
                continue
            j = jacobian_wrt_ground_pose(model, kp.position)
            ground_pt = se3.apply(se3.inverse(model.T_cg()), kp.position)
            fd = np.empty((3, 6))
            for col in range(6):
                xi = np.zeros(6)
                xi[col] = step
                hi = se3.apply(
                    se3.compose(model.T_cv, se3.compose(se3.exp_se3(xi), model.T_vg.mean)),
                    ground_pt,
                )
                lo = se3.apply(
                    se3.compose(model.T_cv, se3.compose(se3.exp_se3(-xi), model.T_vg.mean)),
                    ground_pt,
                )
                fd[:, col] = (hi - lo) / (2 * step)
            assert np.linalg.norm(j - fd) / np.linalg.norm(fd) < 1e-5
            checked += 1


class TestKeypointSet:
    def test_round_trip_through_list(self, rng):
        kps = [
            Keypoint3D(rng.standard_normal(3), np.eye(3) * 0.01, rng.standard_normal(4), (1.0, 2.0))
            for _ in range(5)
        ]
        ks = KeypointSet.from_keypoints(kps)
        assert len(ks) == 5
        back = list(ks)
        for orig, got in zip(kps, back):
            np.testing.assert_array_equal(orig.position, got.position)
            np.testing.assert_array_equal(orig.descriptor, got.descriptor)

    def test_ground_model_validates_camera_height(self):
        with pytest.raises(ValueError):
            GroundModel(
                Pose(np.diag([1.0, -1.0, -1.0]), np.array([0.0, 0.0, -1.0])),
                PoseGaussian.certain(se3.identity_pose()),
                10.0,
            )
