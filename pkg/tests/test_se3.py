import numpy as np
import pytest

from monovtr import se3
from monovtr.errors import NonPositiveDepth
from monovtr.se3 import CameraIntrinsics, Pose, PoseGaussian

from conftest import paper_intrinsics, random_pose


def translate(x, y, z):
    return Pose(np.eye(3), np.array([x, y, z], dtype=float))


def _skews(v):
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


def _left_jacobian_many(theta):
    angle = np.linalg.norm(theta, axis=1)
    k = _skews(theta)
    k2 = k @ k
    small = angle < 1e-6
    safe = np.where(small, 1.0, angle)
    c1 = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    c2 = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / safe**3)
    return np.eye(3)[None] + c1[:, None, None] * k + c2[:, None, None] * k2


def _left_jacobian_inv_many(theta):
    angle = np.linalg.norm(theta, axis=1)
    k = _skews(theta)
    k2 = k @ k
    small = angle < 1e-6
    safe = np.where(small, 1.0, angle)
    half = 0.5 * safe
    coeff = np.where(small, 1.0 / 12.0, (1.0 - half / np.tan(half)) / safe**2)
    return np.eye(3)[None] - 0.5 * k + coeff[:, None, None] * k2


class TestCompose:
    def test_identity(self, rng):
        p = random_pose(rng)
        out = se3.compose(se3.identity_pose(), p)
        np.testing.assert_allclose(out.rotation, p.rotation, atol=1e-12)
        np.testing.assert_allclose(out.translation, p.translation, atol=1e-12)

    def test_inverse_gives_identity(self, rng):
        p = random_pose(rng)
        out = se3.compose(p, se3.inverse(p))
        assert np.linalg.norm(out.rotation - np.eye(3)) < 1e-9
        assert np.linalg.norm(out.translation) < 1e-9

    def test_commuting_translations(self):
        out = se3.compose(translate(1, 0, 0), translate(0, 2, 0))
        np.testing.assert_allclose(out.translation, [1.0, 2.0, 0.0])

    def test_associativity_1000_random_triples(self, rng):
        for _ in range(1000):
            a, b, c = (random_pose(rng) for _ in range(3))
            left = se3.compose(a, se3.compose(b, c))
            right = se3.compose(se3.compose(a, b), c)
            assert np.linalg.norm(left.rotation - right.rotation) < 1e-9
            assert np.linalg.norm(left.translation - right.translation) < 1e-9


class TestAdjoint:
    def test_identity(self):
        np.testing.assert_allclose(se3.adjoint(se3.identity_pose()), np.eye(6))

    def test_pure_rotation_is_block_diagonal(self, rng):
        r = se3.so3_exp(rng.uniform(-1, 1, 3))
        ad = se3.adjoint(Pose(r, np.zeros(3)))
        np.testing.assert_allclose(ad[:3, :3], r)
        np.testing.assert_allclose(ad[3:, 3:], r)
        np.testing.assert_allclose(ad[:3, 3:], 0.0, atol=1e-15)

    def test_matches_transported_perturbation(self, rng):
        # Ad(P) xi == log(P exp(xi) P^-1) to first order.
        for _ in range(50):
            p = random_pose(rng)
            xi = 1e-4 * rng.standard_normal(6)
            xi /= np.linalg.norm(xi) / 1e-4
            transported = se3.log_se3(
                se3.compose(p, se3.compose(se3.exp_se3(xi), se3.inverse(p)))
            )
            np.testing.assert_allclose(se3.adjoint(p) @ xi, transported, atol=1e-6 * 1e-4 + 1e-12, rtol=1e-6)

    def test_homomorphism(self, rng):
        a, b = random_pose(rng), random_pose(rng)
        left = se3.adjoint(se3.compose(a, b))
        right = se3.adjoint(a) @ se3.adjoint(b)
        assert np.max(np.abs(left - right)) < 1e-9


class TestSkew:
    def test_zero(self):
        np.testing.assert_array_equal(se3.skew([0, 0, 0]), np.zeros((3, 3)))

    def test_basis_cross_product(self):
        e1, e2, e3 = np.eye(3)
        np.testing.assert_allclose(se3.skew(e1) @ e2, e3)

    def test_matches_cross_product(self, rng):
        for _ in range(100):
            v, w = rng.standard_normal(3), rng.standard_normal(3)
            np.testing.assert_allclose(se3.skew(v) @ w, np.cross(v, w), atol=1e-12)


class TestExpLog:
    def test_round_trip(self, rng):
        for _ in range(200):
            xi = rng.standard_normal(6)
            xi[3:] *= (np.pi / 2 - 1e-3) / max(np.linalg.norm(xi[3:]), np.pi / 2)
            back = se3.log_se3(se3.exp_se3(xi))
            np.testing.assert_allclose(back, xi, atol=1e-9)

    def test_small_angle_series(self):
        xi = np.array([1e-9, 2e-9, -1e-9, 1e-9, -2e-9, 1e-9])
        p = se3.exp_se3(xi)
        np.testing.assert_allclose(se3.log_se3(p), xi, atol=1e-15)

    def test_batched_exp_log_agree_with_scalar(self, rng):
        thetas = rng.uniform(-1.5, 1.5, size=(64, 3))
        rs = se3.so3_exp_many(thetas)
        for theta, r in zip(thetas, rs):
            np.testing.assert_allclose(r, se3.so3_exp(theta), atol=1e-12)
        np.testing.assert_allclose(se3.so3_log_many(rs), thetas, atol=1e-9)


class TestProject:
    def test_principal_point(self):
        k = CameraIntrinsics(400.0, 400.0, 256.0, 192.0, 512, 384)
        assert se3.project(k, [0, 0, 1]) == (256.0, 192.0)

    def test_similar_triangles(self):
        k = paper_intrinsics()
        u, v = se3.project(k, [1.0, 0.0, 2.0])
        assert u == pytest.approx(456.0)
        assert v == pytest.approx(192.0)

    def test_behind_camera_raises(self):
        k = paper_intrinsics()
        with pytest.raises(NonPositiveDepth):
            se3.project(k, [0.0, 0.0, -1.0])
        with pytest.raises(NonPositiveDepth):
            se3.project(k, [0.0, 0.0, 0.0])

    def test_normalized_consistency(self, rng):
        # y = K p exactly, for normalized coordinates p of any valid point.
        k = paper_intrinsics()
        for _ in range(100):
            pt = rng.uniform([-2, -2, 0.1], [2, 2, 5])
            u, v = se3.project(k, pt)
            p = pt / pt[2]
            y = k.matrix() @ p
            np.testing.assert_allclose([u, v], y[:2] / y[2], atol=1e-12)


class TestSamplePoseGaussian:
    def test_zero_covariance_returns_mean(self, rng):
        mean = random_pose(rng)
        g = PoseGaussian.certain(mean)
        out = se3.sample_pose_gaussian(g, seed=7)
        np.testing.assert_allclose(out.rotation, mean.rotation, atol=1e-15)
        np.testing.assert_allclose(out.translation, mean.translation, atol=1e-15)

    def test_same_seed_is_deterministic(self, rng):
        g = PoseGaussian(random_pose(rng), np.diag([0.01] * 6))
        p1 = se3.sample_pose_gaussian(g, seed=123)
        p2 = se3.sample_pose_gaussian(g, seed=123)
        np.testing.assert_array_equal(p1.rotation, p2.rotation)
        np.testing.assert_array_equal(p1.translation, p2.translation)

    def test_monte_carlo_covariance(self, rng):
        # Sample covariance of recovered log-perturbations matches the input
        # within 5 percent Frobenius over 1e5 draws.
        mean = random_pose(rng)
        sigmas = np.array([0.05, 0.08, 0.03, 0.04, 0.06, 0.02])
        cov = np.diag(sigmas**2)
        n = 100_000
        xi = rng.standard_normal((n, 6)) * sigmas

        # Build exp(xi) o mean numerically (batched), then recover the
        # perturbation as log(pose o mean^-1).
        rot_xi = se3.so3_exp_many(xi[:, 3:])
        t_xi = np.einsum("nij,nj->ni", _left_jacobian_many(xi[:, 3:]), xi[:, :3])
        rot_p = rot_xi @ mean.rotation
        t_p = np.einsum("nij,j->ni", rot_xi, mean.translation) + t_xi

        inv_r, inv_t = mean.rotation.T, -(mean.rotation.T @ mean.translation)
        rot_rel = rot_p @ inv_r
        t_rel = np.einsum("nij,j->ni", rot_p, inv_t) + t_p

        theta = se3.so3_log_many(rot_rel)
        rho = np.einsum("nij,nj->ni", _left_jacobian_inv_many(theta), t_rel)
        recovered = np.hstack([rho, theta])
        sample_cov = np.cov(recovered.T)
        err = np.linalg.norm(sample_cov - cov) / np.linalg.norm(cov)
        assert err < 0.05


class TestPoseValidation:
    def test_rejects_non_orthonormal(self):
        bad = np.eye(3)
        bad[0, 0] = 1.1
        with pytest.raises(ValueError):
            Pose(bad, np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_gaussian_rejects_asymmetric_covariance(self, rng):
        cov = np.diag([1.0] * 6)
        cov[0, 1] = 0.5
        with pytest.raises(ValueError):
            PoseGaussian(random_pose(rng), cov)

    def test_gaussian_rejects_negative_eigenvalue(self, rng):
        cov = np.diag([1.0] * 5 + [-1.0])
        with pytest.raises(ValueError):
            PoseGaussian(random_pose(rng), cov)
