import numpy as np
import pytest

from monovtr import se3
from monovtr.config import RunConfig
from monovtr.errors import CorruptFile, FormatVersionMismatch, VOFailure
from monovtr.ground import Keypoint3D, KeypointSet
from monovtr.matching import Match
from monovtr.pipeline import build_world, run_teach
from monovtr.se3 import Pose, PoseGaussian
from monovtr.teach import (
    Keyframe,
    KeyframeThresholds,
    PathEdge,
    TaughtPath,
    Teacher,
    load_path,
    path_length,
    save_path,
    should_create_keyframe,
)

from conftest import paper_ground_model, paper_intrinsics


def pose_xyz_yaw(x, y, z, yaw_deg):
    a = np.radians(yaw_deg)
    rot = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1.0]])
    return Pose(rot, np.array([x, y, z], dtype=float))


class TestShouldCreateKeyframe:
    def test_identity_is_false(self):
        assert not should_create_keyframe(se3.identity_pose(), KeyframeThresholds())

    def test_translation_branch(self):
        # 26 cm of straight motion crosses the 25 cm threshold
        assert should_create_keyframe(pose_xyz_yaw(0.26, 0, 0, 0.0), KeyframeThresholds())
        assert not should_create_keyframe(pose_xyz_yaw(0.24, 0, 0, 0.0), KeyframeThresholds())

    def test_rotation_branch(self):
        # 3.0 degrees crosses the 2.5 degree threshold even at 10 cm
        assert should_create_keyframe(pose_xyz_yaw(0.10, 0, 0, 3.0), KeyframeThresholds())
        assert not should_create_keyframe(pose_xyz_yaw(0.10, 0, 0, 2.0), KeyframeThresholds())


def synthetic_keypoints(rng, n=60):
    pos = np.column_stack([rng.uniform(-1, 1, n), rng.uniform(-1, 1, n), rng.uniform(1, 2, n)])
    cov = np.tile(np.eye(3) * 1e-4, (n, 1, 1))
    desc = rng.standard_normal((n, 16))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return KeypointSet(pos, cov, desc, np.zeros((n, 2)))


class TestTeacher:
    def test_stationary_vehicle_single_keyframe(self, rng):
        model = paper_ground_model()
        teacher = Teacher(model, paper_intrinsics())
        kps = synthetic_keypoints(rng)
        for i in range(100):
            teacher.step(kps, i * 0.1)
        path = teacher.finish()
        assert len(path.keyframes) == 1
        assert len(path.edges) == 0

    def test_straight_drive_edge_count(self):
        # 10 m at 0.3 m/s and 30 fps: 1 cm per frame, so spacing quantization
        # cannot inflate the 0.25 m threshold; expect 40 +/- 1 edges.
        cfg = RunConfig(
            script_waypoints=((0.0, 0.0), (10.0, 0.0)),
            teach_speed=0.3,
            sim_frame_rate=30.0,
            noise_pixel_scale=0.0,
            noise_dropout=0.0,
            noise_corruption=0.0,
            noise_swap=0.0,
            seed=11,
        )
        path, summary = run_teach(cfg)
        assert abs(len(path.edges) - 40) <= 1
        assert summary.path_length == pytest.approx(10.0, abs=0.3)

    def test_in_place_turn_edge_count(self):
        # 90 degree turn at 1.5 deg/s and 15 fps: 0.1 degrees per frame;
        # rotation threshold dominates, expect 36 +/- 1 edges.
        cfg = RunConfig(
            script_waypoints=((0.0, 0.0), (5.0, 0.0), (5.0, 5.0)),
            teach_speed=0.3,
            sim_frame_rate=15.0,
            sim_turn_rate_deg=1.5,
            noise_pixel_scale=0.0,
            noise_dropout=0.0,
            noise_corruption=0.0,
            noise_swap=0.0,
            seed=12,
        )
        path, _ = run_teach(cfg)
        # count edges whose motion is dominated by rotation
        rot_edges = 0
        for e in path.edges:
            ang = np.degrees(se3.rotation_angle(e.transform.mean.rotation))
            if ang > 1.0:
                rot_edges += 1
        assert abs(rot_edges - 36) <= 1

    def test_keyframe_spacing_invariant(self):
        cfg = RunConfig(
            script_waypoints=((0.0, 0.0), (8.0, 0.0)),
            seed=13,
        )
        path, _ = run_teach(cfg)
        frame_motion = cfg.teach_speed / cfg.sim_frame_rate
        t_cv = path.ground_model.T_cv
        for e in path.edges:
            from monovtr.teach import vehicle_delta

            delta = vehicle_delta(e.transform.mean, t_cv)
            assert np.linalg.norm(delta.translation) <= 0.25 + frame_motion + 0.01
            assert se3.rotation_angle(delta.rotation) <= np.radians(2.5) + 0.02

    def test_edge_matches_reference_valid_keypoints(self):
        cfg = RunConfig(script_waypoints=((0.0, 0.0), (5.0, 0.0)), seed=14)
        path, _ = run_teach(cfg)
        for e in path.edges:
            n_from = len(path.keyframes[e.from_id].keypoints)
            n_to = len(path.keyframes[e.to_id].keypoints)
            for m in e.matches:
                assert 0 <= m.index_a < n_from
                assert 0 <= m.index_b < n_to

    def test_chunked_equals_streamed(self, rng):
        # Same frames fed in one go or frame by frame give identical paths.
        cfg = RunConfig(script_waypoints=((0.0, 0.0), (4.0, 0.0)), seed=15)
        p1, _ = run_teach(cfg)
        p2, _ = run_teach(cfg)
        assert len(p1.keyframes) == len(p2.keyframes)
        for e1, e2 in zip(p1.edges, p2.edges):
            np.testing.assert_array_equal(
                e1.transform.mean.rotation, e2.transform.mean.rotation
            )
            np.testing.assert_array_equal(
                e1.transform.mean.translation, e2.transform.mean.translation
            )

    def test_vo_failure_aborts(self, rng):
        model = paper_ground_model()
        teacher = Teacher(model, paper_intrinsics())
        teacher.step(synthetic_keypoints(rng), 0.0)
        with pytest.raises(VOFailure):
            teacher.step(synthetic_keypoints(rng), 0.1)  # disjoint descriptors


def random_path(rng, n_keyframes=1000, kps_per_frame=40) -> TaughtPath:
    keyframes = []
    edges = []
    for k in range(n_keyframes):
        n = int(rng.integers(5, kps_per_frame))
        kps = KeypointSet(
            rng.standard_normal((n, 3)),
            np.tile(np.eye(3) * 0.01, (n, 1, 1)),
            rng.standard_normal((n, 16)),
            rng.uniform(0, 512, (n, 2)),
        )
        keyframes.append(Keyframe(k, kps, k * 0.1))
        if k:
            xi = np.concatenate([0.1 * rng.standard_normal(3), 0.05 * rng.standard_normal(3)])
            cov = np.diag(rng.uniform(1e-6, 1e-4, 6))
            n_matches = int(rng.integers(0, 10))
            matches = [
                Match(int(rng.integers(0, 5)), int(rng.integers(0, 5)), float(rng.random()), float(rng.random()))
                for _ in range(n_matches)
            ]
            edges.append(PathEdge(k - 1, k, PoseGaussian(se3.exp_se3(xi), cov), matches))
    return TaughtPath(
        keyframes,
        edges,
        paper_ground_model(),
        paper_intrinsics(),
        "fingerprint-123",
        rng.standard_normal((n_keyframes, 3)),
    )


def paths_equal(a: TaughtPath, b: TaughtPath) -> bool:
    if len(a.keyframes) != len(b.keyframes) or len(a.edges) != len(b.edges):
        return False
    for ka, kb in zip(a.keyframes, b.keyframes):
        if ka.id != kb.id or ka.timestamp != kb.timestamp:
            return False
        for field in ("positions", "covariances", "descriptors", "source_pixels"):
            if not np.array_equal(getattr(ka.keypoints, field), getattr(kb.keypoints, field)):
                return False
    for ea, eb in zip(a.edges, b.edges):
        if (ea.from_id, ea.to_id) != (eb.from_id, eb.to_id):
            return False
        if not np.array_equal(ea.transform.mean.rotation, eb.transform.mean.rotation):
            return False
        if not np.array_equal(ea.transform.mean.translation, eb.transform.mean.translation):
            return False
        if not np.array_equal(ea.transform.covariance, eb.transform.covariance):
            return False
        if ea.matches != eb.matches:
            return False
    if (a.true_positions is None) != (b.true_positions is None):
        return False
    if a.true_positions is not None and not np.array_equal(a.true_positions, b.true_positions):
        return False
    return a.config_fingerprint == b.config_fingerprint


class TestPersistence:
    def test_single_keyframe_round_trip(self, rng, tmp_path):
        path = random_path(rng, n_keyframes=1)
        file = tmp_path / "single.vtr"
        save_path(path, file)
        assert paths_equal(path, load_path(file))

    def test_thousand_keyframe_round_trip_bit_exact(self, rng, tmp_path):
        path = random_path(rng, n_keyframes=1000)
        file = tmp_path / "big.vtr"
        save_path(path, file)
        assert paths_equal(path, load_path(file))

    def test_truncated_file_rejected(self, rng, tmp_path):
        path = random_path(rng, n_keyframes=3)
        file = tmp_path / "t.vtr"
        save_path(path, file)
        data = file.read_bytes()
        file.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptFile):
            load_path(file)

    def test_corrupted_byte_rejected(self, rng, tmp_path):
        path = random_path(rng, n_keyframes=3)
        file = tmp_path / "c.vtr"
        save_path(path, file)
        data = bytearray(file.read_bytes())
        data[len(data) // 2] ^= 0xFF
        file.write_bytes(bytes(data))
        with pytest.raises(CorruptFile):
            load_path(file)

    def test_version_mismatch_rejected(self, rng, tmp_path):
        import monovtr.teach as teach_mod
        from monovtr.container import write_container

        path = random_path(rng, n_keyframes=2)
        file = tmp_path / "v.vtr"
        save_path(path, file)
        meta, arrays = __import__("monovtr.container", fromlist=["read_container"]).read_container(
            file, teach_mod.MAP_FORMAT, teach_mod.MAP_VERSION
        )
        write_container(file, teach_mod.MAP_FORMAT, teach_mod.MAP_VERSION + 1, meta, arrays)
        with pytest.raises(FormatVersionMismatch):
            load_path(file)

    def test_not_a_container_rejected(self, tmp_path):
        file = tmp_path / "x.vtr"
        file.write_bytes(b"definitely not a map")
        with pytest.raises(CorruptFile):
            load_path(file)
