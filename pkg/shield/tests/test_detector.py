import importlib.util
import math
from pathlib import Path

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from shield.detector import (IMU_NAMES, DetectorConfig, Skeleton, compute_flags, knn, neighbourhoods,
                             positions_from_pose)
from shield.exceptions import ConfigError
from shield.rotmath import rot_about_axis

T_POSE = positions_from_pose(np.tile(np.eye(3), (5, 1, 1)), np.eye(3))


def names(indices):
    return {IMU_NAMES[i] for i in indices}


class PositionTests(SimpleTestCase):
    def test_t_pose(self):
        assert_allclose(T_POSE[IMU_NAMES.index("larm")], [0.45, 0.0, 0.45])
        assert_allclose(T_POSE[IMU_NAMES.index("rarm")], [-0.45, 0.0, 0.45])
        assert_allclose(T_POSE[IMU_NAMES.index("head")], [0.0, 0.0, 0.55])
        assert_allclose(T_POSE[IMU_NAMES.index("lleg")], [0.1, 0.0, -0.65])
        assert_allclose(T_POSE[IMU_NAMES.index("root")], [0.0, 0.0, 0.0])

    def test_lowered_arm_follows_its_orientation(self):
        leaves = np.tile(np.eye(3), (5, 1, 1))
        # a quarter turn about y points the left forearm straight down
        leaves[0] = rot_about_axis([0.0, 1.0, 0.0], math.pi / 2)
        positions = positions_from_pose(leaves, np.eye(3))
        assert_allclose(positions[0], [0.20, 0.0, 0.20], atol=1e-12)

    def test_root_rotation_moves_everything(self):
        turn = rot_about_axis([0.0, 0.0, 1.0], math.pi / 2)
        leaves = np.tile(turn, (5, 1, 1))
        positions = positions_from_pose(leaves, turn)
        assert_allclose(positions, T_POSE @ turn.T, atol=1e-12)


class NeighbourTests(SimpleTestCase):
    def test_t_pose_neighbourhoods(self):
        expected = {
            "larm": {"larm", "head", "root"},
            "rarm": {"rarm", "head", "root"},
            "lleg": {"lleg", "rleg", "root"},
            "rleg": {"rleg", "lleg", "root"},
            "head": {"head", "larm", "rarm"},
            "root": {"root", "head", "larm"},
        }
        for i, nbrs in enumerate(neighbourhoods(T_POSE, 3)):
            self.assertEqual(names(nbrs), expected[IMU_NAMES[i]])
            self.assertEqual(nbrs[0], i)

    def test_ties_break_by_index(self):
        positions = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [0, -1.0, 0], [0, 0, 5.0], [0, 0, 0]])
        self.assertEqual(knn(positions, 5, 3), (5, 0, 1))


class FlagTests(SimpleTestCase):
    def test_single_disturbed_arm(self):
        mags = np.ones(6)
        mags[IMU_NAMES.index("larm")] = 1.2
        flags = compute_flags(mags, T_POSE, DetectorConfig(k=3))
        expected = {"larm": False, "rarm": True, "lleg": True, "rleg": True, "head": False, "root": False}
        self.assertEqual(dict(zip(IMU_NAMES, flags.tolist())), expected)

    def test_k1_is_magnitude_gate(self):
        mags = np.array([1.2, 1.0, 0.9, 1.1, 1.0, 0.8])
        flags = compute_flags(mags, T_POSE, DetectorConfig(k=1))
        self.assertEqual(flags.tolist(), [False, True, True, True, True, False])

    def test_k6_needs_everyone_clean(self):
        mags = np.ones(6)
        self.assertTrue(compute_flags(mags, T_POSE, DetectorConfig(k=6)).all())
        mags[3] = 2.0
        self.assertFalse(compute_flags(mags, T_POSE, DetectorConfig(k=6)).any())

    def test_nan_counts_as_disturbed(self):
        mags = np.ones(6)
        mags[4] = math.nan
        flags = compute_flags(mags, T_POSE, DetectorConfig(k=1))
        self.assertFalse(flags[4])
        self.assertEqual(int(flags.sum()), 5)

    def test_invalid_k(self):
        with self.assertRaises(ConfigError):
            DetectorConfig(k=0)
        with self.assertRaises(ConfigError):
            DetectorConfig(k=7)

    def test_larger_neighbourhoods_flag_fewer(self):
        rng = np.random.default_rng(8)
        for _ in range(200):
            positions = rng.uniform(-1.0, 1.0, (6, 3))
            mags = rng.uniform(0.7, 1.3, 6)
            previous = compute_flags(mags, positions, DetectorConfig(k=1))
            for k in range(2, 7):
                flags = compute_flags(mags, positions, DetectorConfig(k=k))
                self.assertFalse(np.any(flags & ~previous), f"k={k}")
                previous = flags

    def test_relabelling_imus_permutes_flags(self):
        rng = np.random.default_rng(10)
        cfg = DetectorConfig(k=3)
        for _ in range(100):
            positions = rng.uniform(-1.0, 1.0, (6, 3))
            mags = rng.uniform(0.7, 1.3, 6)
            order = rng.permutation(6)
            flags = compute_flags(mags, positions, cfg)
            self.assertTrue(np.array_equal(compute_flags(mags[order], positions[order], cfg), flags[order]))


class SkeletonTests(SimpleTestCase):
    def test_round_trip(self):
        skeleton = Skeleton.default()
        self.assertEqual(Skeleton.from_dict(skeleton.to_dict()), skeleton)

    def test_unknown_parent(self):
        table = Skeleton.default().to_dict()
        table["joints"]["l_hand"]["parent"] = "nowhere"
        with self.assertRaises(ConfigError):
            Skeleton.from_dict(table)

    def test_missing_imu(self):
        table = Skeleton.default().to_dict()
        del table["imus"]["head"]
        with self.assertRaises(ConfigError):
            Skeleton.from_dict(table)

    def test_scaled_skeleton_changes_positions(self):
        table = Skeleton.default().to_dict()
        table["joints"]["l_hand"]["offset"] = [1.0, 0.0, 0.0]
        positions = positions_from_pose(np.tile(np.eye(3), (5, 1, 1)), np.eye(3), Skeleton.from_dict(table))
        assert_allclose(positions[0], [0.7, 0.0, 0.45])

    def test_shipped_table_matches_default(self):
        self.assertEqual(Skeleton.load(settings.MAGSHIELD_SKELETON), Skeleton.default())

    def test_generator_script(self):
        path = Path(settings.BASE_DIR) / "scripts" / "default_skeleton.py"
        spec = importlib.util.spec_from_file_location("default_skeleton", path)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        self.assertEqual(Skeleton.from_dict(module.build_skeleton(1.0)), Skeleton.default())
        shorter = Skeleton.from_dict(module.build_skeleton(0.5))
        assert_allclose(positions_from_pose(np.tile(np.eye(3), (5, 1, 1)), np.eye(3), shorter)[4], [0.0, 0.0, 0.275])
