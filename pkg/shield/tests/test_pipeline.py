import math

import numpy as np
import torch
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

from shield import eskf
from shield.corrector import YawCorrector
from shield.detector import IMU_COUNT, IMU_NAMES, DetectorConfig
from shield.eskf import EskfConfig
from shield.exceptions import ConfigError, PipelineStateError
from shield.magfield import MagneticEnvironment, earth_vector
from shield.pipeline import (Pipeline, PipelineConfig, RawFrame, Stage1Fusion, StreamingSession, evaluate,
                             evaluate_many, format_report, run_frames)
from shield.rotmath import exp_map, rot_about_axis
from shield.synth import NoiseParams, Trajectory6DoF, procedural_trajectory, run_erroneous, synth_raw

G = np.array([0.0, 0.0, -1.0])


def static_raw(n=400, seed=0, noise=None):
    rng = np.random.default_rng(seed)
    R = np.array([exp_map(rng.normal(0.0, 0.6, 3)) for _ in range(IMU_COUNT)])
    p = np.array([3.0, 3.0, 1.0]) + rng.uniform(-0.4, 0.4, (IMU_COUNT, 3))
    traj = Trajectory6DoF(np.tile(R, (n, 1, 1, 1)), np.tile(p, (n, 1, 1)))
    return traj, synth_raw(traj, MagneticEnvironment(), noise, seed)


def frames_of(raw):
    return [RawFrame(k / 100.0, row) for k, row in enumerate(raw)]


class ConfigTests(SimpleTestCase):
    def test_rate_mismatch(self):
        with self.assertRaises(ConfigError):
            PipelineConfig(eskf=EskfConfig(dt=0.02))

    def test_init_window_too_short(self):
        with self.assertRaises(ConfigError):
            PipelineConfig(init_seconds=0.1)

    def test_from_dict(self):
        cfg = PipelineConfig.from_dict({"sample_rate": 50, "detector": {"k": 4}, "eskf": {"eps_m": 0.2}})
        self.assertAlmostEqual(cfg.eskf.dt, 0.02)
        self.assertEqual(cfg.detector.k, 4)
        self.assertEqual(cfg.init_frames, 150)
        self.assertEqual(PipelineConfig.from_dict(cfg.to_dict()), cfg)

    def test_unknown_keys(self):
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"threads": 4})
        with self.assertRaises(ConfigError):
            PipelineConfig.from_dict({"eskf": {"gain": 1.0}})

    def test_relative_paths(self):
        cfg = PipelineConfig.from_dict({"skeleton": "body.json"}, base_dir="/srv/shield")
        self.assertEqual(cfg.skeleton_path, "/srv/shield/body.json")


class StateTests(SimpleTestCase):
    def test_frame_before_init(self):
        _, raw = static_raw(5)
        with self.assertRaises(PipelineStateError):
            Pipeline().process_frame(RawFrame(0.0, raw[0]))

    def test_stream_ends_inside_init_window(self):
        _, raw = static_raw(100)
        with self.assertRaises(PipelineStateError):
            run_frames(Pipeline(), frames_of(raw))

    def test_session_holds_frames_until_initialized(self):
        _, raw = static_raw(320)
        session = StreamingSession(Pipeline())
        counts = [len(session.push(f)) for f in frames_of(raw)]
        self.assertEqual(counts[:299], [0] * 299)
        self.assertEqual(counts[299], 300)
        self.assertEqual(counts[300:], [1] * 20)
        self.assertEqual(session.emitted, 320)
        session.finish()


class Stage1Tests(SimpleTestCase):
    def test_matches_offline_replay(self):
        _, raw = static_raw(400, seed=1, noise=NoiseParams())
        pipeline = Pipeline()
        self.assertTrue(pipeline.stage1_only)
        outputs = run_frames(pipeline, frames_of(raw))
        replay = run_erroneous(raw)
        self.assertEqual(len(outputs), 400)
        self.assertTrue(np.array_equal(np.array([o.R for o in outputs]), replay.R))
        self.assertTrue(np.array_equal(np.array([o.flags for o in outputs]), replay.flags))

    def test_zero_corrector_is_stage1(self):
        _, raw = static_raw(350, seed=2, noise=NoiseParams())
        raw[320:, 0, 6:9] *= 1.5
        plain = run_frames(Pipeline(), frames_of(raw))
        zeroed = run_frames(Pipeline(model=YawCorrector(hidden=8).zero_()), frames_of(raw))
        self.assertGreater(zeroed[-1].w, 0.0)
        for a, b in zip(plain, zeroed):
            self.assertTrue(np.array_equal(a.R, b.R))
            self.assertEqual(a.w, b.w)

    def test_clean_field_keeps_weight_at_zero(self):
        traj, raw = static_raw(400, seed=3, noise=NoiseParams(0.05, 0.005, 0.01, 0.0))
        outputs = run_frames(Pipeline(), frames_of(raw))
        self.assertTrue(all(o.w == 0.0 for o in outputs))
        self.assertTrue(all(o.flags.all() for o in outputs))
        rep = evaluate(outputs, {"R_gt": traj.R}, skip_seconds=2.0)
        self.assertLess(rep["orientation"]["mean"], 1.0)

    def test_disturbed_arm_raises_weight(self):
        _, raw = static_raw(400, seed=4)
        raw[300:, IMU_NAMES.index("larm"), 6:9] *= 1.5
        outputs = run_frames(Pipeline(), frames_of(raw))
        self.assertEqual(outputs[299].w, 0.0)
        self.assertEqual(outputs[300].w, 0.05)
        self.assertEqual(outputs[-1].w, 1.0)
        self.assertFalse(outputs[-1].flags[IMU_NAMES.index("larm")])

    def test_root_magnetometer_in_global_frame(self):
        _, raw = static_raw(320, seed=5)
        outputs = run_frames(Pipeline(), frames_of(raw))
        assert_allclose(outputs[-1].root_mag, earth_vector(), atol=1e-4)

    def test_walking_sequence_tracked_in_clean_field(self):
        traj = procedural_trajectory(6, 900)
        raw = synth_raw(traj, MagneticEnvironment(), None)
        outputs = run_frames(Pipeline(), frames_of(raw))
        rep = evaluate(outputs, {"R_gt": traj.R}, skip_seconds=5.0)
        self.assertLess(rep["orientation"]["mean"], 1.0)

    def test_filter_bank_matches_per_imu_filters(self):
        traj = procedural_trajectory(7, 500)
        raw = synth_raw(traj, MagneticEnvironment(), NoiseParams(), seed=7)
        cfg = EskfConfig()
        fusion = Stage1Fusion(DetectorConfig(), cfg)
        previous = fusion.initialize(raw[:300])
        states = [eskf.init(raw[:300, i], cfg) for i in range(IMU_COUNT)]
        rate = np.zeros((IMU_COUNT, 3))
        flags = np.ones(IMU_COUNT, dtype=bool)
        for frame in raw:
            _, previous, _, _ = fusion.step(frame, previous, flags)
            states = [eskf.step(s, (frame[i, 0:3], rate[i], frame[i, 6:9]), True, cfg) for i, s in enumerate(states)]
            rate = frame[:, 3:6]
        for i, s in enumerate(states):
            assert_allclose(previous[i], s.R_G, atol=1e-10)


class CorruptFrameTests(SimpleTestCase):
    def test_nan_frame_holds_previous_output(self):
        _, raw = static_raw(360, seed=6, noise=NoiseParams())
        raw[330, 2, 4] = math.nan
        outputs = run_frames(Pipeline(), frames_of(raw))
        self.assertEqual(len(outputs), 360)
        self.assertTrue(outputs[330].degraded)
        self.assertAlmostEqual(outputs[330].t, 3.30)
        self.assertTrue(np.array_equal(outputs[330].R, outputs[329].R))
        self.assertFalse(outputs[331].degraded)
        self.assertEqual(sum(o.degraded for o in outputs), 1)


class StreamingTests(SimpleTestCase):
    def test_streaming_matches_batch(self):
        _, raw = static_raw(340, seed=7, noise=NoiseParams())
        torch.manual_seed(0)
        model = YawCorrector(hidden=8)
        batch = run_frames(Pipeline(model=model), frames_of(raw))
        session = StreamingSession(Pipeline(model=model))
        streamed = [o for f in frames_of(raw) for o in session.push(f)]
        session.finish()
        self.assertEqual(len(streamed), len(batch))
        for a, b in zip(batch, streamed):
            self.assertTrue(np.array_equal(a.R, b.R))
            self.assertTrue(np.array_equal(a.delta, b.delta))

    def test_deterministic(self):
        _, raw = static_raw(330, seed=8, noise=NoiseParams())
        torch.manual_seed(1)
        model = YawCorrector(hidden=8)
        first = run_frames(Pipeline(model=model), frames_of(raw))
        second = run_frames(Pipeline(model=model), frames_of(raw))
        self.assertTrue(all(np.array_equal(a.R, b.R) and a.w == b.w for a, b in zip(first, second)))


class EvaluationTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        _, raw = static_raw(360, seed=9)
        raw[320:, IMU_NAMES.index("rarm"), 6:9] *= 1.4
        cls.outputs = run_frames(Pipeline(), frames_of(raw))
        cls.R = np.array([o.R for o in cls.outputs])

    def test_self_comparison_is_zero(self):
        rep = evaluate(self.outputs, {"R_gt": self.R})
        self.assertEqual(rep["frames"], 360)
        self.assertAlmostEqual(rep["orientation"]["mean"], 0.0, places=4)
        self.assertAlmostEqual(rep["yaw"]["p95"], 0.0, places=4)

    def test_heading_offset_on_one_leaf(self):
        gt = self.R.copy()
        larm = IMU_NAMES.index("larm")
        gt[:, larm] = rot_about_axis(G, -math.radians(5.0)) @ gt[:, larm]
        rep = evaluate(self.outputs, {"R_gt": gt})
        self.assertAlmostEqual(rep["per_imu"]["larm"]["yaw"]["mean"], 5.0, places=6)
        self.assertAlmostEqual(rep["per_imu"]["larm"]["orientation"]["median"], 5.0, places=6)
        self.assertAlmostEqual(rep["per_imu"]["head"]["yaw"]["mean"], 0.0, places=4)
        self.assertAlmostEqual(rep["leaf_yaw"]["mean"], 1.0, places=4)

    def test_length_mismatch(self):
        with self.assertRaises(ConfigError):
            evaluate(self.outputs, {"R_gt": self.R[:-1]})

    def test_skip_seconds(self):
        rep = evaluate(self.outputs, {"R_gt": self.R}, skip_seconds=3.0)
        self.assertEqual(rep["frames"], 60)
        self.assertEqual(rep["w_final"], self.outputs[-1].w)

    def test_detection_against_oracle(self):
        flags = np.array([o.flags for o in self.outputs])
        rep = evaluate(self.outputs, {"R_gt": self.R, "disturbed": ~flags})
        self.assertGreater(rep["detection"]["true_positive"], 0)
        self.assertEqual(rep["detection"]["recall"], 1.0)
        self.assertEqual(rep["detection"]["precision"], 1.0)

    def test_pooled(self):
        pairs = [(self.outputs, {"R_gt": self.R}), (self.outputs[:100], {"R_gt": self.R[:100]})]
        rep = evaluate_many(pairs, workers=2)
        self.assertEqual(rep["frames"], 460)
        self.assertEqual(rep["sequences"], 2)
        self.assertIn("sequences: 2", format_report(rep))
        with self.assertRaises(ConfigError):
            evaluate_many([])
