import numpy as np
from django.test import SimpleTestCase

from shield.exceptions import ConfigError
from shield.experiments import ExperimentConfig, ExperimentResult, detector_ordering, format_results


class ConfigTests(SimpleTestCase):
    def test_sequences_must_outlast_init_and_skip(self):
        with self.assertRaises(ConfigError):
            ExperimentConfig(seconds=2.0)
        with self.assertRaises(ConfigError):
            ExperimentConfig(seconds=4.0, skip_seconds=5.0)

    def test_synth_config_follows_pipeline(self):
        cfg = ExperimentConfig(magnets=3)
        self.assertEqual(cfg.synth_config().env.n_magnets, 3)
        self.assertEqual(cfg.synth_config(magnets=0).env.n_magnets, 0)
        self.assertEqual(cfg.synth_config("naive").mode, "naive")
        self.assertEqual(cfg.synth_config().eskf, cfg.pipeline.eskf)
        self.assertEqual(cfg.n_frames, 12000)


class ResultTests(SimpleTestCase):
    def test_improvement_is_relative(self):
        result = ExperimentResult("detector", "mean yaw error (deg)", 4.0, 3.0, True)
        self.assertAlmostEqual(result.improvement, 0.25)
        self.assertEqual(result.to_dict()["improvement"], 0.25)
        self.assertIn("detector   PASS", format_results([result]))
        self.assertIn("improvement 25.0%", format_results([result]))


class DetectorOrderingTests(SimpleTestCase):
    def test_clean_field_arms_coincide(self):
        result = detector_ordering(ExperimentConfig(sequences=1, seconds=6.0, magnets=0, skip_seconds=3.0))
        self.assertTrue(np.isfinite(result.baseline))
        # only magnitude false alarms can separate the two detectors here
        self.assertAlmostEqual(result.baseline, result.treatment, delta=0.05)
        self.assertFalse(result.passed)
