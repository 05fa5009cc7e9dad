import contextlib
import io
import json
import tempfile
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from numpy.testing import assert_allclose

import manage
from shield import formats


def run_command(name, **options):
    out, err = io.StringIO(), io.StringIO()
    call_command(name, stdout=out, stderr=err, **options)
    return out.getvalue(), err.getvalue()


class SynthRunEvalTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        cls.root = Path(cls.tmp.name)
        cls.data = cls.root / "data"
        cls.synth_out, _ = run_command("synth", seed=7, magnets=0, minutes=0.1, seq_seconds=6,
                                       val_fraction=0.0, out=str(cls.data))

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_dataset_layout(self):
        self.assertIn("wrote 1 sequences", self.synth_out)
        for suffix in (".data.jsonl", ".raw.jsonl", ".env.jsonl"):
            self.assertTrue((self.data / "train" / f"seq_0000{suffix}").is_file(), suffix)
        metadata = json.loads((self.data / "metadata.json").read_text(encoding="utf-8"))
        self.assertEqual(metadata["seed"], 7)
        self.assertEqual(metadata["sequences"][0]["frames"], 600)

    def test_synth_is_reproducible(self):
        again = self.root / "again"
        run_command("synth", seed=7, magnets=0, minutes=0.1, seq_seconds=6, val_fraction=0.0, out=str(again))
        for path in sorted(p for p in self.data.rglob("*") if p.is_file()):
            twin = again / path.relative_to(self.data)
            self.assertEqual(path.read_bytes(), twin.read_bytes(), str(path.name))

    def test_run_then_eval(self):
        pred = self.root / "pred" / "seq_0000.out.jsonl"
        _, err = run_command("run", input=str(self.data / "train" / "seq_0000.raw.jsonl"), out=str(pred))
        self.assertIn("processed 600 frames (0 degraded)", err)
        self.assertIn("stage 1 only", err)

        outputs = formats.read_outputs(pred)
        records = formats.read_dataset(self.data / "train" / "seq_0000.data.jsonl")
        self.assertEqual(len(outputs), 600)
        assert_allclose(np.array([o.R for o in outputs]), records["R_err"], atol=1e-6)

        report_path = self.root / "report.json"
        run_command("eval", pred=str(pred.parent), gt=str(self.data / "train"), json=True,
                    skip_seconds=1.0, report=str(report_path))
        report = json.loads(report_path.read_text(encoding="utf-8"))
        self.assertEqual(report["frames"], 500)
        self.assertEqual(report["sequences"], 1)
        self.assertEqual(report["degraded_frames"], 0)
        self.assertIn("detection", report)

        text, _ = run_command("eval", pred=str(pred), gt=str(self.data / "train" / "seq_0000.data.jsonl"))
        self.assertIn("orientation error (deg)", text)

    def test_run_refuses_short_input(self):
        raw = formats.read_dataset(self.data / "train" / "seq_0000.data.jsonl")["raw"][:100]
        short = self.root / "short.raw.jsonl"
        formats.write_raw_frames(short, np.arange(100) / 100.0, raw)
        with self.assertRaisesMessage(CommandError, "at least 5 s"):
            run_command("run", input=str(short), out=str(self.root / "short.out.jsonl"))

    def test_eval_without_matching_files(self):
        with self.assertRaises(CommandError):
            run_command("eval", pred=str(self.root), gt=str(self.data / "train" / "seq_0000.data.jsonl"))


class TrainTests(SimpleTestCase):
    def test_train_then_run_with_weights(self):
        with tempfile.TemporaryDirectory() as tmp:
            root = Path(tmp)
            run_command("synth", seed=3, minutes=0.2, seq_seconds=6, val_fraction=0.5, mode="naive",
                        walk_std=0.1, out=str(root / "data"))
            weights = root / "corrector.bin"
            log = root / "train.log.jsonl"
            out, _ = run_command("train", data=str(root / "data"), epochs=1, out_weights=str(weights),
                                 hidden=8, window=64, batch_size=8, log=str(log))
            self.assertIn("best epoch 1", out)
            self.assertTrue(weights.is_file())
            entries = [json.loads(line) for line in log.read_text(encoding="utf-8").splitlines()]
            self.assertEqual([e["epoch"] for e in entries], [1])

            pred = root / "pred.out.jsonl"
            _, err = run_command("run", input=str(root / "data" / "train" / "seq_0000.raw.jsonl"),
                                 weights=str(weights), out=str(pred))
            self.assertNotIn("stage 1 only", err)
            self.assertEqual(len(formats.read_outputs(pred)), 600)

    def test_missing_data(self):
        with tempfile.TemporaryDirectory() as tmp, self.assertRaises(CommandError):
            run_command("train", data=tmp, out_weights=str(Path(tmp) / "w.bin"))


class BenchTests(SimpleTestCase):
    def test_reports_both_stages(self):
        out, _ = run_command("bench", seconds=4, seed=1)
        self.assertIn("stage-1 (detector + ESKF):", out)
        self.assertIn("stage-2 (corrector):", out)
        self.assertIn("400 frames", out)


class ExperimentCommandTests(SimpleTestCase):
    def test_small_run_reports_every_experiment(self):
        out, _ = run_command("experiment", sequences=2, train_sequences=2, seconds=8, epochs=1, hidden=8,
                             window=64, json=True)
        results = json.loads(out)
        self.assertEqual(set(results), {"detector", "corrector", "ablation", "clean"})
        for name, result in results.items():
            self.assertIsInstance(result["passed"], bool, name)
            self.assertGreater(result["baseline"], 0.0, name)
        self.assertEqual(results["detector"]["details"]["sequences"], 2)

    def test_text_report(self):
        with tempfile.TemporaryDirectory() as tmp:
            report = Path(tmp) / "experiments.txt"
            run_command("experiment", which=["detector"], sequences=1, seconds=6, report=str(report))
            self.assertRegex(report.read_text(encoding="utf-8"), r"detector\s+(PASS|FAIL)")

    def test_corrector_needs_a_model(self):
        with self.assertRaisesMessage(CommandError, "need --weights"):
            run_command("experiment", which=["corrector", "clean"], sequences=1, seconds=6)


class ManageTests(SimpleTestCase):
    def test_unknown_flag_exits_with_usage_error(self):
        with contextlib.redirect_stderr(io.StringIO()):
            self.assertEqual(manage.main(["manage.py", "run", "--no-such-flag"]), 2)
