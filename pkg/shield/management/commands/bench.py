import time

import numpy as np
import torch
from django.conf import settings

from shield import formats
from shield.corrector import CorrectorStream, YawCorrector, build_input, load_weights
from shield.magfield import MagneticEnvironment
from shield.management.base import ShieldCommand
from shield.motions import MotionParams
from shield.pipeline import Stage1Fusion
from shield.synth import NoiseParams, SynthConfig, procedural_trajectory, synth_raw


class Command(ShieldCommand):
    help = "Measure stage-1 (detector + ESKF) and stage-2 (corrector) throughput separately."

    def add_arguments(self, parser):
        parser.add_argument("--input", default=None, help="raw-frame file; a clean sequence is synthesized when absent")
        parser.add_argument("--weights", default=None, help="corrector weights; random initialization when absent")
        parser.add_argument("--seconds", type=float, default=60.0, help="length of the synthesized sequence")
        parser.add_argument("--seed", type=int, default=settings.MAGSHIELD_DEFAULT_SEED)
        parser.add_argument("--config", default=None)

    def run(self, **options):
        cfg = self.load_config(options["config"])
        torch.set_num_threads(1)
        if options["input"]:
            raw = np.array([f.data for f in formats.read_raw_frames(options["input"])])
            source = options["input"]
        else:
            synth_cfg = SynthConfig(sample_rate=cfg.sample_rate, init_seconds=cfg.init_seconds,
                                    detector=cfg.detector, eskf=cfg.eskf,
                                    motion=MotionParams(sample_rate=cfg.sample_rate))
            n_frames = max(cfg.init_frames, int(round(options["seconds"] * cfg.sample_rate)))
            traj = procedural_trajectory(options["seed"], n_frames, synth_cfg, cfg.skeleton())
            raw = synth_raw(traj, MagneticEnvironment(), NoiseParams.from_eskf(cfg.eskf), options["seed"])
            source = f"synthetic {n_frames / cfg.sample_rate:g} s"

        fusion = Stage1Fusion(cfg.detector, cfg.eskf, cfg.skeleton())
        previous = fusion.initialize(raw[:cfg.init_frames])
        stage1 = []
        started = time.perf_counter()
        for frame in raw:
            _, R, acc, _ = fusion.step(frame, previous)
            previous = R
            stage1.append((R, acc))
        stage1_seconds = time.perf_counter() - started

        if options["weights"]:
            model = load_weights(options["weights"])
        else:
            torch.manual_seed(options["seed"])
            model = YawCorrector()
        stream = CorrectorStream(model)
        gravity = cfg.gravity_direction
        started = time.perf_counter()
        for R, acc in stage1:
            stream(build_input(acc, R, gravity))
        stage2_seconds = time.perf_counter() - started

        n = len(raw)
        self.stdout.write(f"input: {source} ({n} frames, 6 IMUs)")
        self.stdout.write(f"stage-1 (detector + ESKF): {n / stage1_seconds:.1f} frames/s")
        self.stdout.write(f"stage-2 (corrector): {n / stage2_seconds:.1f} frames/s")
