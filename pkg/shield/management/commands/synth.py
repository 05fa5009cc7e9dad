import math

from django.conf import settings
from django.core.management.base import CommandError

from shield.magfield import Room
from shield.management.base import ShieldCommand
from shield.motions import MotionParams
from shield.synth import MODES, EnvParams, NoiseParams, SynthConfig, Trajectory6DoF, make_dataset


class Command(ShieldCommand):
    help = "Synthesize a magnetic environment and a labelled training/validation dataset."

    def add_arguments(self, parser):
        parser.add_argument("--seed", type=int, default=settings.MAGSHIELD_DEFAULT_SEED)
        parser.add_argument("--magnets", type=int, default=4, help="dipoles per sequence")
        parser.add_argument("--minutes", type=float, default=1.0, help="total procedural motion")
        parser.add_argument("--mode", choices=MODES, default="magnetic")
        parser.add_argument("--out", default=str(settings.MAGSHIELD_DATA_DIR))
        parser.add_argument("--seq-seconds", type=float, default=60.0)
        parser.add_argument("--val-fraction", type=float, default=0.2)
        parser.add_argument("--walk-std", type=float, default=0.05, help="naive mode yaw walk, rad/sqrt(s)")
        parser.add_argument("--trajectories", nargs="*", default=[], help="6-DoF trajectory files to import")
        parser.add_argument("--config", default=None, help="pipeline JSON supplying detector/eskf settings")

    def run(self, **options):
        cfg = self.load_config(options["config"])
        rate = cfg.sample_rate
        synth_cfg = SynthConfig(
            mode=options["mode"],
            sample_rate=rate,
            init_seconds=cfg.init_seconds,
            walk_std=options["walk_std"],
            env=EnvParams(n_magnets=options["magnets"], room=Room()),
            noise=NoiseParams.from_eskf(cfg.eskf),
            motion=MotionParams(sample_rate=rate),
            detector=cfg.detector,
            eskf=cfg.eskf,
        )
        if options["trajectories"]:
            sources = [Trajectory6DoF.load(path, rate) for path in options["trajectories"]]
        else:
            if options["seq_seconds"] < 5.0:
                raise CommandError("--seq-seconds must be at least 5")
            if not options["minutes"] > 0:
                raise CommandError("--minutes must be positive")
            count = max(1, math.ceil(options["minutes"] * 60.0 / options["seq_seconds"]))
            sources = [int(round(options["seq_seconds"] * rate))] * count

        metadata = make_dataset(options["out"], sources, synth_cfg, options["seed"],
                                val_fraction=options["val_fraction"], workers=self.threads(),
                                skeleton=cfg.skeleton())
        frames = sum(s["frames"] for s in metadata["sequences"])
        val = sum(1 for s in metadata["sequences"] if s["split"] == "val")
        self.stdout.write(f"wrote {len(metadata['sequences'])} sequences ({val} validation), "
                          f"{frames} frames, mode {options['mode']} -> {options['out']}")
