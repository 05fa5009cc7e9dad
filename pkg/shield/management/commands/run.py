from django.core.management.base import CommandError

from shield import formats
from shield.management.base import ShieldCommand
from shield.pipeline import Pipeline, PipelineConfig, StreamingSession

MIN_SECONDS = 5.0


class Command(ShieldCommand):
    help = "Run the two-stage pipeline over a raw-frame file or stdin stream."

    def add_arguments(self, parser):
        parser.add_argument("--input", default=formats.STDIO, help="raw-frame JSON lines file, '-' for stdin")
        parser.add_argument("--weights", default=None, help="corrector weights; stage 1 only when absent")
        parser.add_argument("--config", default=None)
        parser.add_argument("--out", default=formats.STDIO)

    def run(self, **options):
        cfg = self.load_config(options["config"])
        if options["weights"]:
            cfg = PipelineConfig(cfg.detector, cfg.eskf, options["weights"], cfg.skeleton_path,
                                 cfg.sample_rate, cfg.init_seconds)
        pipeline = Pipeline(cfg)
        if pipeline.stage1_only:
            self.stderr.write("no corrector weights: running stage 1 only")
        session = StreamingSession(pipeline)
        min_frames = int(round(MIN_SECONDS * cfg.sample_rate))

        held = []
        written = degraded = 0
        with formats.open_text(options["input"]) as src, formats.open_text(options["out"], "w") as dst:
            for frame in formats.iter_raw_frames(src, str(options["input"])):
                # nothing is emitted until the input is known to be long enough
                if held is not None:
                    held.append(frame)
                    if len(held) < min_frames:
                        continue
                    pending, held = held, None
                else:
                    pending = [frame]
                for item in pending:
                    outputs = session.push(item)
                    degraded += sum(1 for o in outputs if o.degraded)
                    written += formats.write_outputs(dst, outputs)
            if held is not None:
                raise CommandError(f"input has {len(held)} frames; at least {MIN_SECONDS:g} s "
                                   f"({min_frames} frames) are required")
            session.finish()
        self.stderr.write(f"processed {written} frames ({degraded} degraded)")
