import json
from pathlib import Path

from django.conf import settings
from django.core.management.base import CommandError

from shield.corrector import TrainConfig, load_weights
from shield.experiments import (EXPERIMENTS, ExperimentConfig, clean_field_check, corrector_ordering,
                                detector_ordering, format_results, training_ablation)
from shield.management.base import ShieldCommand


class Command(ShieldCommand):
    help = "Run paired synthetic experiments (detector, corrector, training ablation, clean field) and report PASS/FAIL."

    def add_arguments(self, parser):
        defaults = ExperimentConfig()
        train_defaults = TrainConfig()
        parser.add_argument("--which", nargs="+", choices=EXPERIMENTS, default=list(EXPERIMENTS))
        parser.add_argument("--sequences", type=int, default=defaults.sequences, help="evaluation sequences")
        parser.add_argument("--train-sequences", type=int, default=defaults.train_sequences)
        parser.add_argument("--seconds", type=float, default=defaults.seconds, help="length of every sequence")
        parser.add_argument("--magnets", type=int, default=defaults.magnets)
        parser.add_argument("--seed", type=int, default=defaults.seed)
        parser.add_argument("--skip-seconds", type=float, default=defaults.skip_seconds)
        parser.add_argument("--weights", default=None,
                            help="corrector weights; the magnetic-mode ablation model is used when absent")
        parser.add_argument("--epochs", type=int, default=train_defaults.epochs)
        parser.add_argument("--hidden", type=int, default=train_defaults.hidden)
        parser.add_argument("--window", type=int, default=train_defaults.window)
        parser.add_argument("--report", default=None, help="write the results here instead of stdout")
        parser.add_argument("--json", action="store_true", help="machine-readable results")
        parser.add_argument("--config", default=None)

    def run(self, **options):
        cfg = self.load_config(options["config"])
        which = [name for name in EXPERIMENTS if name in options["which"]]
        needs_model = {"corrector", "clean"} & set(which)
        if needs_model and not options["weights"] and "ablation" not in which:
            raise CommandError("the corrector and clean experiments need --weights or the ablation experiment")

        exp_cfg = ExperimentConfig(
            pipeline=cfg, sequences=options["sequences"], train_sequences=options["train_sequences"],
            seconds=options["seconds"], magnets=options["magnets"], seed=options["seed"],
            skip_seconds=options["skip_seconds"], workers=self.threads(),
        )
        skeleton = cfg.skeleton()
        results = []
        model = load_weights(options["weights"]) if options["weights"] else None
        if "detector" in which:
            results.append(detector_ordering(exp_cfg, skeleton))
        if "ablation" in which:
            train_cfg = TrainConfig(epochs=options["epochs"], hidden=options["hidden"], window=options["window"],
                                    seed=settings.MAGSHIELD_DEFAULT_SEED, threads=self.threads())
            outcome, models = training_ablation(exp_cfg, train_cfg, skeleton)
            results.append(outcome)
            model = model or models["magnetic"]
        if "corrector" in which:
            results.append(corrector_ordering(exp_cfg, model, skeleton))
        if "clean" in which:
            results.append(clean_field_check(exp_cfg, model, skeleton))

        if options["json"]:
            text = json.dumps({r.name: r.to_dict() for r in results}, indent=2, sort_keys=True)
        else:
            text = format_results(results)
        if options["report"]:
            path = Path(options["report"])
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text + "\n", encoding="utf-8")
        else:
            self.stdout.write(text)
