import logging

from django.conf import settings

from shield import formats
from shield.corrector import SequenceSet, TrainConfig, build_inputs, mean_abs_error, save_weights, train
from shield.exceptions import DatasetError, TrainingDivergedError
from shield.management.base import ShieldCommand
from shield.synth import split_files

logger = logging.getLogger(__name__)


def load_split(data_dir, split: str, gravity) -> SequenceSet:
    out = SequenceSet()
    for path in split_files(data_dir, split):
        records = formats.read_dataset(path)
        out.add(build_inputs(records["a_G"], records["R_err"], gravity), records["delta"])
    return out


class Command(ShieldCommand):
    help = "Train the yaw corrector on a synthesized dataset and write a weight file."

    def add_arguments(self, parser):
        defaults = TrainConfig()
        parser.add_argument("--data", default=str(settings.MAGSHIELD_DATA_DIR))
        parser.add_argument("--epochs", type=int, default=defaults.epochs)
        parser.add_argument("--out-weights", required=True)
        parser.add_argument("--lr", type=float, default=defaults.lr)
        parser.add_argument("--batch-size", type=int, default=defaults.batch_size)
        parser.add_argument("--window", type=int, default=defaults.window, help="TBPTT window in frames")
        parser.add_argument("--dropout", type=float, default=defaults.dropout)
        parser.add_argument("--hidden", type=int, default=defaults.hidden)
        parser.add_argument("--patience", type=int, default=defaults.patience)
        parser.add_argument("--seed", type=int, default=settings.MAGSHIELD_DEFAULT_SEED)
        parser.add_argument("--log", default=None, help="per-epoch JSON lines log")
        parser.add_argument("--config", default=None)

    def run(self, **options):
        cfg = self.load_config(options["config"])
        gravity = cfg.gravity_direction
        train_set = load_split(options["data"], "train", gravity)
        if not len(train_set):
            raise DatasetError(f"no training sequences under {options['data']}/train")
        val_set = load_split(options["data"], "val", gravity)

        train_cfg = TrainConfig(
            batch_size=options["batch_size"], dropout=options["dropout"], lr=options["lr"],
            window=options["window"], epochs=options["epochs"], patience=options["patience"],
            hidden=options["hidden"], seed=options["seed"], threads=self.threads(),
        )
        result = train(train_set, val_set, train_cfg)
        if options["log"]:
            formats.write_log(options["log"], result.log)
        if result.diverged and result.best_epoch == 0:
            raise TrainingDivergedError("training diverged before the first finite checkpoint")
        if result.diverged:
            self.stderr.write(f"training diverged; keeping epoch {result.best_epoch}")
        save_weights(result.model, options["out_weights"])

        report = val_set if len(val_set) else train_set
        mae = mean_abs_error(result.model, report)
        self.stdout.write(f"best epoch {result.best_epoch}  val loss {result.best_val_loss:.6f}  "
                          f"val MAE {mae:.6f} rad -> {options['out_weights']}")
