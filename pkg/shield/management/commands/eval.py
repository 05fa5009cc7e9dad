import json
from pathlib import Path

from django.core.management.base import CommandError

from shield import formats
from shield.management.base import ShieldCommand
from shield.pipeline import evaluate_many, format_report

PRED_SUFFIX = ".out.jsonl"
GT_SUFFIX = ".data.jsonl"


def _sequence_name(path: Path, suffix: str) -> str:
    name = path.name
    return name[: -len(suffix)] if name.endswith(suffix) else path.stem


def pair_paths(pred: str, gt: str) -> list[tuple[Path, Path]]:
    """Pair prediction and ground-truth files; directories are matched by sequence name."""
    pred_path, gt_path = Path(pred), Path(gt)
    if pred_path.is_file() and gt_path.is_file():
        return [(pred_path, gt_path)]
    if not (pred_path.is_dir() and gt_path.is_dir()):
        raise CommandError("--pred and --gt must both be files or both be directories")
    truths = {_sequence_name(p, GT_SUFFIX): p for p in sorted(gt_path.rglob(f"*{GT_SUFFIX}"))}
    pairs = []
    for p in sorted(pred_path.rglob(f"*{PRED_SUFFIX}")):
        name = _sequence_name(p, PRED_SUFFIX)
        if name not in truths:
            raise CommandError(f"no ground truth for {p.name} under {gt}")
        pairs.append((p, truths[name]))
    if not pairs:
        raise CommandError(f"no *{PRED_SUFFIX} files under {pred}")
    return pairs


class Command(ShieldCommand):
    help = "Compare pipeline outputs with ground-truth dataset records."

    def add_arguments(self, parser):
        parser.add_argument("--pred", required=True, help="pipeline output file or directory")
        parser.add_argument("--gt", required=True, help="dataset record file or directory")
        parser.add_argument("--report", default=None, help="write the report here instead of stdout")
        parser.add_argument("--json", action="store_true", help="machine-readable report")
        parser.add_argument("--skip-seconds", type=float, default=0.0)
        parser.add_argument("--config", default=None)

    def run(self, **options):
        cfg = self.load_config(options["config"])
        pairs = [(formats.read_outputs(p), formats.read_dataset(g))
                 for p, g in pair_paths(options["pred"], options["gt"])]
        report = evaluate_many(pairs, skip_seconds=options["skip_seconds"], sample_rate=cfg.sample_rate,
                               workers=self.threads(), gravity=cfg.gravity_direction)
        text = json.dumps(report, indent=2, sort_keys=True) if options["json"] else format_report(report)
        if options["report"]:
            path = Path(options["report"])
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text + "\n", encoding="utf-8")
        else:
            self.stdout.write(text)
