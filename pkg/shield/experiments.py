"""Paired experiments on synthetic sequences.

Both arms of an experiment replay the same scenes (same trajectory, magnets
and sensor noise), so they differ only in the component being compared:
detector neighbourhood size, the learned corrector, or the synthesis mode
the corrector was trained on.
"""

from __future__ import annotations

import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from shield.corrector import SequenceSet, TrainConfig, YawCorrector, mean_abs_error, train
from shield.detector import Skeleton
from shield.exceptions import ConfigError
from shield.motions import MotionParams
from shield.pipeline import (ErrorSet, Pipeline, PipelineConfig, RawFrame, error_set, errors_for, report,
                             run_frames)
from shield.synth import (EnvParams, NoiseParams, SynthConfig, run_erroneous, sequence_seed, synthesize_scene,
                          synthesize_sequence)

logger = logging.getLogger(__name__)

EXPERIMENTS = ("detector", "corrector", "ablation", "clean")

DETECTOR_MIN_IMPROVEMENT = 0.10
CORRECTOR_MIN_IMPROVEMENT = 0.15
CLEAN_FIELD_MAX_EXCESS_DEG = 0.5
# Isolated magnitude false alarms at 3 sigma lift w for a frame or two.
CLEAN_FIELD_MAX_MEAN_WEIGHT = 0.01

# Evaluation scenes are drawn from sequence indices at and above this one;
# training scenes come from below it.
HELD_OUT_INDEX = 100_000


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    sequences: int = 20
    train_sequences: int = 20
    seconds: float = 120.0
    magnets: int = 4
    seed: int = 1000
    skip_seconds: float = 5.0
    workers: int = 1

    def __post_init__(self):
        if self.sequences < 1 or self.train_sequences < 1:
            raise ConfigError("sequences and train_sequences must be positive")
        if self.magnets < 0 or self.skip_seconds < 0:
            raise ConfigError("magnets and skip_seconds must be >= 0")
        if self.n_frames <= max(self.pipeline.init_frames, self.skip_frames):
            raise ConfigError("sequences must be longer than the init window and the skipped prefix")

    @property
    def n_frames(self) -> int:
        return int(round(self.seconds * self.pipeline.sample_rate))

    @property
    def skip_frames(self) -> int:
        return int(round(self.skip_seconds * self.pipeline.sample_rate))

    def synth_config(self, mode: str = "magnetic", magnets: int | None = None) -> SynthConfig:
        p = self.pipeline
        return SynthConfig(mode=mode, sample_rate=p.sample_rate, init_seconds=p.init_seconds,
                           env=EnvParams(n_magnets=self.magnets if magnets is None else magnets),
                           noise=NoiseParams.from_eskf(p.eskf), motion=MotionParams(sample_rate=p.sample_rate),
                           detector=p.detector, eskf=p.eskf)


@dataclass
class ExperimentResult:
    """``baseline`` and ``treatment`` are the compared metric values; lower is better."""

    name: str
    metric: str
    baseline: float
    treatment: float
    passed: bool
    details: dict = field(default_factory=dict)

    @property
    def improvement(self) -> float:
        return (self.baseline - self.treatment) / self.baseline if self.baseline > 0 else 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["improvement"] = self.improvement
        return out


def _map(fn: Callable, jobs: Sequence[tuple], workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(job) for job in jobs]
    context = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs)), mp_context=context) as ex:
        return list(ex.map(fn, jobs))


def _seeds(cfg: ExperimentConfig, start: int, n: int) -> list[np.random.SeedSequence]:
    return [sequence_seed(cfg.seed, start + i) for i in range(n)]


# ---------------------------------------------------------------- jobs

def _detector_job(job: tuple) -> dict:
    seed, synth_cfg, n_frames, skeleton, skip_frames, ks = job
    scene = synthesize_scene(seed, synth_cfg, n_frames, skeleton)
    g = -synth_cfg.eskf.up
    out = {}
    for k in ks:
        run = run_erroneous(scene.raw, replace(synth_cfg.detector, k=k), synth_cfg.eskf, skeleton,
                            synth_cfg.init_frames)
        errors = error_set(run.R, scene.trajectory.R, run.flags, scene.disturbed, gravity=g,
                           skip_frames=skip_frames)
        out[k] = report(errors)["yaw"]["mean"]
    return out


def _pipeline_job(job: tuple) -> tuple[ErrorSet, ErrorSet]:
    seed, synth_cfg, n_frames, skeleton, pipeline_cfg, model, skip_seconds = job
    torch.set_num_threads(1)
    scene = synthesize_scene(seed, synth_cfg, n_frames, skeleton)
    frames = [RawFrame(t / pipeline_cfg.sample_rate, scene.raw[t]) for t in range(len(scene.raw))]
    truth = {"R_gt": scene.trajectory.R, "disturbed": scene.disturbed}
    stage1_cfg = replace(pipeline_cfg, weights_path=None)
    sets = []
    for pipeline in (Pipeline(stage1_cfg), Pipeline(stage1_cfg, model)):
        outputs = run_frames(pipeline, frames)
        sets.append(errors_for(outputs, truth, skip_seconds, pipeline_cfg.sample_rate,
                               pipeline_cfg.gravity_direction))
    return sets[0], sets[1]


def _training_job(job: tuple) -> tuple[np.ndarray, np.ndarray]:
    seed, synth_cfg, n_frames, skeleton = job
    seq = synthesize_sequence(seed, synth_cfg, n_frames, skeleton)
    return seq.features(-synth_cfg.eskf.up), seq.delta


# ---------------------------------------------------------------- experiments

def detector_ordering(cfg: ExperimentConfig, skeleton: Skeleton | None = None) -> ExperimentResult:
    """Mean IMU yaw error of stage 1 with a single-IMU detector (k=1) against the k=3 neighbourhood."""
    synth_cfg = cfg.synth_config()
    jobs = [(seed, synth_cfg, cfg.n_frames, skeleton, cfg.skip_frames, (1, 3))
            for seed in _seeds(cfg, HELD_OUT_INDEX, cfg.sequences)]
    per_sequence = _map(_detector_job, jobs, cfg.workers)
    k1 = float(np.mean([r[1] for r in per_sequence]))
    k3 = float(np.mean([r[3] for r in per_sequence]))
    result = ExperimentResult("detector", "mean yaw error (deg)", k1, k3, False,
                              {"sequences": len(per_sequence), "magnets": cfg.magnets})
    result.passed = k3 < k1 and result.improvement >= DETECTOR_MIN_IMPROVEMENT
    logger.info("detector ordering: k=1 %.3f deg, k=3 %.3f deg", k1, k3)
    return result


def _paired_pipelines(cfg: ExperimentConfig, model: YawCorrector, magnets: int,
                      skeleton: Skeleton | None) -> tuple[ErrorSet, ErrorSet]:
    synth_cfg = cfg.synth_config(magnets=magnets)
    jobs = [(seed, synth_cfg, cfg.n_frames, skeleton, cfg.pipeline, model, cfg.skip_seconds)
            for seed in _seeds(cfg, HELD_OUT_INDEX, cfg.sequences)]
    pairs = _map(_pipeline_job, jobs, cfg.workers)
    return ErrorSet.concat([p[0] for p in pairs]), ErrorSet.concat([p[1] for p in pairs])


def corrector_ordering(cfg: ExperimentConfig, model: YawCorrector,
                       skeleton: Skeleton | None = None) -> ExperimentResult:
    """Mean leaf yaw error of stage 1 alone against stage 1 followed by the corrector."""
    stage1, corrected = _paired_pipelines(cfg, model, cfg.magnets, skeleton)
    base = report(stage1)["leaf_yaw"]["mean"]
    treated = report(corrected)["leaf_yaw"]["mean"]
    result = ExperimentResult("corrector", "mean leaf yaw error (deg)", base, treated, False,
                              {"sequences": cfg.sequences, "magnets": cfg.magnets,
                               "w_mean": float(np.mean(corrected.w))})
    result.passed = treated < base and result.improvement >= CORRECTOR_MIN_IMPROVEMENT
    logger.info("corrector ordering: stage 1 %.3f deg, corrected %.3f deg", base, treated)
    return result


def clean_field_check(cfg: ExperimentConfig, model: YawCorrector,
                      skeleton: Skeleton | None = None) -> ExperimentResult:
    """Without magnets the full pipeline must match stage 1 and keep the corrector weight near zero."""
    stage1, corrected = _paired_pipelines(cfg, model, 0, skeleton)
    base = report(stage1)["orientation"]["mean"]
    treated = report(corrected)["orientation"]["mean"]
    w_max = float(np.max(corrected.w)) if len(corrected.w) else 0.0
    w_mean = float(np.mean(corrected.w)) if len(corrected.w) else 0.0
    result = ExperimentResult("clean", "mean orientation error (deg)", base, treated, False,
                              {"sequences": cfg.sequences, "w_max": w_max, "w_mean": w_mean,
                               "excess_deg": treated - base})
    result.passed = treated - base < CLEAN_FIELD_MAX_EXCESS_DEG and w_mean < CLEAN_FIELD_MAX_MEAN_WEIGHT
    logger.info("clean field: stage 1 %.3f deg, full pipeline %.3f deg, mean w %.4f", base, treated, w_mean)
    return result


def _sequence_set(pairs: Sequence[tuple[np.ndarray, np.ndarray]]) -> SequenceSet:
    out = SequenceSet()
    for features, labels in pairs:
        out.add(features, labels)
    return out


def _split(pairs: list) -> tuple[list, list]:
    n_val = max(1, len(pairs) // 5) if len(pairs) > 1 else 0
    return pairs[:len(pairs) - n_val], pairs[len(pairs) - n_val:]


def training_ablation(cfg: ExperimentConfig, train_cfg: TrainConfig,
                      skeleton: Skeleton | None = None) -> tuple[ExperimentResult, dict[str, YawCorrector]]:
    """Train one corrector per synthesis mode and compare their MAE on held-out magnetic sequences.

    Both modes share the training trajectories; only the label source differs.
    """
    train_seeds = _seeds(cfg, 0, cfg.train_sequences)
    test_jobs = [(seed, cfg.synth_config("magnetic"), cfg.n_frames, skeleton)
                 for seed in _seeds(cfg, HELD_OUT_INDEX, cfg.sequences)]
    test_set = _sequence_set(_map(_training_job, test_jobs, cfg.workers))

    maes, models = {}, {}
    for mode in ("magnetic", "naive"):
        jobs = [(seed, cfg.synth_config(mode), cfg.n_frames, skeleton) for seed in train_seeds]
        train_pairs, val_pairs = _split(_map(_training_job, jobs, cfg.workers))
        result = train(_sequence_set(train_pairs), _sequence_set(val_pairs), train_cfg)
        models[mode] = result.model
        maes[mode] = mean_abs_error(result.model, test_set)
        logger.info("%s-mode corrector: best epoch %d, test MAE %.5f rad", mode, result.best_epoch, maes[mode])

    outcome = ExperimentResult("ablation", "test MAE (rad)", maes["naive"], maes["magnetic"],
                               maes["magnetic"] <= maes["naive"],
                               {"train_sequences": cfg.train_sequences, "test_sequences": cfg.sequences})
    return outcome, models


def format_results(results: Sequence[ExperimentResult]) -> str:
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<10} {status}  {r.metric}: baseline {r.baseline:.4f}  treatment {r.treatment:.4f}  "
                     f"improvement {100.0 * r.improvement:.1f}%")
        for key, value in sorted(r.details.items()):
            lines.append(f"    {key}: {value:.4f}" if isinstance(value, float) else f"    {key}: {value}")
    return "\n".join(lines)
