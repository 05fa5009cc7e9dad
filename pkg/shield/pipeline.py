"""Two-stage orchestration: detector + ESKF fusion, then learned yaw correction.

Stage 1 places the IMUs with forward kinematics from the previous frame's
output orientations, flags usable magnetometers, and steps one ESKF per IMU.
Stage 2 feeds root-relative readings to the corrector and rotates the leaf
readings about gravity by the weighted predicted error.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from shield import eskf
from shield.corrector import CorrectorStream, YawCorrector, apply_correction, build_input, load_weights, update_weight
from shield.detector import IMU_COUNT, IMU_NAMES, ROOT_INDEX, DetectorConfig, Skeleton, compute_flags, positions_from_pose
from shield.exceptions import ConfigError, CorruptFrameError, PipelineStateError
from shield.rotmath import geodesic_angle_many, yaw_between_many

logger = logging.getLogger(__name__)

_CONFIG_KEYS = {"detector", "eskf", "weights", "skeleton", "sample_rate", "init_seconds"}


@dataclass(frozen=True)
class PipelineConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eskf: eskf.EskfConfig = field(default_factory=eskf.EskfConfig)
    weights_path: str | None = None
    skeleton_path: str | None = None
    sample_rate: float = 100.0
    init_seconds: float = 3.0

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ConfigError("sample_rate must be positive")
        if abs(self.eskf.dt * self.sample_rate - 1.0) > 1e-6:
            raise ConfigError(f"ESKF dt {self.eskf.dt} does not match sample rate {self.sample_rate} Hz")
        if self.init_frames < self.eskf.min_init_frames:
            raise ConfigError("init window shorter than the ESKF minimum")

    @property
    def init_frames(self) -> int:
        return int(round(self.init_seconds * self.sample_rate))

    @property
    def gravity_direction(self) -> NDArray[np.float64]:
        return -self.eskf.up

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path | None = None) -> "PipelineConfig":
        unknown = set(data) - _CONFIG_KEYS
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        sample_rate = float(data.get("sample_rate", 100.0))
        eskf_data = dict(data.get("eskf") or {})
        eskf_data.setdefault("dt", 1.0 / sample_rate)
        for key in ("g_ref", "n_ref"):
            if key in eskf_data:
                eskf_data[key] = tuple(eskf_data[key])
        try:
            detector_cfg = DetectorConfig(**(data.get("detector") or {}))
            eskf_cfg = eskf.EskfConfig(**eskf_data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

        def _resolve(value):
            if not value:
                return None
            path = Path(value)
            if base_dir is not None and not path.is_absolute():
                path = Path(base_dir) / path
            return str(path)

        return cls(detector_cfg, eskf_cfg, _resolve(data.get("weights")), _resolve(data.get("skeleton")),
                   sample_rate, float(data.get("init_seconds", 3.0)))

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(data, base_dir=Path(path).resolve().parent)

    def to_dict(self) -> dict:
        return {
            "detector": asdict(self.detector),
            "eskf": self.eskf.to_dict(),
            "weights": self.weights_path,
            "skeleton": self.skeleton_path,
            "sample_rate": self.sample_rate,
            "init_seconds": self.init_seconds,
        }

    def skeleton(self) -> Skeleton:
        return Skeleton.load(self.skeleton_path) if self.skeleton_path else Skeleton.default()


@dataclass(frozen=True)
class RawFrame:
    """Sensor-local readings of all six IMUs: ``data[i] = [a_S, w_S, m_S]``."""

    t: float
    data: NDArray[np.float64]


@dataclass(frozen=True)
class FrameOutput:
    t: float
    R: NDArray[np.float64]          # (6, 3, 3) corrected global orientations
    acc: NDArray[np.float64]        # (6, 3) corrected global accelerations
    gyro: NDArray[np.float64]       # (6, 3) corrected global angular rates
    flags: NDArray[np.bool_]        # (6,)
    w: float
    delta: NDArray[np.float64]      # (5,)
    root_mag: NDArray[np.float64]   # (3,) root magnetometer in the global frame
    degraded: bool = False


class Stage1Fusion:
    """Detector plus one ESKF per IMU, stepped as a single filter bank.

    A gyroscope sample covers the interval from its own frame to the next, so
    frame ``t`` is reached by integrating the rate recorded at ``t - 1`` before
    the frame's accelerometer and magnetometer corrections.
    """

    def __init__(self, detector_cfg: DetectorConfig, eskf_cfg: eskf.EskfConfig, skeleton: Skeleton | None = None):
        self.detector_cfg = detector_cfg
        self.eskf_cfg = eskf_cfg
        self.skeleton = skeleton or Skeleton.default()
        self.bank: eskf.EskfBank | None = None
        self._rate = np.zeros((IMU_COUNT, 3))

    @property
    def initialized(self) -> bool:
        return self.bank is not None

    def initialize(self, init_frames: ArrayLike) -> NDArray[np.float64]:
        frames = np.asarray(init_frames, dtype=np.float64)
        self.bank = eskf.EskfBank.stack([eskf.init(frames[:, i], self.eskf_cfg) for i in range(IMU_COUNT)])
        self._rate = np.zeros((IMU_COUNT, 3))
        return self.orientations()

    def orientations(self) -> NDArray[np.float64]:
        if self.bank is None:
            raise PipelineStateError("pipeline not initialized")
        return self.bank.R_G.copy()

    def flags(self, raw: NDArray[np.float64], previous_R: NDArray[np.float64]) -> NDArray[np.bool_]:
        positions = positions_from_pose(previous_R[:ROOT_INDEX], previous_R[ROOT_INDEX], self.skeleton)
        magnitudes = np.linalg.norm(raw[:, 6:9] * self.eskf_cfg.mag_scale, axis=1)
        return compute_flags(magnitudes, positions, self.detector_cfg)

    def step(self, raw: NDArray[np.float64], previous_R: NDArray[np.float64],
             flags: Sequence[bool] | None = None):
        """Returns ``(flags, R, acc, gyro)``; raises :class:`CorruptFrameError` without touching state."""
        if self.bank is None:
            raise PipelineStateError("pipeline not initialized")
        if not np.all(np.isfinite(raw)):
            raise CorruptFrameError()
        if flags is None:
            flags = self.flags(raw, previous_R)
        flags = np.asarray(flags, dtype=bool)
        self.bank = eskf.step_bank(self.bank, raw[:, 0:3], self._rate, raw[:, 6:9], flags, self.eskf_cfg)
        self._rate = raw[:, 3:6].copy()
        acc, gyro = eskf.global_readings_bank(self.bank, raw[:, 0:3], raw[:, 3:6])
        return flags, self.bank.R_G.copy(), acc, gyro


class Pipeline:
    """One instance per stream; sequential within the stream."""

    def __init__(self, config: PipelineConfig | None = None, model: YawCorrector | None = None):
        self.config = config or PipelineConfig()
        if model is None and self.config.weights_path:
            model = load_weights(self.config.weights_path)
        self.model = model
        self.stage1 = Stage1Fusion(self.config.detector, self.config.eskf, self.config.skeleton())
        self.corrector = CorrectorStream(model) if model is not None else None
        self.gravity = self.config.gravity_direction
        self.w = 0.0
        self._previous_R: NDArray[np.float64] | None = None
        self._last: FrameOutput | None = None

    @property
    def initialized(self) -> bool:
        return self.stage1.initialized

    @property
    def stage1_only(self) -> bool:
        return self.corrector is None

    def initialize(self, init_frames: Sequence[RawFrame] | ArrayLike) -> None:
        data = np.array([f.data for f in init_frames]) if _is_frames(init_frames) else np.asarray(init_frames)
        self._previous_R = self.stage1.initialize(data)
        self.w = 0.0
        self._last = None
        if self.corrector is not None:
            self.corrector.reset()

    def process_frame(self, frame: RawFrame) -> FrameOutput:
        if not self.initialized:
            raise PipelineStateError("pipeline not initialized")
        try:
            flags, R, acc, gyro = self.stage1.step(frame.data, self._previous_R)
        except CorruptFrameError:
            logger.warning("corrupt frame at t=%.3f; holding last orientation", frame.t)
            return self._degraded(frame.t)

        root_mag = R[ROOT_INDEX] @ (frame.data[ROOT_INDEX, 6:9] * self.config.eskf.mag_scale)
        if self.corrector is not None:
            delta = self.corrector(build_input(acc, R, self.gravity))
        else:
            delta = np.zeros(IMU_COUNT - 1)
        self.w = update_weight(self.w, flags)

        R_out, acc_out, gyro_out = R.copy(), acc.copy(), gyro.copy()
        R_out[:ROOT_INDEX], acc_out[:ROOT_INDEX], gyro_out[:ROOT_INDEX] = apply_correction(
            R[:ROOT_INDEX], acc[:ROOT_INDEX], gyro[:ROOT_INDEX], delta, self.w, self.gravity)
        self._previous_R = R_out
        self._last = FrameOutput(frame.t, R_out, acc_out, gyro_out, flags, self.w, delta, root_mag)
        return self._last

    def _degraded(self, t: float) -> FrameOutput:
        if self._last is not None:
            return replace(self._last, t=t, degraded=True)
        zeros = np.zeros((IMU_COUNT, 3))
        return FrameOutput(t, self._previous_R.copy(), zeros, zeros.copy(), np.zeros(IMU_COUNT, dtype=bool),
                           self.w, np.zeros(IMU_COUNT - 1), np.zeros(3), degraded=True)


def _is_frames(items) -> bool:
    return isinstance(items, (list, tuple)) and bool(items) and isinstance(items[0], RawFrame)


class StreamingSession:
    """Buffers the init window, initializes, then emits one output per input frame."""

    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline
        self._pending: list[RawFrame] = []
        self.emitted = 0

    def push(self, frame: RawFrame) -> list[FrameOutput]:
        if self.pipeline.initialized:
            self.emitted += 1
            return [self.pipeline.process_frame(frame)]
        self._pending.append(frame)
        if len(self._pending) < self.pipeline.config.init_frames:
            return []
        pending, self._pending = self._pending, []
        self.pipeline.initialize(pending)
        out = [self.pipeline.process_frame(f) for f in pending]
        self.emitted += len(out)
        return out

    def finish(self) -> None:
        if not self.pipeline.initialized:
            raise PipelineStateError(
                f"stream ended after {len(self._pending)} frames, before the init window completed")


def run_frames(pipeline: Pipeline, frames: Iterable[RawFrame]) -> list[FrameOutput]:
    """Batch processing; identical to pushing the frames one by one through a session."""
    session = StreamingSession(pipeline)
    outputs: list[FrameOutput] = []
    for frame in frames:
        outputs.extend(session.push(frame))
    session.finish()
    return outputs


# ---------------------------------------------------------------- evaluation

def _stats(values_rad: NDArray[np.float64]) -> dict:
    if values_rad.size == 0:
        return {"mean": None, "median": None, "p95": None}
    deg = np.degrees(values_rad)
    return {"mean": float(np.mean(deg)), "median": float(np.median(deg)), "p95": float(np.percentile(deg, 95))}


@dataclass
class ErrorSet:
    """Per-frame, per-IMU errors used to build a report; pooled across sequences by concatenation."""

    geodesic: NDArray[np.float64]     # (N, 6) radians
    yaw: NDArray[np.float64]          # (N, 6) absolute radians
    flags: NDArray[np.bool_]          # (N, 6)
    disturbed: NDArray[np.bool_] | None
    w: NDArray[np.float64]            # (N,)
    degraded: int = 0

    @classmethod
    def concat(cls, sets: Sequence["ErrorSet"]) -> "ErrorSet":
        masks = [s.disturbed for s in sets]
        return cls(np.concatenate([s.geodesic for s in sets]), np.concatenate([s.yaw for s in sets]),
                   np.concatenate([s.flags for s in sets]),
                   None if any(m is None for m in masks) else np.concatenate(masks),
                   np.concatenate([s.w for s in sets]), sum(s.degraded for s in sets))


def error_set(pred_R: ArrayLike, gt_R: ArrayLike, flags: ArrayLike | None = None,
              disturbed: ArrayLike | None = None, w: ArrayLike | None = None,
              degraded: ArrayLike | None = None, gravity: ArrayLike = (0.0, 0.0, -1.0),
              skip_frames: int = 0) -> ErrorSet:
    pred_R = np.asarray(pred_R, dtype=np.float64)
    gt_R = np.asarray(gt_R, dtype=np.float64)
    if pred_R.shape != gt_R.shape:
        raise ConfigError(f"length mismatch: {len(pred_R)} predicted frames vs {len(gt_R)} ground-truth frames")
    n = len(pred_R)
    keep = np.ones(n, dtype=bool)
    keep[:skip_frames] = False
    degraded_mask = np.zeros(n, dtype=bool) if degraded is None else np.asarray(degraded, dtype=bool)
    keep &= ~degraded_mask
    idx = np.flatnonzero(keep)
    geo = geodesic_angle_many(pred_R[idx], gt_R[idx])
    yaw = np.abs(yaw_between_many(pred_R[idx], gt_R[idx], gravity))
    flags_arr = np.ones((n, IMU_COUNT), dtype=bool) if flags is None else np.asarray(flags, dtype=bool)
    w_arr = np.zeros(n) if w is None else np.asarray(w, dtype=np.float64)
    mask = None if disturbed is None else np.asarray(disturbed, dtype=bool)[idx]
    return ErrorSet(geo, yaw, flags_arr[idx], mask, w_arr[idx], int(degraded_mask.sum()))


def report(errors: ErrorSet) -> dict:
    """Metrics in degrees: mean/median/p95 geodesic and yaw errors, per-IMU breakdown, flag quality."""
    out = {
        "frames": int(len(errors.geodesic)),
        "degraded_frames": errors.degraded,
        "orientation": _stats(errors.geodesic.ravel()),
        "yaw": _stats(errors.yaw.ravel()),
        "leaf_yaw": _stats(errors.yaw[:, :ROOT_INDEX].ravel()),
        "per_imu": {
            name: {"orientation": _stats(errors.geodesic[:, i]), "yaw": _stats(errors.yaw[:, i])}
            for i, name in enumerate(IMU_NAMES)
        },
        "w_mean": float(np.mean(errors.w)) if len(errors.w) else None,
        "w_final": float(errors.w[-1]) if len(errors.w) else None,
    }
    if errors.disturbed is not None:
        predicted = ~errors.flags
        actual = errors.disturbed
        tp = int(np.sum(predicted & actual))
        fp = int(np.sum(predicted & ~actual))
        fn = int(np.sum(~predicted & actual))
        out["detection"] = {
            "true_positive": tp, "false_positive": fp, "false_negative": fn,
            "precision": tp / (tp + fp) if tp + fp else None,
            "recall": tp / (tp + fn) if tp + fn else None,
        }
    return out


def evaluate(outputs: Sequence[FrameOutput], ground_truth: dict, skip_seconds: float = 0.0,
             sample_rate: float = 100.0, gravity: ArrayLike = (0.0, 0.0, -1.0)) -> dict:
    """Compare an output stream with a ground-truth record set (``R_gt`` and optional ``disturbed``)."""
    return report(errors_for(outputs, ground_truth, skip_seconds, sample_rate, gravity))


def errors_for(outputs: Sequence[FrameOutput], ground_truth: dict, skip_seconds: float = 0.0,
               sample_rate: float = 100.0, gravity: ArrayLike = (0.0, 0.0, -1.0)) -> ErrorSet:
    gt_R = np.asarray(ground_truth["R_gt"])
    if len(outputs) != len(gt_R):
        raise ConfigError(f"length mismatch: {len(outputs)} predicted frames vs {len(gt_R)} ground-truth frames")
    return error_set(
        np.array([o.R for o in outputs]), gt_R,
        flags=np.array([o.flags for o in outputs]),
        disturbed=ground_truth.get("disturbed"),
        w=np.array([o.w for o in outputs]),
        degraded=np.array([o.degraded for o in outputs]),
        gravity=gravity,
        skip_frames=int(round(skip_seconds * sample_rate)),
    )


def evaluate_many(pairs: Sequence[tuple[Sequence[FrameOutput], dict]], skip_seconds: float = 0.0,
                  sample_rate: float = 100.0, workers: int = 1,
                  gravity: ArrayLike = (0.0, 0.0, -1.0)) -> dict:
    """Pooled report over several sequences; per-sequence error extraction runs on a thread pool."""
    def _one(pair):
        outputs, gt = pair
        return errors_for(outputs, gt, skip_seconds, sample_rate, gravity)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        sets = list(ex.map(_one, pairs))
    if not sets:
        raise ConfigError("nothing to evaluate")
    pooled = report(ErrorSet.concat(sets))
    pooled["sequences"] = len(sets)
    return pooled


def format_report(rep: dict) -> str:
    """Human-readable rendering of :func:`report` output."""
    def _fmt(stats: dict) -> str:
        if stats["mean"] is None:
            return "n/a"
        return f"mean {stats['mean']:.3f}  median {stats['median']:.3f}  p95 {stats['p95']:.3f}"

    lines = [f"frames: {rep['frames']}  degraded: {rep['degraded_frames']}"]
    if "sequences" in rep:
        lines.append(f"sequences: {rep['sequences']}")
    lines.append(f"orientation error (deg): {_fmt(rep['orientation'])}")
    lines.append(f"yaw error (deg):         {_fmt(rep['yaw'])}")
    lines.append(f"leaf yaw error (deg):    {_fmt(rep['leaf_yaw'])}")
    for name, stats in rep["per_imu"].items():
        lines.append(f"  {name:<5} orientation {_fmt(stats['orientation'])} | yaw {_fmt(stats['yaw'])}")
    if rep.get("w_mean") is not None:
        lines.append(f"w mean {rep['w_mean']:.3f}  final {rep['w_final']:.3f}")
    det = rep.get("detection")
    if det:
        precision = "n/a" if det["precision"] is None else f"{det['precision']:.3f}"
        recall = "n/a" if det["recall"] is None else f"{det['recall']:.3f}"
        lines.append(f"detector precision {precision}  recall {recall}")
    return "\n".join(lines)
