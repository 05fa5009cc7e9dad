"""Training data synthesis.

Raw IMU measurements are synthesized from 6-DoF IMU trajectories inside a
dipole magnetic environment, fused by stage 1 to obtain erroneous
orientations, and labelled with the heading error of every leaf relative to
the root. A "naive" mode skips the magnetic simulation and injects a random
walk on yaw instead.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation as _ScipyRotation

from shield import formats, motions
from shield.corrector import build_inputs
from shield.detector import IMU_COUNT, ROOT_INDEX, DetectorConfig, Skeleton
from shield.eskf import STANDARD_GRAVITY, EskfConfig
from shield.exceptions import ConfigError, DatasetError, TrajectoryError
from shield.magfield import (DEFAULT_DIP_DEG, DEFAULT_MOMENT_RANGE, MagneticEnvironment, Room,
                             disturbance, field_at, field_at_points, random_env)
from shield.pipeline import Stage1Fusion
from shield.rotmath import Rotation, Vec3, log_map, wrap_angles, yaw_between_many

logger = logging.getLogger(__name__)

MODES = ("magnetic", "naive")
G_REF = (0.0, 0.0, -STANDARD_GRAVITY)


@dataclass(frozen=True)
class Trajectory6DoF:
    """Per-frame, per-IMU orientation ``R (T, 6, 3, 3)`` and position ``p (T, 6, 3)`` at a uniform rate."""

    R: NDArray[np.float64]
    p: NDArray[np.float64]
    sample_rate: float = 100.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        if R.ndim != 4 or R.shape[1:] != (IMU_COUNT, 3, 3) or p.shape != (len(R), IMU_COUNT, 3):
            raise TrajectoryError(f"trajectory arrays have shapes {R.shape} and {p.shape}")
        if len(R) < 3:
            raise TrajectoryError("trajectory needs at least 3 frames")
        if not self.sample_rate > 0:
            raise TrajectoryError("sample_rate must be positive")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(p))):
            raise TrajectoryError("trajectory contains non-finite values")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "p", p)

    @property
    def dt(self) -> float:
        return 1.0 / self.sample_rate

    def __len__(self) -> int:
        return len(self.R)

    @classmethod
    def load(cls, path: str | Path, sample_rate: float | None = None) -> "Trajectory6DoF":
        t, R, p = formats.read_trajectory_arrays(path)
        if len(t) >= 2:
            steps = np.diff(t)
            if np.ptp(steps) > 1e-6 * max(1.0, float(np.max(np.abs(steps)))) or not steps[0] > 0:
                raise TrajectoryError(f"{path}: timestamps are not uniformly spaced")
            rate = 1.0 / float(np.mean(steps))
            if sample_rate is not None and abs(rate - sample_rate) > 1e-3 * sample_rate:
                raise TrajectoryError(f"{path}: sampled at {rate:.3f} Hz, expected {sample_rate} Hz")
        else:
            rate = sample_rate or 100.0
        return cls(R, p, sample_rate if sample_rate is not None else rate)

    def save(self, path: str | Path) -> None:
        formats.write_trajectory(path, self.sample_rate, self.R, self.p)


@dataclass(frozen=True)
class NoiseParams:
    accel_std: float = 0.1
    gyro_std: float = 0.01
    mag_std: float = 0.05
    gyro_bias_range: float = 0.02

    def __post_init__(self):
        if min(self.accel_std, self.gyro_std, self.mag_std, self.gyro_bias_range) < 0:
            raise ConfigError("noise parameters must be non-negative")

    @classmethod
    def from_eskf(cls, cfg: EskfConfig, gyro_bias_range: float = 0.02) -> "NoiseParams":
        return cls(cfg.accel_noise, cfg.gyro_noise, cfg.mag_noise, gyro_bias_range)


@dataclass(frozen=True)
class EnvParams:
    n_magnets: int = 4
    room: Room = field(default_factory=Room)
    moment_range: tuple[float, float] = DEFAULT_MOMENT_RANGE
    dip_deg: float = DEFAULT_DIP_DEG
    clearance_m: float = 2.5

    def __post_init__(self):
        if self.n_magnets < 0:
            raise ConfigError("n_magnets must be >= 0")
        if self.clearance_m < 0:
            raise ConfigError("clearance_m must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSequence:
    raw: NDArray[np.float64]          # (T, 6, 9)
    R_gt: NDArray[np.float64]         # (T, 6, 3, 3)
    delta: NDArray[np.float64]        # (T, 5)
    R_err: NDArray[np.float64]        # (T, 6, 3, 3)
    a_G: NDArray[np.float64]          # (T, 6, 3)
    disturbed: NDArray[np.bool_]      # (T, 6)
    env: MagneticEnvironment | None
    sample_rate: float = 100.0

    def __post_init__(self):
        n = len(self.raw)
        if any(len(a) != n for a in (self.R_gt, self.delta, self.R_err, self.a_G, self.disturbed)):
            raise DatasetError("sequence arrays have different lengths")

    def __len__(self) -> int:
        return len(self.raw)

    def features(self, gravity: ArrayLike = (0.0, 0.0, -1.0)) -> NDArray[np.float64]:
        return build_inputs(self.a_G, self.R_err, gravity)

    def save(self, path: str | Path) -> None:
        formats.write_dataset(path, self.sample_rate, self.raw, self.R_gt, self.delta,
                              self.R_err, self.a_G, self.disturbed)


# ---------------------------------------------------------------- measurement synthesis

def synth_mag(R: Rotation, p: Vec3, env: MagneticEnvironment) -> Vec3:
    """Sensor-frame magnetometer reading ``R^T m_G(p)``."""
    return np.asarray(R, dtype=np.float64).T @ field_at(env, p)


def _check_index(traj: Trajectory6DoF, t: int, lo: int, hi: int) -> None:
    if not lo <= t <= hi:
        raise TrajectoryError(f"frame {t} outside [{lo}, {hi}] for a {len(traj)}-frame trajectory")


def synth_accel(traj: Trajectory6DoF, t: int, i: int, g_ref: ArrayLike = G_REF) -> Vec3:
    """Specific force from the central second difference of position."""
    _check_index(traj, t, 1, len(traj) - 2)
    p = traj.p[:, i]
    accel = (p[t + 1] - 2.0 * p[t] + p[t - 1]) / traj.dt ** 2
    return traj.R[t, i].T @ (accel - np.asarray(g_ref, dtype=np.float64))


def synth_gyro(traj: Trajectory6DoF, t: int, i: int) -> Vec3:
    """Body rate from the forward difference ``log(R_t^T R_{t+1}) / dt``."""
    _check_index(traj, t, 0, len(traj) - 2)
    return log_map(traj.R[t, i].T @ traj.R[t + 1, i]) / traj.dt


def synth_clean(traj: Trajectory6DoF, env: MagneticEnvironment, g_ref: ArrayLike = G_REF) -> NDArray[np.float64]:
    """Noise-free ``(T, 6, 9)`` raws; end frames reuse their neighbour's finite difference."""
    R, p, dt = traj.R, traj.p, traj.dt
    R_T = np.swapaxes(R, -1, -2)

    accel = np.empty_like(p)
    accel[1:-1] = (p[2:] - 2.0 * p[1:-1] + p[:-2]) / dt ** 2
    accel[0], accel[-1] = accel[1], accel[-2]
    a_S = np.einsum("tlij,tlj->tli", R_T, accel - np.asarray(g_ref, dtype=np.float64))

    rel = np.einsum("tlij,tljk->tlik", R_T[:-1], R[1:])
    gyro = np.empty_like(p)
    gyro[:-1] = _ScipyRotation.from_matrix(rel.reshape(-1, 3, 3)).as_rotvec().reshape(-1, IMU_COUNT, 3) / dt
    gyro[-1] = gyro[-2]

    m_S = np.einsum("tlij,tlj->tli", R_T, field_at_points(env, p))
    return np.concatenate((a_S, gyro, m_S), axis=2)


def synth_raw(traj: Trajectory6DoF, env: MagneticEnvironment, noise: NoiseParams | None = None,
              seed=None, g_ref: ArrayLike = G_REF) -> NDArray[np.float64]:
    """Noisy raws rounded to float32 precision, as they would be stored on disk."""
    raw = synth_clean(traj, env, g_ref)
    if noise is not None:
        rng = np.random.default_rng(seed)
        bias = rng.uniform(-noise.gyro_bias_range, noise.gyro_bias_range, (IMU_COUNT, 3))
        raw[..., 0:3] += rng.normal(0.0, noise.accel_std, raw[..., 0:3].shape) if noise.accel_std else 0.0
        raw[..., 3:6] += bias + (rng.normal(0.0, noise.gyro_std, raw[..., 3:6].shape) if noise.gyro_std else 0.0)
        raw[..., 6:9] += rng.normal(0.0, noise.mag_std, raw[..., 6:9].shape) if noise.mag_std else 0.0
    return raw.astype(np.float32).astype(np.float64)


# ---------------------------------------------------------------- stage-1 replay and labels

@dataclass
class ErroneousRun:
    R: NDArray[np.float64]        # (T, 6, 3, 3)
    acc: NDArray[np.float64]      # (T, 6, 3)
    gyro: NDArray[np.float64]     # (T, 6, 3)
    flags: NDArray[np.bool_]      # (T, 6)


def run_erroneous(raw: ArrayLike, detector_cfg: DetectorConfig | None = None, eskf_cfg: EskfConfig | None = None,
                  skeleton: Skeleton | None = None, init_frames: int = 300,
                  forced_flags: ArrayLike | None = None) -> ErroneousRun:
    """Stage-1 fusion (detector + ESKF) over a whole raw sequence.

    The first ``init_frames`` frames initialize the filters, which are then
    stepped from frame 0. ``forced_flags`` of shape ``(T, 6)`` bypasses the
    detector.
    """
    raw = np.asarray(raw, dtype=np.float64)
    fusion = Stage1Fusion(detector_cfg or DetectorConfig(), eskf_cfg or EskfConfig(), skeleton)
    previous = fusion.initialize(raw[:init_frames])
    forced = None if forced_flags is None else np.asarray(forced_flags, dtype=bool)
    T = len(raw)
    out = ErroneousRun(np.empty((T, IMU_COUNT, 3, 3)), np.empty((T, IMU_COUNT, 3)),
                       np.empty((T, IMU_COUNT, 3)), np.empty((T, IMU_COUNT), dtype=bool))
    for t in range(T):
        flags, R, acc, gyro = fusion.step(raw[t], previous, None if forced is None else forced[t])
        out.R[t], out.acc[t], out.gyro[t], out.flags[t] = R, acc, gyro, flags
        previous = R
    return out


def label_relative_yaw(R_err: ArrayLike, R_gt: ArrayLike, g: ArrayLike = (0.0, 0.0, -1.0)) -> NDArray[np.float64]:
    """Per-leaf heading error minus the root's, wrapped to (-pi, pi]; shape ``(T, 5)``."""
    theta = yaw_between_many(R_err, R_gt, g)
    leaves = [i for i in range(IMU_COUNT) if i != ROOT_INDEX]
    return wrap_angles(theta[:, leaves] - theta[:, [ROOT_INDEX]])


def yaw_walk(rng: np.random.Generator, n_frames: int, start_frame: int, std_per_sqrt_s: float,
             sample_rate: float) -> NDArray[np.float64]:
    """Independent per-IMU heading random walks ``(T, 6)``, zero before ``start_frame``."""
    steps = rng.normal(0.0, std_per_sqrt_s / math.sqrt(sample_rate), (n_frames, IMU_COUNT))
    steps[:start_frame] = 0.0
    return np.cumsum(steps, axis=0)


def rotate_about_gravity(R: ArrayLike, angles: ArrayLike, g: ArrayLike = (0.0, 0.0, -1.0)) -> NDArray[np.float64]:
    """``rot_about_axis(g, angle) @ R`` for stacks of rotations and angles."""
    R = np.asarray(R, dtype=np.float64)
    angles = np.asarray(angles, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    rotvec = angles[..., None] * (g / np.linalg.norm(g))
    turn = _ScipyRotation.from_rotvec(rotvec.reshape(-1, 3)).as_matrix().reshape(angles.shape + (3, 3))
    return turn @ R


# ---------------------------------------------------------------- sequences and datasets

@dataclass(frozen=True)
class SynthConfig:
    mode: str = "magnetic"
    sample_rate: float = 100.0
    init_seconds: float = 3.0
    walk_std: float = 0.05
    env: EnvParams = field(default_factory=EnvParams)
    noise: NoiseParams = field(default_factory=NoiseParams)
    motion: motions.MotionParams = field(default_factory=motions.MotionParams)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    eskf: EskfConfig = field(default_factory=EskfConfig)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if abs(self.motion.sample_rate - self.sample_rate) > 1e-9 or abs(self.eskf.dt * self.sample_rate - 1.0) > 1e-6:
            raise ConfigError("motion, ESKF and synthesis sample rates disagree")
        if self.walk_std < 0:
            raise ConfigError("walk_std must be >= 0")

    @property
    def init_frames(self) -> int:
        return int(round(self.init_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["eskf"] = self.eskf.to_dict()
        return out


def procedural_trajectory(seed, n_frames: int, cfg: SynthConfig | None = None,
                          skeleton: Skeleton | None = None) -> Trajectory6DoF:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    room = cfg.env.room
    margin = cfg.motion.room_margin_m
    lo = np.asarray(room.lo[:2], dtype=float) + margin
    hi = np.asarray(room.hi[:2], dtype=float) - margin
    start = np.r_[rng.uniform(lo, hi), cfg.motion.root_height]
    R, p = motions.generate(rng, n_frames, start, room, cfg.motion, skeleton)
    return Trajectory6DoF(R, p, cfg.sample_rate)


def _init_keep_out(traj: Trajectory6DoF, init_frames: int, radius: float) -> list[tuple[NDArray, float]]:
    stride = max(1, init_frames // 10)
    points = traj.p[:init_frames:stride].reshape(-1, 3)
    return [(x, radius) for x in points]


@dataclass
class Scene:
    """Ground-truth motion, its magnetic environment and the raws it produces."""

    trajectory: Trajectory6DoF
    env: MagneticEnvironment
    raw: NDArray[np.float64]          # (T, 6, 9)
    disturbed: NDArray[np.bool_]      # (T, 6)


def synthesize_scene(seed, cfg: SynthConfig, trajectory: Trajectory6DoF | int,
                     skeleton: Skeleton | None = None) -> Scene:
    """Environment and raws for one sequence; ``trajectory`` is either imported or a procedural frame count.

    Naive mode synthesizes an undisturbed field.
    """
    env_seed, motion_seed, noise_seed, _ = child_seeds(seed, 4)
    if isinstance(trajectory, int):
        trajectory = procedural_trajectory(motion_seed, trajectory, cfg, skeleton)
    if len(trajectory) < cfg.init_frames:
        raise TrajectoryError(f"trajectory shorter than the {cfg.init_frames}-frame init window")
    if abs(trajectory.sample_rate - cfg.sample_rate) > 1e-6 * cfg.sample_rate:
        raise TrajectoryError("trajectory sample rate does not match the synthesis rate")

    if cfg.mode == "magnetic":
        env = random_env(env_seed, cfg.env.room, cfg.env.n_magnets, cfg.env.moment_range,
                         keep_out=_init_keep_out(trajectory, cfg.init_frames, cfg.env.clearance_m),
                         dip_deg=cfg.env.dip_deg)
    else:
        env = random_env(env_seed, cfg.env.room, 0, dip_deg=cfg.env.dip_deg)
    raw = synth_raw(trajectory, env, cfg.noise, noise_seed, cfg.eskf.g_ref)
    disturbed = disturbance(env, trajectory.p) >= cfg.detector.eps_m
    return Scene(trajectory, env, raw, disturbed)


def synthesize_sequence(seed, cfg: SynthConfig, trajectory: Trajectory6DoF | int,
                        skeleton: Skeleton | None = None) -> SyntheticSequence:
    """Full synthesis for one sequence: :func:`synthesize_scene`, stage-1 replay (or a yaw walk) and labels."""
    scene = synthesize_scene(seed, cfg, trajectory, skeleton)
    trajectory, raw = scene.trajectory, scene.raw
    g_unit = -cfg.eskf.up
    if cfg.mode == "magnetic":
        run = run_erroneous(raw, cfg.detector, cfg.eskf, skeleton, cfg.init_frames)
        R_err, a_G = run.R, run.acc
    else:
        walk_seed = child_seeds(seed, 4)[3]
        walk = yaw_walk(np.random.default_rng(walk_seed), len(trajectory), cfg.init_frames,
                        cfg.walk_std, cfg.sample_rate)
        R_err = rotate_about_gravity(trajectory.R, walk, g_unit)
        a_G = np.einsum("tlij,tlj->tli", R_err, raw[..., 0:3])
    delta = label_relative_yaw(R_err, trajectory.R, g_unit)
    return SyntheticSequence(raw, trajectory.R, delta, R_err, a_G, scene.disturbed, scene.env, cfg.sample_rate)


def config_hash(obj) -> str:
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def sequence_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, index])


def child_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """Children ``0..n-1`` of ``seed`` (as ``SeedSequence.spawn`` numbers them), leaving its spawn counter untouched."""
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (i,), pool_size=root.pool_size)
            for i in range(n)]


TrajectorySource = Union[Trajectory6DoF, int]


def _write_sequence(job: tuple) -> dict:
    out, split, index, seed, cfg, trajectory, skeleton = job
    seq = synthesize_sequence(sequence_seed(seed, index), cfg, trajectory, skeleton)
    folder, name = Path(out) / split, f"seq_{index:04d}"
    seq.save(folder / f"{name}.data.jsonl")
    formats.write_raw_frames(folder / f"{name}.raw.jsonl", np.arange(len(seq)) / cfg.sample_rate, seq.raw)
    formats.write_env(folder / f"{name}.env.jsonl", seq.env)
    return {"index": index, "split": split, "frames": len(seq), "magnets": len(seq.env.dipoles),
            "disturbed_fraction": round(float(np.mean(seq.disturbed)), 6)}


def make_dataset(out_dir: str | Path, trajectories: Sequence[TrajectorySource], cfg: SynthConfig,
                 seed: int, val_fraction: float = 0.2, workers: int = 1,
                 skeleton: Skeleton | None = None) -> dict:
    """Synthesize every sequence and write ``train/`` and ``val/`` splits plus ``metadata.json``.

    Each sequence ``seq_NNNN`` produces ``.data.jsonl`` (training records),
    ``.raw.jsonl`` (a raw-frame stream for ``run``) and ``.env.jsonl``.
    Sequences are synthesized in up to ``workers`` processes; output is
    byte-identical for a fixed seed regardless of ``workers``.
    """
    if not trajectories:
        raise DatasetError("empty trajectory set")
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError("val_fraction must be in [0, 1)")
    n = len(trajectories)
    n_val = min(n - 1, int(math.ceil(n * val_fraction))) if n > 1 else 0
    split = ["train"] * (n - n_val) + ["val"] * n_val
    out = Path(out_dir)
    jobs = [(str(out), split[i], i, seed, cfg, trajectories[i], skeleton) for i in range(n)]

    if workers <= 1 or n == 1:
        summaries = [_write_sequence(job) for job in jobs]
    else:
        context = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=min(workers, n), mp_context=context) as ex:
            summaries = list(ex.map(_write_sequence, jobs))
    for s in summaries:
        logger.info("sequence %d (%s): %d frames, %.1f%% disturbed IMU-frames",
                    s["index"], s["split"], s["frames"], 100.0 * s["disturbed_fraction"])

    settings = cfg.to_dict()
    metadata = {
        "seed": seed,
        "mode": cfg.mode,
        "sample_rate": cfg.sample_rate,
        "val_fraction": val_fraction,
        "sequences": summaries,
        "config": settings,
        "config_hash": {key: config_hash(value) for key, value in settings.items()},
        "skeleton_hash": config_hash((skeleton or Skeleton.default()).to_dict()),
    }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metadata.json", "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True, default=list)
        fh.write("\n")
    return metadata


def split_files(data_dir: str | Path, split: str) -> list[Path]:
    return sorted((Path(data_dir) / split).glob("*.data.jsonl"))
