"""Procedural full-body motion for trajectory synthesis.

Produces per-frame orientations and positions of the six IMUs for a subject
who stands still during a warm-up window and then wanders around the room
while swinging limbs, waving, turning the torso and moving the head. Segment
angles are smooth shape-preserving interpolants of random knots, so the
trajectories have bounded angular rates and accelerations.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.interpolate import PchipInterpolator
from scipy.spatial.transform import Rotation as _ScipyRotation

from shield.detector import IMU_COUNT, ROOT_INDEX, Skeleton, positions_from_pose
from shield.exceptions import ConfigError
from shield.magfield import Room

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MotionParams:
    sample_rate: float = 100.0
    warmup_s: float = 3.0
    ramp_s: float = 1.0
    root_height: float = 1.0
    knot_interval_s: float = 2.0
    max_step_m: float = 0.6
    room_margin_m: float = 0.6
    max_turn_rad: float = 0.6
    gait_hz: float = 0.8
    bob_m: float = 0.005
    arm_swing_rad: float = 0.25
    leg_swing_rad: float = 0.25
    wave_rad: float = 0.25
    wander_rad: float = 0.2
    head_turn_rad: float = 0.4
    torso_tilt_rad: float = 0.05

    def __post_init__(self):
        if not self.sample_rate > 0:
            raise ConfigError("sample_rate must be positive")
        if not self.warmup_s > 0 or not self.ramp_s > 0 or not self.knot_interval_s > 0:
            raise ConfigError("invalid motion timing")


def _envelope(t: NDArray[np.float64], params: MotionParams) -> NDArray[np.float64]:
    # zero through the warm-up, smoothstep to one over the ramp
    x = np.clip((t - params.warmup_s) / params.ramp_s, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _track(rng: np.random.Generator, t: NDArray[np.float64], params: MotionParams,
           amplitude: float) -> NDArray[np.float64]:
    """Smooth random angle track that is exactly zero during the warm-up."""
    end = float(t[-1]) if len(t) else 0.0
    knots = np.arange(params.warmup_s, end + 2 * params.knot_interval_s, params.knot_interval_s)
    times = np.r_[0.0, knots]
    values = np.r_[0.0, 0.0, rng.uniform(-amplitude, amplitude, len(knots) - 1)]
    return PchipInterpolator(times, values)(t)


def _root_path(rng: np.random.Generator, t: NDArray[np.float64], start: NDArray[np.float64],
               room: Room, params: MotionParams) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    end = float(t[-1]) if len(t) else 0.0
    knots = np.arange(params.warmup_s, end + 2 * params.knot_interval_s, params.knot_interval_s)
    lo = np.asarray(room.lo[:2], dtype=float) + params.room_margin_m
    hi = np.asarray(room.hi[:2], dtype=float) - params.room_margin_m
    xy = [start[:2].copy()]
    heading = [rng.uniform(-math.pi, math.pi)]
    for _ in range(len(knots) - 1):
        xy.append(np.clip(xy[-1] + rng.uniform(-params.max_step_m, params.max_step_m, 2), lo, hi))
        heading.append(heading[-1] + rng.uniform(-params.max_turn_rad, params.max_turn_rad))
    times = np.r_[0.0, knots]
    xy_knots = np.vstack([xy[0]] + xy)
    heading_knots = np.r_[heading[0], heading]
    path = PchipInterpolator(times, xy_knots, axis=0)(t)
    psi = PchipInterpolator(times, heading_knots)(t)
    return path, psi


def generate(seed, n_frames: int, start: NDArray[np.float64], room: Room | None = None,
             params: MotionParams | None = None,
             skeleton: Skeleton | None = None) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Return ``(R, p)`` with shapes ``(T, 6, 3, 3)`` and ``(T, 6, 3)``.

    ``start`` is the root position (x, y) held during the warm-up; its z is
    replaced by ``params.root_height``.
    """
    params = params or MotionParams()
    room = room or Room()
    skeleton = skeleton or Skeleton.default()
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / params.sample_rate
    env = _envelope(t, params)
    start = np.asarray(start, dtype=np.float64)

    xy, psi = _root_path(rng, t, start, room, params)
    phase = 2.0 * math.pi * params.gait_hz * t + rng.uniform(0, 2 * math.pi)
    gait = np.sin(phase)
    bob = params.bob_m * np.sin(2.0 * phase) * env
    root_pos = np.column_stack((xy, np.full(n_frames, params.root_height) + bob))

    # torso: heading turns plus a little sway
    sway = env * (params.torso_tilt_rad * np.sin(phase + 0.5) + _track(rng, t, params, params.torso_tilt_rad))
    lean = env * _track(rng, t, params, params.torso_tilt_rad)
    root_R = _ScipyRotation.from_euler("zyx", np.column_stack((psi, lean, sway))).as_matrix()

    local = np.empty((n_frames, 5, 3, 3))
    for side, sign in ((0, 1.0), (1, -1.0)):
        swing = env * (params.arm_swing_rad * sign * gait + _track(rng, t, params, params.wander_rad))
        droop = env * (sign * (0.6 + _track(rng, t, params, params.wander_rad)))
        wave = env * (params.wave_rad * np.sin(phase + side) * (0.5 + 0.5 * np.sin(0.3 * phase))
                      + _track(rng, t, params, params.wander_rad))
        local[:, side] = _ScipyRotation.from_euler("zyx", np.column_stack((swing, droop, wave))).as_matrix()
    for leg, sign in ((2, 1.0), (3, -1.0)):
        swing = env * (params.leg_swing_rad * sign * gait + _track(rng, t, params, 0.5 * params.wander_rad))
        splay = env * _track(rng, t, params, 0.5 * params.wander_rad)
        twist = env * _track(rng, t, params, params.wander_rad)
        local[:, leg] = _ScipyRotation.from_euler("zyx", np.column_stack((twist, splay, swing))).as_matrix()
    head_yaw = env * _track(rng, t, params, params.head_turn_rad)
    head_pitch = env * _track(rng, t, params, params.wander_rad)
    local[:, 4] = _ScipyRotation.from_euler("zyx", np.column_stack((head_yaw, head_pitch, 0.0 * t))).as_matrix()

    R = np.empty((n_frames, IMU_COUNT, 3, 3))
    R[:, ROOT_INDEX] = root_R
    R[:, :ROOT_INDEX] = np.einsum("tij,tljk->tlik", root_R, local)
    p = np.empty((n_frames, IMU_COUNT, 3))
    for f in range(n_frames):
        p[f] = root_pos[f] + positions_from_pose(R[f, :ROOT_INDEX], R[f, ROOT_INDEX], skeleton)
    logger.debug("generated %d frames of procedural motion", n_frames)
    return R, p
