"""Per-IMU error-state Kalman filter.

Nominal state: orientation ``R_G`` (sensor -> global), accelerometer bias and
gyroscope bias. Error state ``[dtheta, d_accel_bias, d_gyro_bias]`` with the
orientation error applied on the right, ``R = R_hat @ exp_map(dtheta)``.

Gravity observations only ever move the estimate about horizontal axes and
magnetic observations only about the vertical axis; the attitude part of each
gain is projected accordingly and the covariance is updated in Joseph form so
it stays valid for the projected gain.

The ``*_bank`` functions step several independent filters as one stacked
array; the single-filter operations are thin views over a bank of one.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from shield.exceptions import ConfigError, CorruptFrameError, InitializationError
from shield.rotmath import (RENORM_INTERVAL, Rotation, Vec3, exp_map_many, project_horizontal, renormalize,
                            renormalize_many, skew_many)

logger = logging.getLogger(__name__)

STANDARD_GRAVITY = 9.8

_I3 = np.eye(3)
_I9 = np.eye(9)


@dataclass(frozen=True)
class EskfConfig:
    dt: float = 0.01
    g_ref: tuple[float, float, float] = (0.0, 0.0, -STANDARD_GRAVITY)
    # Stored pre-projected: horizontal, unit norm.
    n_ref: tuple[float, float, float] = (1.0, 0.0, 0.0)
    eps_a: float = 0.5
    eps_m: float = 0.15
    gyro_noise: float = 0.01
    accel_noise: float = 0.1
    # unmodelled body acceleration seen by the gravity observation
    dynamic_accel_noise: float = 1.0
    mag_noise: float = 0.05
    bias_random_walk: float = 1e-4
    attitude_prior: float = 0.1
    accel_bias_prior: float = 0.1
    gyro_bias_prior: float = 0.02
    mag_scale: float = 1.0
    min_init_frames: int = 30
    static_gyro_threshold: float = 0.05

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.eps_a > 0 or not self.eps_m > 0:
            raise ConfigError("thresholds must be positive")
        for name in ("gyro_noise", "accel_noise", "dynamic_accel_noise", "mag_noise", "bias_random_walk",
                     "attitude_prior", "accel_bias_prior", "gyro_bias_prior", "mag_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.min_init_frames < 1:
            raise ConfigError("min_init_frames must be >= 1")
        gravity = np.asarray(self.g_ref, dtype=np.float64)
        if gravity.shape != (3,) or not np.linalg.norm(gravity) > 0:
            raise ConfigError("g_ref must be a non-zero 3-vector")
        up = -gravity / np.linalg.norm(gravity)
        north = project_horizontal(np.asarray(self.n_ref, dtype=np.float64), up)
        if np.linalg.norm(north) < 1e-6:
            raise ConfigError("n_ref has no horizontal component")
        north = north / np.linalg.norm(north)
        object.__setattr__(self, "n_ref", tuple(float(c) for c in north))
        object.__setattr__(self, "g_ref", tuple(float(c) for c in gravity))
        # derived arrays, not part of equality or serialization
        object.__setattr__(self, "_gravity", gravity)
        object.__setattr__(self, "_up", up)
        object.__setattr__(self, "_north", north)
        q_att = self.gyro_noise ** 2 * self.dt
        q_bias = self.bias_random_walk ** 2 * self.dt
        object.__setattr__(self, "_process_noise", np.diag([q_att] * 3 + [q_bias] * 6))

    @property
    def gravity(self) -> Vec3:
        return self._gravity

    @property
    def up(self) -> Vec3:
        """Unit vector opposite to gravity."""
        return self._up

    @property
    def north(self) -> Vec3:
        return self._north

    @property
    def gravity_norm(self) -> float:
        return float(np.linalg.norm(self._gravity))

    @property
    def gravity_variance(self) -> float:
        return self.accel_noise ** 2 + self.dynamic_accel_noise ** 2

    @property
    def process_noise(self) -> NDArray[np.float64]:
        return self._process_noise

    def prior_covariance(self) -> NDArray[np.float64]:
        return np.diag(np.r_[
            np.full(3, self.attitude_prior ** 2),
            np.full(3, self.accel_bias_prior ** 2),
            np.full(3, self.gyro_bias_prior ** 2),
        ])

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class EskfState:
    R_G: Rotation
    accel_bias: Vec3
    gyro_bias: Vec3
    P: NDArray[np.float64]
    compositions: int = field(default=0, compare=False)

    @classmethod
    def initial(cls, R_G: ArrayLike, cfg: EskfConfig) -> "EskfState":
        return cls(np.array(R_G, dtype=np.float64), np.zeros(3), np.zeros(3), cfg.prior_covariance())


@dataclass(frozen=True)
class EskfBank:
    """Independent filters stepped together; row ``i`` holds one IMU's :class:`EskfState`."""

    R_G: NDArray[np.float64]          # (n, 3, 3)
    accel_bias: NDArray[np.float64]   # (n, 3)
    gyro_bias: NDArray[np.float64]    # (n, 3)
    P: NDArray[np.float64]            # (n, 9, 9)
    compositions: int = field(default=0, compare=False)

    @classmethod
    def stack(cls, states: Sequence[EskfState]) -> "EskfBank":
        return cls(np.array([s.R_G for s in states], dtype=np.float64),
                   np.array([s.accel_bias for s in states], dtype=np.float64),
                   np.array([s.gyro_bias for s in states], dtype=np.float64),
                   np.array([s.P for s in states], dtype=np.float64),
                   max(s.compositions for s in states))

    def __len__(self) -> int:
        return len(self.R_G)

    def state(self, i: int) -> EskfState:
        return EskfState(self.R_G[i].copy(), self.accel_bias[i].copy(), self.gyro_bias[i].copy(),
                         self.P[i].copy(), self.compositions)


@dataclass(frozen=True)
class UpdateResult:
    """Outcome of a gated correction; ``state`` is the input state when ``ok`` is False."""

    state: EskfState
    ok: bool
    error: str | None = None


def _T(M: NDArray[np.float64]) -> NDArray[np.float64]:
    return np.swapaxes(M, -1, -2)


def _symmetrize(P: NDArray[np.float64]) -> NDArray[np.float64]:
    return 0.5 * (P + _T(P))


def init(static_frames: ArrayLike, cfg: EskfConfig) -> EskfState:
    """Align a static sensor from ``(N, 9)`` frames ``[a_S, w_S, m_S]``.

    Two-vector (TRIAD) alignment: mean specific force onto ``-g_ref`` and the
    horizontal part of the mean magnetometer reading onto ``n_ref``.
    """
    frames = np.asarray(static_frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[1] != 9:
        raise InitializationError("init frames must have shape (N, 9)")
    if len(frames) < cfg.min_init_frames:
        raise InitializationError(
            f"initialization needs at least {cfg.min_init_frames} frames, got {len(frames)}")
    if not np.all(np.isfinite(frames)):
        raise InitializationError("corrupt frame in initialization window")
    accel = frames[:, 0:3]
    gyro = frames[:, 3:6]
    mag = frames[:, 6:9] * cfg.mag_scale

    if float(np.mean(np.linalg.norm(gyro, axis=1))) >= cfg.static_gyro_threshold:
        raise InitializationError("initialization requires static sensor")
    if abs(float(np.mean(np.linalg.norm(mag, axis=1))) - 1.0) > cfg.eps_m:
        raise InitializationError("disturbed field at init")

    a_mean = accel.mean(axis=0)
    m_mean = mag.mean(axis=0)
    s1 = a_mean / np.linalg.norm(a_mean)
    s2 = project_horizontal(m_mean, s1)
    if np.linalg.norm(s2) < 1e-3:
        raise InitializationError("disturbed field at init")
    s2 = s2 / np.linalg.norm(s2)
    sensor = np.column_stack((s1, s2, np.cross(s1, s2)))
    world = np.column_stack((cfg.up, cfg.north, np.cross(cfg.up, cfg.north)))
    R_G = renormalize(world @ sensor.T)
    logger.debug("ESKF initialized from %d frames", len(frames))
    return EskfState.initial(R_G, cfg)


# ---------------------------------------------------------------- filter bank

def predict_bank(bank: EskfBank, omega_S: ArrayLike, cfg: EskfConfig) -> EskfBank:
    """Gyroscope integration ``R_G <- R_G exp((w_S - w_bias) dt)`` and covariance propagation, row-wise."""
    rate = np.asarray(omega_S, dtype=np.float64) - bank.gyro_bias
    dR = exp_map_many(rate * cfg.dt)
    R_G = bank.R_G @ dR
    compositions = bank.compositions + 1
    if compositions >= RENORM_INTERVAL:
        R_G = renormalize_many(R_G)
        compositions = 0

    F = np.broadcast_to(_I9, bank.P.shape).copy()
    F[:, 0:3, 0:3] = _T(dR)
    F[:, 0:3, 6:9] = -cfg.dt * _I3
    P = _symmetrize(F @ bank.P @ _T(F) + cfg.process_noise)
    return replace(bank, R_G=R_G, P=P, compositions=compositions)


def _inject(bank: EskfBank, dx: NDArray[np.float64], P: NDArray[np.float64],
            mask: NDArray[np.bool_]) -> EskfBank:
    # first-order reset: the reset Jacobian is taken as identity
    rows = mask[:, None]
    mats = mask[:, None, None]
    return replace(
        bank,
        R_G=np.where(mats, bank.R_G @ exp_map_many(dx[:, 0:3]), bank.R_G),
        accel_bias=np.where(rows, bank.accel_bias + dx[:, 3:6], bank.accel_bias),
        gyro_bias=np.where(rows, bank.gyro_bias + dx[:, 6:9], bank.gyro_bias),
        P=np.where(mats, _symmetrize(P), bank.P),
    )


def correct_gravity_bank(bank: EskfBank, a_S: ArrayLike, cfg: EskfConfig) -> tuple[EskfBank, NDArray[np.bool_]]:
    """Gravity vector observation on every row passing ``| |a_S| - |g| | < eps_a``; returns the gate mask."""
    a_S = np.asarray(a_S, dtype=np.float64)
    ok = np.abs(np.linalg.norm(a_S, axis=-1) - cfg.gravity_norm) < cfg.eps_a
    if not ok.any():
        return bank, ok

    R_T = _T(bank.R_G)
    expected = R_T @ -cfg.gravity
    innovation = a_S - (expected + bank.accel_bias)

    H = np.zeros((len(bank), 3, 9))
    H[:, :, 0:3] = skew_many(expected)
    H[:, :, 3:6] = _I3
    noise = cfg.gravity_variance
    HP = H @ bank.P
    S = HP @ _T(H) + noise * _I3
    K = _T(np.linalg.solve(S, HP))

    vertical_S = R_T @ cfg.up
    K[:, 0:3] = (_I3 - vertical_S[:, :, None] * vertical_S[:, None, :]) @ K[:, 0:3]

    IKH = _I9 - K @ H
    P = IKH @ bank.P @ _T(IKH) + noise * (K @ _T(K))
    dx = (K @ innovation[:, :, None])[:, :, 0]
    return _inject(bank, dx, P, ok), ok


def correct_mag_bank(bank: EskfBank, m_S: ArrayLike, flags: ArrayLike,
                     cfg: EskfConfig) -> tuple[EskfBank, NDArray[np.bool_]]:
    """Heading-only magnetic observation on flagged rows whose projected field carries heading information.

    Both the predicted field ``R_G m_S`` and ``n_ref`` live in the horizontal
    plane, so the innovation is the signed heading angle between them.
    """
    m = np.asarray(m_S, dtype=np.float64) * cfg.mag_scale
    up = cfg.up
    m_G = (bank.R_G @ m[:, :, None])[:, :, 0]
    m_h = m_G - (m_G @ up)[:, None] * up
    norm = np.linalg.norm(m_h, axis=-1)
    ok = np.asarray(flags, dtype=bool) & (norm >= 1e-3)
    if not ok.any():
        return bank, ok

    north = cfg.north
    innovation = np.arctan2(np.cross(m_h, north) @ up, m_h @ north)

    H = np.zeros((len(bank), 9))
    H[:, 0:3] = up @ bank.R_G
    variance = (cfg.mag_noise / np.where(ok, norm, 1.0)) ** 2
    PHt = (bank.P @ H[:, :, None])[:, :, 0]
    K = PHt / (np.sum(H * PHt, axis=1) + variance)[:, None]

    vertical_S = H[:, 0:3]
    K[:, 0:3] = vertical_S * np.sum(vertical_S * K[:, 0:3], axis=1)[:, None]

    IKH = _I9 - K[:, :, None] * H[:, None, :]
    P = IKH @ bank.P @ _T(IKH) + variance[:, None, None] * (K[:, :, None] * K[:, None, :])
    return _inject(bank, K * innovation[:, None], P, ok), ok


def step_bank(bank: EskfBank, a_S: ArrayLike, omega_S: ArrayLike, m_S: ArrayLike, flags: ArrayLike,
              cfg: EskfConfig) -> EskfBank:
    """:func:`step` for every row at once; inputs are ``(n, 3)`` and ``flags`` is ``(n,)``."""
    channels = [np.asarray(c, dtype=np.float64) for c in (a_S, omega_S, m_S)]
    if not all(np.all(np.isfinite(c)) for c in channels):
        raise CorruptFrameError()
    bank = predict_bank(bank, channels[1], cfg)
    bank, _ = correct_gravity_bank(bank, channels[0], cfg)
    bank, _ = correct_mag_bank(bank, channels[2], flags, cfg)
    return bank


def global_readings_bank(bank: EskfBank, a_S: ArrayLike, omega_S: ArrayLike) -> tuple[NDArray, NDArray]:
    a = np.asarray(a_S, dtype=np.float64) - bank.accel_bias
    w = np.asarray(omega_S, dtype=np.float64) - bank.gyro_bias
    return (bank.R_G @ a[:, :, None])[:, :, 0], (bank.R_G @ w[:, :, None])[:, :, 0]


# ---------------------------------------------------------------- single filter

def predict(state: EskfState, omega_S: ArrayLike, cfg: EskfConfig) -> EskfState:
    """Gyroscope integration ``R_G <- R_G exp((w_S - w_bias) dt)`` and covariance propagation."""
    return predict_bank(EskfBank.stack([state]), np.asarray(omega_S, dtype=np.float64)[None], cfg).state(0)


def correct_gravity(state: EskfState, a_S: ArrayLike, cfg: EskfConfig) -> UpdateResult:
    """Vector observation of gravity, gated by ``| |a_S| - |g| | < eps_a``."""
    bank, ok = correct_gravity_bank(EskfBank.stack([state]), np.asarray(a_S, dtype=np.float64)[None], cfg)
    if not ok[0]:
        return UpdateResult(state, False, "gate rejected")
    return UpdateResult(bank.state(0), True)


def correct_mag(state: EskfState, m_S: ArrayLike, cfg: EskfConfig) -> UpdateResult:
    """Heading-only magnetic vector observation."""
    bank, ok = correct_mag_bank(EskfBank.stack([state]), np.asarray(m_S, dtype=np.float64)[None], [True], cfg)
    if not ok[0]:
        return UpdateResult(state, False, "vertical field, no heading info")
    return UpdateResult(bank.state(0), True)


def step(state: EskfState, raw: Sequence[ArrayLike], flag: bool, cfg: EskfConfig) -> EskfState:
    """Predict, then self-gated gravity and flag-gated magnetic corrections.

    ``raw`` is ``(a_S, w_S, m_S)``. A non-finite channel raises
    :class:`CorruptFrameError`; the caller keeps its previous state.
    """
    a_S, omega_S, m_S = (np.asarray(c, dtype=np.float64)[None] for c in raw)
    return step_bank(EskfBank.stack([state]), a_S, omega_S, m_S, [bool(flag)], cfg).state(0)


def global_readings(state: EskfState, a_S: ArrayLike, omega_S: ArrayLike) -> tuple[Vec3, Vec3]:
    """Bias-compensated acceleration and angular rate expressed in the global frame."""
    R = state.R_G
    return (R @ (np.asarray(a_S, dtype=np.float64) - state.accel_bias),
            R @ (np.asarray(omega_S, dtype=np.float64) - state.gyro_bias))
