"""Point-dipole magnetic environment superimposed on a uniform Earth field.

Dipole fields are computed in Tesla and converted to normalized units (the
undisturbed Earth field has magnitude exactly 1).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from shield.exceptions import ConfigError, SingularFieldError

logger = logging.getLogger(__name__)

MU0_OVER_4PI = 1e-7
# Typical mid-latitude geomagnetic magnitude; 1 normalized unit.
EARTH_FIELD_TESLA = 50e-6
SINGULAR_RADIUS = 1e-3

DEFAULT_DIP_DEG = 50.0
# On-axis the weakest magnet reaches 3.0 normalized units at 0.1 m and the
# strongest still adds 0.1 at 1.5 m.
DEFAULT_MOMENT_RANGE = (4.0, 100.0)


def earth_vector(dip_deg: float = DEFAULT_DIP_DEG, declination_deg: float = 0.0) -> NDArray[np.float64]:
    """Unit Earth field pointing ``dip_deg`` below the horizon; declination 0 is global +x."""
    dip = math.radians(dip_deg)
    dec = math.radians(declination_deg)
    return np.array([math.cos(dip) * math.cos(dec), math.cos(dip) * math.sin(dec), -math.sin(dip)])


@dataclass(frozen=True)
class Dipole:
    position: tuple[float, float, float]
    moment: tuple[float, float, float]

    def __post_init__(self):
        if not (np.all(np.isfinite(self.position)) and np.all(np.isfinite(self.moment))):
            raise ConfigError("dipole position and moment must be finite")
        if not np.linalg.norm(self.moment) > 0:
            raise ConfigError("dipole moment must be non-zero")


@dataclass(frozen=True)
class Room:
    """Axis-aligned box in meters."""

    lo: tuple[float, float, float] = (0.0, 0.0, 0.0)
    hi: tuple[float, float, float] = (6.0, 6.0, 3.0)

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(hi > lo):
            raise ConfigError("degenerate room box")

    @property
    def center(self) -> NDArray[np.float64]:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))


def dipole_field(d: Dipole, x: ArrayLike) -> NDArray[np.float64]:
    """B(x) = mu0/4pi * (3 (m.r_hat) r_hat - m) / |r|^3, in Tesla."""
    r = np.asarray(x, dtype=np.float64) - np.asarray(d.position)
    dist = float(np.linalg.norm(r))
    if dist < SINGULAR_RADIUS:
        raise SingularFieldError()
    r_hat = r / dist
    m = np.asarray(d.moment, dtype=np.float64)
    return MU0_OVER_4PI * (3.0 * float(m @ r_hat) * r_hat - m) / dist ** 3


@dataclass(frozen=True)
class MagneticEnvironment:
    earth: tuple[float, float, float] = tuple(earth_vector())
    dipoles: tuple[Dipole, ...] = ()
    normalization: float = 1.0 / EARTH_FIELD_TESLA
    seed: int | None = field(default=None, compare=False)

    def __post_init__(self):
        norm = float(np.linalg.norm(self.earth))
        if abs(norm - 1.0) > 1e-9:
            raise ConfigError(f"earth field must have unit normalized magnitude, got {norm}")
        if not self.normalization > 0:
            raise ConfigError("normalization must be positive")
        object.__setattr__(self, "_positions", np.array([d.position for d in self.dipoles], dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "_moments", np.array([d.moment for d in self.dipoles], dtype=np.float64).reshape(-1, 3))

    def field_at(self, x: ArrayLike) -> NDArray[np.float64]:
        return field_at(self, x)


def field_at(env: MagneticEnvironment, x: ArrayLike) -> NDArray[np.float64]:
    """Global field at ``x`` in normalized units: earth plus every dipole contribution."""
    total = np.asarray(env.earth, dtype=np.float64).copy()
    for d in env.dipoles:
        total += env.normalization * dipole_field(d, x)
    return total


def field_at_points(env: MagneticEnvironment, points: ArrayLike) -> NDArray[np.float64]:
    """Vectorized :func:`field_at` over ``(..., 3)`` points."""
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    out = np.tile(np.asarray(env.earth, dtype=np.float64), (len(flat), 1))
    for pos, m in zip(env._positions, env._moments):
        r = flat - pos
        dist = np.linalg.norm(r, axis=1)
        if np.any(dist < SINGULAR_RADIUS):
            raise SingularFieldError()
        r_hat = r / dist[:, None]
        proj = r_hat @ m
        out += env.normalization * MU0_OVER_4PI * (3.0 * proj[:, None] * r_hat - m) / dist[:, None] ** 3
    return out.reshape(pts.shape)


def disturbance(env: MagneticEnvironment, points: ArrayLike) -> NDArray[np.float64]:
    """``| |m_G(x)| - 1 |`` at each point."""
    return np.abs(np.linalg.norm(field_at_points(env, points), axis=-1) - 1.0)


def random_env(seed: int | Sequence[int] | np.random.SeedSequence, room: Room | None = None, n_magnets: int = 4,
               moment_range: tuple[float, float] = DEFAULT_MOMENT_RANGE,
               keep_out: Sequence[tuple[ArrayLike, float]] = (),
               dip_deg: float = DEFAULT_DIP_DEG, max_tries: int = 10000) -> MagneticEnvironment:
    """Magnets placed uniformly in ``room`` with isotropic directions and log-uniform strengths.

    ``keep_out`` holds ``(center, radius)`` spheres no magnet may fall into.
    """
    room = room or Room()
    if n_magnets < 0:
        raise ConfigError("n_magnets must be >= 0")
    lo_m, hi_m = moment_range
    if not 0 < lo_m <= hi_m:
        raise ConfigError("moment_range must satisfy 0 < min <= max")
    rng = np.random.default_rng(seed)
    lo, hi = np.asarray(room.lo, dtype=float), np.asarray(room.hi, dtype=float)
    zones = [(np.asarray(c, dtype=float), float(r)) for c, r in keep_out]

    dipoles = []
    tries = 0
    while len(dipoles) < n_magnets:
        tries += 1
        if tries > max_tries:
            raise ConfigError("could not place magnets outside the keep-out zones")
        pos = rng.uniform(lo, hi)
        direction = rng.standard_normal(3)
        magnitude = math.exp(rng.uniform(math.log(lo_m), math.log(hi_m)))
        if any(np.linalg.norm(pos - c) < r for c, r in zones):
            continue
        norm = float(np.linalg.norm(direction))
        if norm < 1e-12:
            continue
        dipoles.append(Dipole(tuple(float(c) for c in pos),
                              tuple(float(c) for c in direction / norm * magnitude)))
    logger.debug("random environment: %d magnets after %d draws", n_magnets, tries)
    env_seed = seed if isinstance(seed, int) else None
    return MagneticEnvironment(tuple(float(c) for c in earth_vector(dip_deg)), tuple(dipoles), seed=env_seed)


def disturbed_fraction(env: MagneticEnvironment, room: Room, eps_m: float = 0.15, resolution: int = 10) -> float:
    """Fraction of a ``resolution**3`` cell-centred grid where ``| |m| - 1 | >= eps_m``."""
    lo, hi = np.asarray(room.lo, dtype=float), np.asarray(room.hi, dtype=float)
    axes = [lo[i] + (np.arange(resolution) + 0.5) * (hi[i] - lo[i]) / resolution for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    try:
        return float(np.mean(disturbance(env, grid) >= eps_m))
    except SingularFieldError:
        # a grid node landed on a magnet: nudge the grid by a millimetre-scale offset
        return float(np.mean(disturbance(env, grid + 2.0 * SINGULAR_RADIUS) >= eps_m))
