"""Pose-aware magnetic disturbance detector.

An IMU may use its magnetometer only if every IMU in its k-nearest
neighbourhood (itself included) sees a normalized field magnitude close to 1.
With ``k=1`` this is the classical per-sensor magnitude gate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
from numpy.typing import ArrayLike, NDArray

from shield.exceptions import ConfigError

logger = logging.getLogger(__name__)

IMU_NAMES = ("larm", "rarm", "lleg", "rleg", "head", "root")
IMU_COUNT = len(IMU_NAMES)
ROOT_INDEX = IMU_NAMES.index("root")

# joint name -> (parent, rest-pose offset in meters, expressed in the parent segment frame)
DEFAULT_JOINTS: dict[str, tuple[str | None, tuple[float, float, float]]] = {
    "root": (None, (0.0, 0.0, 0.0)),
    "l_shoulder": ("root", (0.20, 0.0, 0.45)),
    "l_hand": ("l_shoulder", (0.50, 0.0, 0.0)),
    "r_shoulder": ("root", (-0.20, 0.0, 0.45)),
    "r_hand": ("r_shoulder", (-0.50, 0.0, 0.0)),
    "l_hip": ("root", (0.10, 0.0, -0.10)),
    "l_ankle": ("l_hip", (0.0, 0.0, -1.10)),
    "r_hip": ("root", (-0.10, 0.0, -0.10)),
    "r_ankle": ("r_hip", (0.0, 0.0, -1.10)),
    "neck": ("root", (0.0, 0.0, 0.45)),
    "head_top": ("neck", (0.0, 0.0, 0.20)),
}

# each IMU rides the segment that ends at this joint (root IMU sits on the root joint)
DEFAULT_IMU_JOINTS = {
    "larm": "l_hand",
    "rarm": "r_hand",
    "lleg": "l_ankle",
    "rleg": "r_ankle",
    "head": "head_top",
    "root": "root",
}


@dataclass(frozen=True)
class DetectorConfig:
    k: int = 3
    eps_m: float = 0.15

    def __post_init__(self):
        if not 1 <= self.k <= IMU_COUNT:
            raise ConfigError(f"k must be in [1, {IMU_COUNT}], got {self.k}")
        if not self.eps_m > 0:
            raise ConfigError("eps_m must be positive")


@dataclass(frozen=True)
class Skeleton:
    """Rigid stick skeleton used to place the six IMUs."""

    joints: tuple[tuple[str, str | None, tuple[float, float, float]], ...]
    imu_joints: tuple[str, ...]

    def __post_init__(self):
        names = [name for name, _, _ in self.joints]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate joint names in skeleton")
        seen: set[str] = set()
        for name, parent, offset in self.joints:
            if parent is None:
                if seen:
                    raise ConfigError("the root joint must come first")
            elif parent not in seen:
                raise ConfigError(f"joint '{name}' listed before its parent '{parent}'")
            if len(offset) != 3 or not np.all(np.isfinite(offset)):
                raise ConfigError(f"joint '{name}' needs a finite offset triplet")
            seen.add(name)
        if len(self.imu_joints) != IMU_COUNT or any(j not in seen for j in self.imu_joints):
            raise ConfigError("skeleton must map all six IMUs to known joints")

    @classmethod
    def default(cls) -> "Skeleton":
        return cls.from_dict({
            "joints": {name: {"parent": parent, "offset": list(offset)}
                       for name, (parent, offset) in DEFAULT_JOINTS.items()},
            "imus": dict(DEFAULT_IMU_JOINTS),
        })

    @classmethod
    def from_dict(cls, data: Mapping) -> "Skeleton":
        try:
            raw_joints = data["joints"]
            imus = data.get("imus", DEFAULT_IMU_JOINTS)
            imu_joints = tuple(imus[name] for name in IMU_NAMES)
            pending = {name: (spec.get("parent"), tuple(float(c) for c in spec["offset"]))
                       for name, spec in raw_joints.items()}
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise ConfigError(f"malformed skeleton table: {exc}") from exc
        # topological order, roots first, then file order
        ordered: list[tuple[str, str | None, tuple[float, float, float]]] = []
        placed: set[str] = set()
        while pending:
            ready = [n for n, (p, _) in pending.items() if p is None or p in placed]
            if not ready:
                raise ConfigError("skeleton has unknown parents or cycles")
            for name in ready:
                parent, offset = pending.pop(name)
                ordered.append((name, parent, offset))
                placed.add(name)
        return cls(tuple(ordered), imu_joints)

    @classmethod
    def load(cls, path: str | Path) -> "Skeleton":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return {
            "joints": {name: {"parent": parent, "offset": list(offset)}
                       for name, parent, offset in self.joints},
            "imus": dict(zip(IMU_NAMES, self.imu_joints)),
        }


def positions_from_pose(leaf_orientations: ArrayLike, root_orientation: ArrayLike,
                        skeleton: Skeleton | None = None) -> NDArray[np.float64]:
    """Root-relative IMU positions (6, 3) by forward kinematics.

    A joint's offset is rotated by the orientation of the IMU riding that
    segment, or by its parent segment's orientation when no IMU rides it.
    Leaf IMUs sit at the midpoint of their segment.
    """
    skeleton = skeleton or _DEFAULT_SKELETON
    leaves = np.asarray(leaf_orientations, dtype=np.float64)
    root = np.asarray(root_orientation, dtype=np.float64)
    driver = {joint: leaves[i] for i, joint in enumerate(skeleton.imu_joints[:ROOT_INDEX])}

    position: dict[str, NDArray[np.float64]] = {}
    segment: dict[str, NDArray[np.float64]] = {}
    midpoint: dict[str, NDArray[np.float64]] = {}
    for name, parent, offset in skeleton.joints:
        if parent is None:
            segment[name] = root
            position[name] = np.zeros(3)
            midpoint[name] = position[name]
            continue
        R = driver.get(name, segment[parent])
        segment[name] = R
        step = R @ np.asarray(offset)
        position[name] = position[parent] + step
        midpoint[name] = position[parent] + 0.5 * step
    out = np.array([midpoint[joint] for joint in skeleton.imu_joints[:ROOT_INDEX]]
                   + [position[skeleton.imu_joints[ROOT_INDEX]]])
    return _separate(out)


def _separate(positions: NDArray[np.float64]) -> NDArray[np.float64]:
    # coincident IMUs would make the neighbour order arbitrary
    out = positions.copy()
    gaps = np.linalg.norm(out[:, None] - out[None], axis=-1)
    if np.count_nonzero(gaps < 1e-9) == len(out):
        return out
    for i in range(1, len(out)):
        for j in range(i):
            if np.linalg.norm(out[i] - out[j]) < 1e-9:
                out[i, 0] += 1e-6 * i
    return out


def knn(positions: ArrayLike, i: int, k: int) -> tuple[int, ...]:
    """Indices of the ``k`` IMUs nearest to IMU ``i`` (itself included), ties broken by index."""
    pos = np.asarray(positions, dtype=np.float64)
    dist = np.linalg.norm(pos - pos[i], axis=1)
    return tuple(int(j) for j in np.argsort(dist, kind="stable")[:k])


def neighbour_table(positions: ArrayLike, k: int) -> NDArray[np.intp]:
    """``(n, k)`` array whose row ``i`` is :func:`knn` of IMU ``i``."""
    pos = _separate(np.asarray(positions, dtype=np.float64))
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def neighbourhoods(positions: ArrayLike, k: int) -> list[tuple[int, ...]]:
    return [tuple(int(j) for j in row) for row in neighbour_table(positions, k)]


def compute_flags(magnitudes: ArrayLike, positions: ArrayLike, cfg: DetectorConfig) -> NDArray[np.bool_]:
    """``flag_i`` is True iff every neighbour j of i has ``|mag_j - 1| < eps_m``.

    NaN magnitudes fail the check.
    """
    mags = np.asarray(magnitudes, dtype=np.float64)
    clean = np.abs(mags - 1.0) < cfg.eps_m
    if cfg.k == 1:
        return clean.copy()
    return np.all(clean[neighbour_table(positions, cfg.k)], axis=1)


_DEFAULT_SKELETON = Skeleton.default()
