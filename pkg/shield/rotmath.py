"""SO(3) and vector helpers used by every other module.

Rotations are plain ``(3, 3)`` float64 arrays mapping sensor coordinates to
global coordinates; vectors are ``(3,)`` arrays. All functions are pure.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.spatial.transform import Rotation as _ScipyRotation

from shield.exceptions import DegenerateAxisError

Rotation = NDArray[np.float64]
Vec3 = NDArray[np.float64]

# Compositions allowed before a polar re-orthonormalization.
RENORM_INTERVAL = 256

_SMALL_ANGLE = 1e-8
_NEAR_PI = math.pi - 1e-3


def skew(v: ArrayLike) -> NDArray[np.float64]:
    x, y, z = np.asarray(v, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_many(v: ArrayLike) -> NDArray[np.float64]:
    """:func:`skew` over ``(..., 3)`` vectors."""
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1], out[..., 0, 2] = -z, y
    out[..., 1, 0], out[..., 1, 2] = z, -x
    out[..., 2, 0], out[..., 2, 1] = -y, x
    return out


def vee(m: NDArray[np.float64]) -> Vec3:
    """Inverse of :func:`skew` applied to the antisymmetric part of ``m``."""
    return 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def exp_map(v: ArrayLike) -> Rotation:
    """Rodrigues' formula; ``exp_map(0)`` is the identity."""
    v = np.asarray(v, dtype=np.float64)
    theta2 = float(v @ v)
    theta = math.sqrt(theta2)
    K = skew(v)
    if theta < _SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def exp_map_many(v: ArrayLike) -> NDArray[np.float64]:
    """:func:`exp_map` over ``(..., 3)`` rotation vectors."""
    v = np.asarray(v, dtype=np.float64)
    theta2 = np.einsum("...i,...i->...", v, v)
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew_many(v)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def log_map(R: Rotation) -> Vec3:
    """Axis-angle vector of ``R``; never returns NaN, even near a half turn."""
    R = np.asarray(R, dtype=np.float64)
    s = vee(R)
    sin_theta = float(np.linalg.norm(s))
    cos_theta = max(-1.0, min(1.0, 0.5 * (float(np.trace(R)) - 1.0)))
    theta = math.atan2(sin_theta, cos_theta)
    if theta < _SMALL_ANGLE:
        return s * (1.0 + theta * theta / 6.0)
    if theta > _NEAR_PI:
        # quaternion route stays well conditioned where sin(theta) vanishes
        return _ScipyRotation.from_matrix(R).as_rotvec()
    return s * (theta / sin_theta)


def rot_about_axis(axis: ArrayLike, theta: float) -> Rotation:
    """Rotation of ``theta`` radians about ``axis`` (normalized internally)."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = float(np.linalg.norm(axis))
    if not np.isfinite(norm) or norm < 1e-12:
        raise DegenerateAxisError()
    return exp_map(axis * (theta / norm))


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


def wrap_angles(theta: ArrayLike) -> NDArray[np.float64]:
    theta = np.asarray(theta, dtype=np.float64)
    wrapped = np.remainder(theta + np.pi, 2.0 * np.pi) - np.pi
    return np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)


def yaw_between(R_est: Rotation, R_gt: Rotation, g: ArrayLike) -> float:
    """Heading angle ``theta`` such that ``rot_about_axis(g, theta) @ R_gt`` is closest to ``R_est``.

    Closed form: with ``D = R_est R_gt^T`` the geodesic objective reduces to
    maximizing ``-A sin(theta) - B cos(theta)`` where ``A = tr([g]x D)`` and
    ``B = tr([g]x^2 D)``.
    """
    g = np.asarray(g, dtype=np.float64)
    g = g / np.linalg.norm(g)
    D = np.asarray(R_est) @ np.asarray(R_gt).T
    v = np.array([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    num = float(g @ v)
    den = float(np.trace(D) - g @ D @ g)
    if num == 0.0 and den == 0.0:
        # half turn about a horizontal axis: every heading is equally close
        return 0.0
    return wrap_angle(math.atan2(num, den))


def geodesic_angle(R_a: Rotation, R_b: Rotation) -> float:
    """Angle of the relative rotation ``R_a R_b^T`` in radians."""
    D = np.asarray(R_a) @ np.asarray(R_b).T
    sin_theta = float(np.linalg.norm(vee(D)))
    cos_theta = max(-1.0, min(1.0, 0.5 * (float(np.trace(D)) - 1.0)))
    return math.atan2(sin_theta, cos_theta)


def yaw_between_many(R_est: ArrayLike, R_gt: ArrayLike, g: ArrayLike) -> NDArray[np.float64]:
    """:func:`yaw_between` over stacks of rotations ``(..., 3, 3)``."""
    g = np.asarray(g, dtype=np.float64)
    g = g / np.linalg.norm(g)
    D = np.asarray(R_est, dtype=np.float64) @ np.swapaxes(np.asarray(R_gt, dtype=np.float64), -1, -2)
    v = np.stack((D[..., 2, 1] - D[..., 1, 2], D[..., 0, 2] - D[..., 2, 0], D[..., 1, 0] - D[..., 0, 1]), axis=-1)
    num = v @ g
    den = np.trace(D, axis1=-2, axis2=-1) - np.einsum("i,...ij,j->...", g, D, g)
    return wrap_angles(np.arctan2(num, den))


def geodesic_angle_many(R_a: ArrayLike, R_b: ArrayLike) -> NDArray[np.float64]:
    D = np.asarray(R_a, dtype=np.float64) @ np.swapaxes(np.asarray(R_b, dtype=np.float64), -1, -2)
    s = 0.5 * np.stack((D[..., 2, 1] - D[..., 1, 2], D[..., 0, 2] - D[..., 2, 0], D[..., 1, 0] - D[..., 0, 1]), axis=-1)
    cos_theta = np.clip(0.5 * (np.trace(D, axis1=-2, axis2=-1) - 1.0), -1.0, 1.0)
    return np.arctan2(np.linalg.norm(s, axis=-1), cos_theta)


def tilt_between(R_a: Rotation, R_b: Rotation, g: ArrayLike) -> float:
    """Residual geodesic angle once the best heading rotation is removed."""
    theta = yaw_between(R_a, R_b, g)
    return geodesic_angle(R_a, rot_about_axis(g, theta) @ np.asarray(R_b))


def project_horizontal(m: ArrayLike, g: ArrayLike) -> Vec3:
    """Component of ``m`` orthogonal to the unit vector ``g``.

    A vertical ``m`` yields the zero vector; callers treat that as "no heading
    information".
    """
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return m - float(m @ g) * g


def renormalize(R: Rotation) -> Rotation:
    """Nearest rotation matrix (polar decomposition)."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    Q = U @ Vt
    if np.linalg.det(Q) < 0.0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


def renormalize_many(R: ArrayLike) -> NDArray[np.float64]:
    """:func:`renormalize` over ``(..., 3, 3)`` stacks."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    Q = U @ Vt
    flip = np.linalg.det(Q) < 0.0
    if np.any(flip):
        U[flip, :, -1] = -U[flip, :, -1]
        Q = U @ Vt
    return Q


def is_rotation(R: ArrayLike, tol: float = 1e-6) -> bool:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.allclose(R.T @ R, np.eye(3), atol=tol) and abs(np.linalg.det(R) - 1.0) < tol)


def from_euler(seq: str, angles: ArrayLike, degrees: bool = False) -> Rotation:
    """Convenience wrapper around scipy for building test and motion rotations."""
    return _ScipyRotation.from_euler(seq, angles, degrees=degrees).as_matrix()
