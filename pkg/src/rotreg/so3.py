"""Rotation matrices, quaternions, rotation vectors and Euler angles.

Conventions used throughout the package:

* rotation matrices act on column vectors; ``vec(R)`` is the row-major
  flattening ``R.reshape(9)``;
* quaternions are stored scalar-last, ``(x, y, z, w)``;
* Euler angles are the XYZ product ``Rx(a) @ Ry(b) @ Rz(c)``.

``exp_map``, ``quat_to_matrix``, ``euler_xyz_to_matrix`` and
``rotvec_to_quat`` are generic over :class:`rotreg.dual.Dual` inputs.
"""

from __future__ import annotations

import numpy as np

from . import dual
from .errors import InvalidRotation, NonFinite
from .linalg import check_finite

SERIES_GUARD = 1e-4


def make_rng(seed: int | None = 0) -> np.random.Generator:
    """Seeded PCG64 generator; the only source of randomness in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def _as_input(x, what: str):
    """Arrays become float arrays; dual numbers pass through."""
    check_finite(x, what)
    return x if dual.is_dual(x) else np.asarray(x, dtype=float)


def _matrix(rows):
    return dual.stack([dual.stack(r, axis=-1) for r in rows], axis=-2)


def hat(v):
    """Skew-symmetric matrix of a 3-vector, ``hat(v) @ u == cross(v, u)``."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    zero = 0.0 * x
    return _matrix([[zero, -z, y], [z, zero, -x], [-y, x, zero]])


def vee(K):
    return dual.stack([K[..., 2, 1], K[..., 0, 2], K[..., 1, 0]], axis=-1)


def exp_map(v):
    """Rodrigues' formula, with a series expansion below ``SERIES_GUARD``."""
    v = _as_input(v, "rotation vector")
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    t2 = x * x + y * y + z * z
    small = dual.value(t2) < SERIES_GUARD**2
    t2s = dual.where(small, 1.0, t2)
    t = np.sqrt(t2s)
    half = np.sin(0.5 * t)
    a = dual.where(small, 1.0 - t2 / 6.0 + t2 * t2 / 120.0, np.sin(t) / t)
    b = dual.where(small, 0.5 - t2 / 24.0 + t2 * t2 / 720.0, 2.0 * half * half / t2s)
    c = 1.0 - b * t2
    return _matrix(
        [
            [c + b * x * x, b * x * y - a * z, b * x * z + a * y],
            [b * x * y + a * z, c + b * y * y, b * y * z - a * x],
            [b * x * z - a * y, b * y * z + a * x, c + b * z * z],
        ]
    )


def rotvec_to_quat(v):
    """Unit quaternion ``(sin(t/2) axis, cos(t/2))`` of a rotation vector."""
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    t2 = x * x + y * y + z * z
    small = dual.value(t2) < SERIES_GUARD**2
    t = np.sqrt(dual.where(small, 1.0, t2))
    k = dual.where(small, 0.5 - t2 / 48.0 + t2 * t2 / 3840.0, np.sin(0.5 * t) / t)
    w = dual.where(small, 1.0 - t2 / 8.0 + t2 * t2 / 384.0, np.cos(0.5 * t))
    return dual.stack([k * x, k * y, k * z, w], axis=-1)


def quat_to_matrix(q):
    """Rotation matrix of a unit quaternion ``(x, y, z, w)``; ``q`` and ``-q`` agree."""
    q = _as_input(q, "quaternion")
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return _matrix(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Pick the representative of ``+-q`` whose first non-zero entry in
    the order ``w, x, y, z`` is positive."""
    q = np.asarray(q, dtype=float)
    order = q[..., [3, 0, 1, 2]]
    nz = order != 0.0
    first = np.argmax(nz, axis=-1)
    lead = np.take_along_axis(order, first[..., None], axis=-1)
    return np.where(lead < 0.0, -q, q)


def validate_rotation(R, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if not np.all(np.isfinite(R)):
        raise NonFinite("rotation contains NaN or Inf")
    if R.shape[-2:] != (3, 3):
        raise InvalidRotation(f"expected 3x3 matrices, got shape {R.shape}")
    ortho = np.abs(np.swapaxes(R, -1, -2) @ R - np.eye(3)).max(initial=0.0)
    det = np.abs(np.linalg.det(R) - 1.0).max(initial=0.0)
    if ortho > tol or det > tol:
        raise InvalidRotation(
            f"not a rotation: max |R^T R - I| = {ortho:.3g}, max |det R - 1| = {det:.3g}"
        )
    return R


def matrix_to_quat(R) -> np.ndarray:
    """Shepperd's method: branch on the largest of trace and diagonal entries."""
    R = validate_rotation(R)
    r00, r11, r22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = r00 + r11 + r22
    with np.errstate(divide="ignore", invalid="ignore"):
        w0 = 0.5 * np.sqrt(np.maximum(1.0 + tr, 0.0))
        c0 = [(R[..., 2, 1] - R[..., 1, 2]) / (4 * w0), (R[..., 0, 2] - R[..., 2, 0]) / (4 * w0),
              (R[..., 1, 0] - R[..., 0, 1]) / (4 * w0), w0]
        x1 = 0.5 * np.sqrt(np.maximum(1.0 + r00 - r11 - r22, 0.0))
        c1 = [x1, (R[..., 0, 1] + R[..., 1, 0]) / (4 * x1), (R[..., 0, 2] + R[..., 2, 0]) / (4 * x1),
              (R[..., 2, 1] - R[..., 1, 2]) / (4 * x1)]
        y2 = 0.5 * np.sqrt(np.maximum(1.0 - r00 + r11 - r22, 0.0))
        c2 = [(R[..., 0, 1] + R[..., 1, 0]) / (4 * y2), y2, (R[..., 1, 2] + R[..., 2, 1]) / (4 * y2),
              (R[..., 0, 2] - R[..., 2, 0]) / (4 * y2)]
        z3 = 0.5 * np.sqrt(np.maximum(1.0 - r00 - r11 + r22, 0.0))
        c3 = [(R[..., 0, 2] + R[..., 2, 0]) / (4 * z3), (R[..., 1, 2] + R[..., 2, 1]) / (4 * z3), z3,
              (R[..., 1, 0] - R[..., 0, 1]) / (4 * z3)]
    cand = np.stack([np.stack(c, axis=-1) for c in (c0, c1, c2, c3)], axis=-2)
    branch = np.argmax(np.stack([tr, r00, r11, r22], axis=-1), axis=-1)
    q = np.take_along_axis(cand, branch[..., None, None], axis=-2)[..., 0, :]
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return canonical_quat(q)


def log_map(R) -> np.ndarray:
    """Rotation vector of angle in ``[0, pi]``; inverse of :func:`exp_map`."""
    q = matrix_to_quat(R)
    xyz, w = q[..., :3], q[..., 3]
    n = np.linalg.norm(xyz, axis=-1)
    small = n < 1e-12
    factor = np.where(small, 2.0 / np.where(small, w, 1.0), 2.0 * np.arctan2(n, w) / np.where(small, 1.0, n))
    return xyz * factor[..., None]


def rotation_angle(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    c = 0.5 * (np.trace(R, axis1=-2, axis2=-1) - 1.0)
    s = 0.5 * np.linalg.norm(vee(R - np.swapaxes(R, -1, -2)), axis=-1)
    return np.arctan2(s, c)


def geodesic_angle(R1, R2) -> np.ndarray:
    """Angle of ``R1^T R2`` in ``[0, pi]``.

    Evaluated as ``atan2(sin, cos)`` rather than ``arccos((tr - 1)/2)``: the two
    agree on rotations, but ``arccos`` loses half the digits near zero.
    """
    R1 = np.asarray(R1, dtype=float)
    R2 = np.asarray(R2, dtype=float)
    return rotation_angle(np.swapaxes(R1, -1, -2) @ R2)


def random_rotation(rng: np.random.Generator, size=None) -> np.ndarray:
    """Uniform rotations: normalised 4D standard normals mapped through quaternions."""
    shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    q = rng.standard_normal(shape + (4,))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    return quat_to_matrix(q)


def random_unit_vectors(rng: np.random.Generator, size, dim: int = 3) -> np.ndarray:
    shape = (size,) if np.isscalar(size) else tuple(size)
    u = rng.standard_normal(shape + (dim,))
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def euler_xyz_to_matrix(angles):
    """``Rx(a) @ Ry(b) @ Rz(c)`` for ``angles[..., :] = (a, b, c)``."""
    angles = _as_input(angles, "euler angles")
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa, cb, sb, cc, sc = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(c), np.sin(c)
    return _matrix(
        [
            [cb * cc, -cb * sc, sb],
            [ca * sc + sa * sb * cc, ca * cc - sa * sb * sc, -sa * cb],
            [sa * sc - ca * sb * cc, sa * cc + ca * sb * sc, ca * cb],
        ]
    )


def matrix_to_euler_xyz(R, gimbal_tol: float = 1e-9) -> np.ndarray:
    """XYZ angles with the middle angle in ``[-pi/2, pi/2]``.

    At gimbal lock (``|R[0, 2]| = 1``) the last angle is fixed to zero.
    """
    R = validate_rotation(R)
    sb = np.clip(R[..., 0, 2], -1.0, 1.0)
    b = np.arcsin(sb)
    locked = np.abs(np.abs(sb) - 1.0) <= gimbal_tol
    a = np.arctan2(-R[..., 1, 2], R[..., 2, 2])
    c = np.arctan2(-R[..., 0, 1], R[..., 0, 0])
    a_locked = np.arctan2(np.sign(sb) * R[..., 1, 0], R[..., 1, 1])
    a = np.where(locked, a_locked, a)
    c = np.where(locked, 0.0, c)
    b = np.where(locked, np.sign(sb) * np.pi / 2, b)
    return np.stack([a, b, c], axis=-1)


def axis_rotation(axis: int, angle) -> np.ndarray:
    """Elementary rotation about coordinate axis 0, 1 or 2."""
    angle = np.asarray(angle, dtype=float)
    v = np.zeros(angle.shape + (3,))
    v[..., axis] = angle
    return exp_map(v)
