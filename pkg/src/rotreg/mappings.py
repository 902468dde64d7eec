"""Differentiable mappings from R^n onto SO(3).

Every mapping exposes forward evaluation (:func:`apply`), a 9 x n ambient
Jacobian (:func:`jacobian`), a right inverse (:func:`canonical_preimage`) and
a generator of distinct pre-images of one rotation (:func:`preimage_pair`).

Input layouts:

========================  ===  ==============================================
kind                       n   layout of ``x``
========================  ===  ==============================================
``rotvec``                 3   rotation vector
``rotvec-restricted:a``    3   ``exp(a tanh(|x|) x / |x|)``
``quaternion``             4   unnormalised quaternion ``(x, y, z, w)``
``euler``                  3   XYZ angles
``sixd``                   6   two columns ``(m1, m2)`` of a 3x2 matrix
``procrustes``             9   3x3 matrix, row-major
``symmatrix``             10   upper triangle of a 4x4 symmetric matrix
========================  ===  ==============================================
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import dual, so3
from .errors import (
    DegenerateInput,
    InjectiveMapping,
    NearSingularDerivative,
    OutOfRange,
    ShapeMismatch,
    Unsupported,
)
from .linalg import check_finite, svd3, sym_eig

QUAT_NORM_MIN = 1e-12
SIXD_RANK_TOL = 1e-9
PROCRUSTES_GAP_MIN = 1e-9
PROCRUSTES_DENOM_MIN = 1e-7
SYM_GAP_MIN = 1e-9

_DIMS = {
    "rotvec": 3,
    "rotvec-restricted": 3,
    "quaternion": 4,
    "euler": 3,
    "sixd": 6,
    "procrustes": 9,
    "symmatrix": 10,
}


@dataclass(frozen=True)
class MappingKind:
    name: str
    max_angle: float | None = None

    def __post_init__(self):
        if self.name not in _DIMS:
            raise ValueError(f"unknown mapping {self.name!r}; expected one of {sorted(_DIMS)}")
        if self.name == "rotvec-restricted":
            if self.max_angle is None or not 0.0 < self.max_angle < math.pi:
                raise ValueError("restricted rotation vector needs a max angle in (0, pi)")
        elif self.max_angle is not None:
            raise ValueError(f"{self.name} takes no max angle")

    @property
    def input_dim(self) -> int:
        return _DIMS[self.name]

    def __str__(self):
        if self.max_angle is None:
            return self.name
        return f"{self.name}:{self.max_angle:.17g}"


ROTVEC = MappingKind("rotvec")
QUATERNION = MappingKind("quaternion")
EULER = MappingKind("euler")
SIXD = MappingKind("sixd")
PROCRUSTES = MappingKind("procrustes")
SYMMATRIX = MappingKind("symmatrix")


def rotvec_restricted(max_angle: float = math.pi / 2) -> MappingKind:
    return MappingKind("rotvec-restricted", float(max_angle))


ROTVEC_HALF_PI = rotvec_restricted(math.pi / 2)
ALL_KINDS = (ROTVEC, ROTVEC_HALF_PI, QUATERNION, EULER, SIXD, PROCRUSTES, SYMMATRIX)


def parse_mapping(text: str | MappingKind) -> MappingKind:
    """``"procrustes"``, ``"rotvec-restricted"`` or ``"rotvec-restricted:1.2"``."""
    if isinstance(text, MappingKind):
        return text
    name, _, arg = text.strip().partition(":")
    aliases = {"6d": "sixd", "euler-xyz": "euler", "quat": "quaternion", "sym": "symmatrix",
               "symmatrix10": "symmatrix", "rotvec-restricted": "rotvec-restricted"}
    name = aliases.get(name.lower(), name.lower())
    if name == "rotvec-restricted":
        return rotvec_restricted(float(arg) if arg else math.pi / 2)
    if arg:
        raise ValueError(f"{name} takes no parameter")
    return MappingKind(name)


class MappingEval(NamedTuple):
    value: np.ndarray
    jacobian: np.ndarray


class PreimagePair(NamedTuple):
    x1: np.ndarray
    x2: np.ndarray


# ---------------------------------------------------------------- layouts

_SYM_IDX = [(0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)]


def sym_from_vec(a):
    """4x4 symmetric matrix whose upper triangle, row by row, is ``a``."""
    pos = {}
    for n, (i, j) in enumerate(_SYM_IDX):
        pos[(i, j)] = pos[(j, i)] = n
    rows = [dual.stack([a[..., pos[(i, j)]] for j in range(4)], axis=-1) for i in range(4)]
    return dual.stack(rows, axis=-2)


def vec_from_sym(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    return np.stack([S[..., i, j] for i, j in _SYM_IDX], axis=-1)


def sixd_columns(x):
    return x[..., 0:3], x[..., 3:6]


# --------------------------------------------------------- forward maps


def _restricted_scale(x, max_angle):
    r2 = dual.dot(x, x)
    small = dual.value(r2) < so3.SERIES_GUARD**2
    r = np.sqrt(dual.where(small, 1.0, r2))
    series = 1.0 - r2 / 3.0 + 2.0 * r2 * r2 / 15.0
    return max_angle * dual.where(small, series, np.tanh(r) / r)


def _forward_rotvec_restricted(x, max_angle):
    g = _restricted_scale(x, max_angle)
    return so3.exp_map(x * g[..., None])


def _forward_quaternion(x):
    n = np.sqrt(dual.dot(x, x))
    return so3.quat_to_matrix(x / n[..., None])


def _forward_sixd(x):
    m1, m2 = sixd_columns(x)
    e1 = m1 / np.sqrt(dual.dot(m1, m1))[..., None]
    u2 = m2 - dual.dot(e1, m2)[..., None] * e1
    e2 = u2 / np.sqrt(dual.dot(u2, u2))[..., None]
    e3 = dual.cross(e1, e2)
    return dual.stack([e1, e2, e3], axis=-1)


def _forward_symmatrix(x):
    _, V = sym_eig(sym_from_vec(x))
    return so3.quat_to_matrix(V[..., :, 0])


def _procrustes_parts(M):
    U, d, V = svd3(M)
    sign = np.sign(np.linalg.det(U) * np.linalg.det(V))
    S = np.ones(d.shape)
    S[..., 2] = sign
    R = (U * S[..., None, :]) @ np.swapaxes(V, -1, -2)
    return U, d, V, sign, R


def _forward_generic(kind: MappingKind, x):
    if kind.name == "rotvec":
        return so3.exp_map(x)
    if kind.name == "rotvec-restricted":
        return _forward_rotvec_restricted(x, kind.max_angle)
    if kind.name == "quaternion":
        return _forward_quaternion(x)
    if kind.name == "euler":
        return so3.euler_xyz_to_matrix(x)
    if kind.name == "sixd":
        return _forward_sixd(x)
    if kind.name == "symmatrix":
        return _forward_symmatrix(x)
    raise Unsupported(f"{kind} has no generic forward path")


def _check_input(kind: MappingKind, x) -> np.ndarray:
    x = check_finite(x, f"{kind} input")
    if x.shape[-1:] != (kind.input_dim,):
        raise ShapeMismatch(f"{kind} expects inputs of size {kind.input_dim}, got shape {x.shape}")
    return x


def degenerate_mask(kind: MappingKind, x, derivative: bool = False) -> np.ndarray:
    """Boolean mask of inputs on which ``kind`` is undefined.

    With ``derivative=True`` the Procrustes mask also flags inputs where the
    analytic Jacobian would divide by less than ``PROCRUSTES_DENOM_MIN``.
    """
    kind = parse_mapping(kind)
    x = _check_input(kind, x)
    batch = x.shape[:-1]
    if kind.name == "quaternion":
        return np.linalg.norm(x, axis=-1) < QUAT_NORM_MIN
    if kind.name == "sixd":
        m1, m2 = sixd_columns(x)
        n1 = np.linalg.norm(m1, axis=-1)
        e1 = m1 / np.where(n1 > 0, n1, 1.0)[..., None]
        u2 = m2 - np.sum(e1 * m2, axis=-1, keepdims=True) * e1
        return (n1 <= SIXD_RANK_TOL) | (np.linalg.norm(u2, axis=-1) <= SIXD_RANK_TOL)
    if kind.name == "procrustes":
        M = x.reshape(batch + (3, 3))
        _, d, _, sign, _ = _procrustes_parts(M)
        bad = (np.linalg.det(M) <= 0.0) & (d[..., 1] - d[..., 2] < PROCRUSTES_GAP_MIN)
        if derivative:
            bad |= _procrustes_min_denominator(d, sign) <= PROCRUSTES_DENOM_MIN
        return bad
    if kind.name == "symmatrix":
        w, _ = sym_eig(sym_from_vec(x))
        return w[..., 1] - w[..., 0] < SYM_GAP_MIN
    return np.zeros(batch, dtype=bool)


def _raise_if_degenerate(kind, x, derivative=False):
    bad = degenerate_mask(kind, x, derivative=derivative)
    if np.any(bad):
        raise DegenerateInput(f"{int(np.sum(bad))} input(s) outside the domain of {kind}")


def apply(kind: MappingKind | str, x) -> np.ndarray:
    """Map ``x`` of shape ``(..., n)`` to rotation matrices ``(..., 3, 3)``."""
    kind = parse_mapping(kind)
    x = _check_input(kind, x)
    _raise_if_degenerate(kind, x)
    if kind.name == "procrustes":
        return _procrustes_parts(x.reshape(x.shape[:-1] + (3, 3)))[4]
    return _forward_generic(kind, x)


# -------------------------------------------------------------- Jacobians


def _procrustes_denominators(d, sign):
    den = d[..., :, None] + d[..., None, :]
    flipped = den.copy()
    gap = d[..., 0:2] - d[..., 2:3]
    flipped[..., 0:2, 2] = gap
    flipped[..., 2, 0:2] = gap
    return np.where((sign < 0)[..., None, None], flipped, den)


def _procrustes_min_denominator(d, sign):
    den = _procrustes_denominators(d, sign)
    off = ~np.eye(3, dtype=bool)
    return np.min(np.where(off, np.abs(den), np.inf), axis=(-1, -2))


def _procrustes_jacobian(x, parts=None):
    batch = x.shape[:-1]
    U, d, V, sign, R = parts if parts is not None else _procrustes_parts(x.reshape(batch + (3, 3)))
    den = _procrustes_denominators(d, sign)
    off = ~np.eye(3, dtype=bool)
    if np.any(np.min(np.where(off, np.abs(den), np.inf), axis=(-1, -2)) <= PROCRUSTES_DENOM_MIN):
        raise NearSingularDerivative(
            "Procrustes derivative denominator below guard; use finite_difference_jacobian"
        )
    # num[i, j, k, l] = u_ik v_jl - u_il v_jk, except that pairs touching the
    # last singular vector take u_ik v_jl + u_il v_jk when the sign is flipped
    uv = np.einsum("...ik,...jl->...ijkl", U, V)
    uv_t = np.swapaxes(uv, -1, -2)
    touches_last = np.zeros((3, 3), dtype=bool)
    touches_last[0:2, 2] = touches_last[2, 0:2] = True
    flipped = (sign < 0)[..., None, None, None, None] & touches_last
    num = np.where(flipped, uv + uv_t, uv - uv_t)
    omega = np.where(off, num / np.where(off, den, 1.0)[..., None, None, :, :], 0.0)
    dR = np.einsum("...ak,...ijkl,...bl->...abij", U, omega, V)
    return R, dR.reshape(batch + (9, 9))


def jacobian(kind: MappingKind | str, x) -> MappingEval:
    """Rotation and ambient Jacobian ``d vec(R) / dx`` of shape ``(..., 9, n)``.

    Procrustes uses the closed-form SVD derivative; every other kind is
    differentiated in forward mode through its own forward code.
    """
    kind = parse_mapping(kind)
    x = _check_input(kind, x)
    _raise_if_degenerate(kind, x)
    if kind.name == "procrustes":
        R, J = _procrustes_jacobian(x)
        return MappingEval(R, J)
    R = _forward_generic(kind, dual.seed(x))
    n = kind.input_dim
    return MappingEval(R.val, R.tan.reshape(x.shape[:-1] + (9, n)))


def jacobian_where_defined(kind: MappingKind | str, x):
    """Like :func:`jacobian` but skips inputs outside the differentiable domain.

    Returns ``(R, J, ok)``; rows with ``ok == False`` hold ``R = I`` and
    ``J = 0``.  Procrustes decomposes each input only once.
    """
    kind = parse_mapping(kind)
    x = _check_input(kind, x)
    batch = x.shape[:-1]
    R = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()
    J = np.zeros(batch + (9, kind.input_dim))
    if kind.name != "procrustes":
        ok = ~degenerate_mask(kind, x, derivative=True)
        if np.any(ok):
            R[ok], J[ok] = jacobian(kind, x[ok])
        return R, J, ok
    U, d, V, sign, Rp = _procrustes_parts(x.reshape(batch + (3, 3)))
    det = np.linalg.det(x.reshape(batch + (3, 3)))
    bad = (det <= 0.0) & (d[..., 1] - d[..., 2] < PROCRUSTES_GAP_MIN)
    ok = ~(bad | (_procrustes_min_denominator(d, sign) <= PROCRUSTES_DENOM_MIN))
    if np.any(ok):
        R[ok], J[ok] = _procrustes_jacobian(x[ok], (U[ok], d[ok], V[ok], sign[ok], Rp[ok]))
    return R, J, ok


def finite_difference_jacobian(kind: MappingKind | str, x, h: float = 1e-5) -> np.ndarray:
    """Central differences of :func:`apply`, shape ``(..., 9, n)``."""
    kind = parse_mapping(kind)
    x = _check_input(kind, x)
    cols = []
    for i in range(kind.input_dim):
        e = np.zeros(kind.input_dim)
        e[i] = h
        diff = apply(kind, x + e) - apply(kind, x - e)
        cols.append(diff.reshape(x.shape[:-1] + (9,)) / (2 * h))
    return np.stack(cols, axis=-1)


def quaternion_jacobian(kind: MappingKind | str, x):
    """Unit quaternion output and its ``(..., 4, n)`` Jacobian.

    Defined for mappings that produce a quaternion on the way to the
    rotation matrix: quaternion and (restricted) rotation vectors.
    """
    kind = parse_mapping(kind)
    x = _check_input(kind, x)
    _raise_if_degenerate(kind, x)
    xs = dual.seed(x)
    if kind.name == "quaternion":
        q = xs / np.sqrt(dual.dot(xs, xs))[..., None]
    elif kind.name == "rotvec":
        q = so3.rotvec_to_quat(xs)
    elif kind.name == "rotvec-restricted":
        q = so3.rotvec_to_quat(xs * _restricted_scale(xs, kind.max_angle)[..., None])
    else:
        raise Unsupported(f"{kind} has no quaternion output")
    return q.val, q.tan


# ------------------------------------------------------------ pre-images


def canonical_preimage(kind: MappingKind | str, R) -> np.ndarray:
    """A right inverse: ``apply(kind, canonical_preimage(kind, R)) == R``."""
    kind = parse_mapping(kind)
    R = so3.validate_rotation(R)
    if kind.name == "rotvec":
        return so3.log_map(R)
    if kind.name == "rotvec-restricted":
        v = so3.log_map(R)
        t = np.linalg.norm(v, axis=-1)
        if np.any(t >= kind.max_angle):
            raise OutOfRange(f"rotation angle {t.max():.6g} not below {kind.max_angle:.6g}")
        small = t < 1e-12
        ratio = np.where(small, 1.0 / kind.max_angle, np.arctanh(t / kind.max_angle) / np.where(small, 1.0, t))
        return v * ratio[..., None]
    if kind.name == "quaternion":
        return so3.matrix_to_quat(R)
    if kind.name == "euler":
        return so3.matrix_to_euler_xyz(R)
    if kind.name == "sixd":
        return np.concatenate([R[..., :, 0], R[..., :, 1]], axis=-1)
    if kind.name == "procrustes":
        return R.reshape(R.shape[:-2] + (9,))
    if kind.name == "symmatrix":
        q = so3.matrix_to_quat(R)
        S = np.eye(4) - q[..., :, None] * q[..., None, :]
        return vec_from_sym(S)
    raise Unsupported(str(kind))


def _random_spd3(rng, lo=0.5, hi=2.0):
    Q = so3.random_rotation(rng)
    lam = rng.uniform(lo, hi, size=3)
    return (Q * lam) @ Q.T


def preimage_pair(kind: MappingKind | str, R, rng: np.random.Generator,
                  antipodal: bool = False) -> PreimagePair:
    """Two distinct inputs mapped to the same rotation ``R`` (a single 3x3).

    ``antipodal=True`` selects the ``(q, -q)`` witness for quaternions.
    Euler angles are unsupported; the restricted rotation vector is injective.
    """
    kind = parse_mapping(kind)
    R = so3.validate_rotation(R)
    if R.shape != (3, 3):
        raise ShapeMismatch("preimage_pair takes a single rotation")
    if kind.name == "euler":
        raise Unsupported("Euler pre-images form a discrete set; no pair generator")
    if kind.name == "rotvec-restricted":
        raise InjectiveMapping(f"{kind} is injective")
    if kind.name == "quaternion":
        q = so3.matrix_to_quat(R)
        if antipodal:
            return PreimagePair(q, -q)
        lam = 1.0
        while abs(lam - 1.0) < 1e-2:
            lam = rng.uniform(0.5, 2.0)
        return PreimagePair(q, lam * q)
    if kind.name == "rotvec":
        v = so3.log_map(R)
        t = np.linalg.norm(v)
        if t < 1e-12:
            return PreimagePair(np.zeros(3), 2 * math.pi * so3.random_unit_vectors(rng, 1)[0])
        return PreimagePair(v, (1.0 + 2 * math.pi / t) * v)
    if kind.name == "procrustes":
        return PreimagePair((R @ _random_spd3(rng)).reshape(9), (R @ _random_spd3(rng)).reshape(9))
    if kind.name == "sixd":
        def one():
            c1, c2 = rng.uniform(0.5, 2.0, size=2)
            t = rng.standard_normal()
            return np.concatenate([c1 * R[:, 0], c2 * R[:, 1] + t * R[:, 0]])
        return PreimagePair(one(), one())
    if kind.name == "symmatrix":
        q = so3.matrix_to_quat(R)

        def one():
            # orthonormal basis with first column q
            B = np.column_stack([q, rng.standard_normal((4, 3))])
            Q, _ = np.linalg.qr(B)
            Q[:, 0] = q
            low = rng.uniform(-1.0, 1.0)
            lam = low + np.concatenate([[0.0], np.cumsum(rng.uniform(0.5, 2.0, size=3))])
            return vec_from_sym((Q * lam) @ Q.T)
        return PreimagePair(one(), one())
    raise Unsupported(str(kind))


def weighted_procrustes(M, Lam) -> np.ndarray:
    """Rotation minimising ``|R Lam - M|_F^2`` for 3 x k matrices ``M`` and ``Lam``.

    Equivalent to Procrustes orthonormalisation of ``M Lam^T``.
    """
    M = np.asarray(M, dtype=float)
    Lam = np.asarray(Lam, dtype=float)
    if M.shape != Lam.shape or M.shape[-2] != 3:
        raise ShapeMismatch(f"M {M.shape} and Lambda {Lam.shape} must both be 3 x k")
    P = M @ np.swapaxes(Lam, -1, -2)
    return apply(PROCRUSTES, P.reshape(P.shape[:-2] + (9,)))


def diag_rect(*lams) -> np.ndarray:
    """3 x k matrix with ``lams`` on its diagonal and zeros elsewhere."""
    L = np.zeros((3, len(lams)))
    L[np.arange(len(lams)), np.arange(len(lams))] = lams
    return L


# ------------------------------------------------------------- softmax


def softmax_map(x) -> np.ndarray:
    x = check_finite(x, "softmax input")
    z = np.exp(x - np.max(x, axis=-1, keepdims=True))
    return z / np.sum(z, axis=-1, keepdims=True)


def softmax_jacobian(x) -> np.ndarray:
    """``dp_i/dx_j = p_i (delta_ij - p_j)``."""
    p = softmax_map(x)
    return p[..., :, None] * (np.eye(p.shape[-1]) - p[..., None, :])


def softmax_preimage(p, c=0.0) -> np.ndarray:
    """The point ``log(p) + c`` of the pre-image line of ``p``."""
    p = check_finite(p, "probability vector")
    if np.any(p <= 0.0):
        raise DegenerateInput("softmax pre-image needs strictly positive probabilities")
    return np.log(p) + np.asarray(c, dtype=float)[..., None] if np.ndim(c) else np.log(p) + c
