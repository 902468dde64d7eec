"""Fixed-size dense linear algebra: Jacobi eigensolver, 3x3 SVD, numeric rank.

All routines accept leading batch dimensions (``(..., k, k)``).  The symmetric
eigensolver is written against :mod:`rotreg.dual` primitives so it can be
differentiated in forward mode.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import dual
from .errors import NonFinite

RECON_TOL = 1e-10
ORTHO_TOL = 1e-12
RANK_REL_TOL = 1e-7
JACOBI_SWEEPS = 8
SVD_SWEEPS = 12


class Svd3(NamedTuple):
    U: np.ndarray
    d: np.ndarray
    V: np.ndarray


class SymEig(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def check_finite(a, what: str = "input") -> np.ndarray:
    v = dual.value(a)
    if not np.all(np.isfinite(v)):
        raise NonFinite(f"{what} contains NaN or Inf")
    return v


def _plane_rotation(c, s, p: int, q: int, k: int):
    rows = []
    for i in range(k):
        row = []
        for j in range(k):
            if (i, j) in ((p, p), (q, q)):
                row.append(c)
            elif (i, j) == (p, q):
                row.append(s)
            elif (i, j) == (q, p):
                row.append(-s)
            else:
                row.append(1.0 if i == j else 0.0)
        rows.append(dual.stack(row, axis=-1))
    return dual.stack(rows, axis=-2)


def sym_eig(A) -> SymEig:
    """Eigendecomposition of a symmetric 3x3 or 4x4 matrix by cyclic Jacobi.

    Eigenvalues come back in ascending order, eigenvectors as the columns of
    an orthogonal matrix.  ``A`` may be a :class:`~rotreg.dual.Dual`, in which
    case a fixed number of sweeps is run and both outputs carry tangents.
    """
    v = check_finite(A, "matrix")
    k = v.shape[-1]
    if v.shape[-2:] not in ((3, 3), (4, 4)):
        raise ValueError(f"sym_eig expects a 3x3 or 4x4 matrix, got {v.shape[-2:]}")
    A = 0.5 * (A + dual.swapaxes(A, -1, -2))
    batch = v.shape[:-2]
    V = np.broadcast_to(np.eye(k), batch + (k, k)).copy()
    differentiating = dual.is_dual(A)
    scale = np.sum(v * v, axis=(-1, -2))
    offmask = ~np.eye(k, dtype=bool)

    for _ in range(JACOBI_SWEEPS):
        av = dual.value(A)
        off = np.sum(np.where(offmask, av * av, 0.0), axis=(-1, -2))
        if not differentiating and np.all(off <= 1e-36 * scale):
            break
        for p in range(k - 1):
            for q in range(p + 1, k):
                app, aqq, apq = A[..., p, p], A[..., q, q], A[..., p, q]
                diff = aqq - app
                # sign flip keeps |angle| <= pi/4
                sgn = np.where(dual.value(diff) < 0.0, -1.0, 1.0)
                phi = 0.5 * np.arctan2(2.0 * apq * sgn, diff * sgn)
                G = _plane_rotation(np.cos(phi), np.sin(phi), p, q, k)
                A = dual.matmul(dual.swapaxes(G, -1, -2), dual.matmul(A, G))
                V = dual.matmul(V, G)

    w = dual.stack([A[..., i, i] for i in range(k)], axis=-1)
    order = np.argsort(dual.value(w), axis=-1, kind="stable")
    w = dual.take_along_axis(w, order, axis=-1)
    V = dual.take_along_axis(V, np.broadcast_to(order[..., None, :], batch + (k, k)), axis=-1)
    return SymEig(w, V)


def _unit_orthogonal_to(u: np.ndarray) -> np.ndarray:
    """Some unit vector orthogonal to each unit vector in ``u`` (..., 3)."""
    axis = np.zeros_like(u)
    idx = np.argmin(np.abs(u), axis=-1)
    np.put_along_axis(axis, idx[..., None], 1.0, axis=-1)
    w = np.cross(u, axis)
    return w / np.linalg.norm(w, axis=-1, keepdims=True)


def svd3(M) -> Svd3:
    """Singular value decomposition of 3x3 matrices by one-sided Jacobi.

    Column rotations from the right orthogonalise ``M`` in place (``M V = U D``),
    which keeps full relative accuracy on the small singular values.
    Singular values are sorted in strictly descending order, ties keeping
    their original column order.
    """
    M = check_finite(M, "matrix")
    if M.shape[-2:] != (3, 3):
        raise ValueError(f"svd3 expects 3x3 matrices, got {M.shape[-2:]}")
    batch = M.shape[:-2]
    A = M.astype(float, copy=True)
    V = np.broadcast_to(np.eye(3), batch + (3, 3)).copy()

    for _ in range(SVD_SWEEPS):
        any_active = False
        for p, q in ((0, 1), (0, 2), (1, 2)):
            ap, aq = A[..., :, p].copy(), A[..., :, q].copy()
            alpha = np.sum(ap * ap, axis=-1)
            beta = np.sum(aq * aq, axis=-1)
            gamma = np.sum(ap * aq, axis=-1)
            active = np.abs(gamma) > 1e-16 * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            any_active = True
            g = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * g)
            with np.errstate(over="ignore"):
                t = np.where(zeta >= 0.0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)[..., None]
            s = np.where(active, s, 0.0)[..., None]
            A[..., :, p] = c * ap - s * aq
            A[..., :, q] = s * ap + c * aq
            vp, vq = V[..., :, p].copy(), V[..., :, q].copy()
            V[..., :, p] = c * vp - s * vq
            V[..., :, q] = s * vp + c * vq
        if not any_active:
            break

    d = np.linalg.norm(A, axis=-2)
    order = np.argsort(-d, axis=-1, kind="stable")
    d = np.take_along_axis(d, order, axis=-1)
    cols = np.broadcast_to(order[..., None, :], batch + (3, 3))
    A = np.take_along_axis(A, cols, axis=-1)
    V = np.take_along_axis(V, cols, axis=-1)

    tiny = 1e-300
    a1, a2, a3 = A[..., :, 0], A[..., :, 1], A[..., :, 2]
    e1 = np.zeros_like(a1)
    e1[..., 0] = 1.0
    u1 = np.where((d[..., 0] > tiny)[..., None], a1 / np.maximum(d[..., 0], tiny)[..., None], e1)
    r2 = a2 - np.sum(u1 * a2, axis=-1, keepdims=True) * u1
    n2 = np.linalg.norm(r2, axis=-1, keepdims=True)
    u2 = np.where(n2 > tiny, r2 / np.maximum(n2, tiny), _unit_orthogonal_to(u1))
    u3 = np.cross(u1, u2)
    flip = np.sum(u3 * a3, axis=-1, keepdims=True) < 0.0
    u3 = np.where(flip, -u3, u3)
    U = np.stack([u1, u2, u3], axis=-1)
    return Svd3(U, d, V)


def numeric_rank(J, tol: float = RANK_REL_TOL, dim: int = 3):
    """Numeric rank of a (batch of) Jacobian matrices.

    Counts singular values above ``tol`` times the largest one and also
    returns the ``dim``-th largest singular value as a rank margin.
    """
    J = check_finite(J, "jacobian")
    s = np.linalg.svd(J, compute_uv=False)
    top = s[..., :1]
    rank = np.sum((s > tol * top) & (top > 0.0), axis=-1)
    sigma = s[..., dim - 1] if s.shape[-1] >= dim else np.zeros(s.shape[:-1])
    return rank, sigma
