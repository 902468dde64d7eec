"""Rotation losses with gradients in ambient coordinates.

Every loss returns ``(value, grad)`` where ``grad`` is taken with respect to
the first argument, with the same shape.  Leading batch dimensions are
supported; values then have the batch shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyPointSet, ShapeMismatch, ZeroDiameter
from .linalg import sym_eig

LOSS_KINDS = ("frobenius", "quaternion", "points")


def frobenius_loss(R, R_target):
    """Squared Frobenius distance ``|R - R*|_F^2`` and its gradient ``2 (R - R*)``."""
    diff = np.asarray(R, dtype=float) - np.asarray(R_target, dtype=float)
    return np.sum(diff * diff, axis=(-1, -2)), 2.0 * diff


def quaternion_min_loss(q, q_target):
    """``min(|q - q*|^2, |q + q*|^2)``; ties go to the ``q - q*`` branch."""
    q = np.asarray(q, dtype=float)
    qt = np.asarray(q_target, dtype=float)
    minus = q - qt
    plus = q + qt
    lm = np.sum(minus * minus, axis=-1)
    lp = np.sum(plus * plus, axis=-1)
    use_minus = lm <= lp
    value = np.where(use_minus, lm, lp)
    grad = 2.0 * np.where(use_minus[..., None], minus, plus)
    return value, grad


@dataclass
class PointSet:
    """Centred 3D points with their diameter and normalised sample weights.

    The weights play the role of the area elements of a surface integral;
    uniform weights are a Monte-Carlo estimate over uniformly sampled points.
    """

    points: np.ndarray
    diameter: float
    weights: np.ndarray
    _lam: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def from_points(cls, points, weights=None) -> "PointSet":
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeMismatch(f"expected (N, 3) points, got {pts.shape}")
        if len(pts) == 0:
            raise EmptyPointSet("point set is empty")
        w = np.full(len(pts), 1.0 / len(pts)) if weights is None else np.asarray(weights, dtype=float)
        if w.shape != (len(pts),) or np.any(w < 0) or w.sum() <= 0:
            raise ShapeMismatch("weights must be non-negative, one per point")
        w = w / w.sum()
        pts = pts - w @ pts
        diam = max(np.max(np.linalg.norm(pts - p, axis=1)) for p in pts)
        if diam <= 0.0:
            raise ZeroDiameter("all points coincide")
        return cls(pts, float(diam), w)

    def second_moment(self) -> np.ndarray:
        """``sum_i w_i x_i x_i^T / d^2``."""
        return (self.points * self.weights[:, None]).T @ self.points / self.diameter**2

    @property
    def lam(self) -> np.ndarray:
        """Symmetric square root of the normalised second-moment matrix."""
        if self._lam is None:
            w, V = sym_eig(self.second_moment())
            self._lam = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
        return self._lam


def weighted_points_loss(R, R_target, points: PointSet | np.ndarray):
    """Closed form ``|(R - R*) Lam|_F^2`` of the mean squared point distance.

    ``points`` is a :class:`PointSet` or directly a symmetric 3x3 ``Lam``.
    The gradient is ``2 (R - R*) Lam Lam^T``.
    """
    lam = points.lam if isinstance(points, PointSet) else np.asarray(points, dtype=float)
    diff = np.asarray(R, dtype=float) - np.asarray(R_target, dtype=float)
    dl = diff @ lam
    return np.sum(dl * dl, axis=(-1, -2)), 2.0 * dl @ lam.T


def direct_points_loss(R, R_target, points: PointSet):
    """Explicit weighted mean of ``|R x_i - R* x_i|^2 / d^2`` over the points."""
    diff = np.asarray(R, dtype=float) - np.asarray(R_target, dtype=float)
    moved = np.einsum("...ij,nj->...ni", diff, points.points)
    return np.einsum("...ni,...ni,n->...", moved, moved, points.weights) / points.diameter**2


def loss_weight_ratio() -> float:
    """Weight of the Frobenius loss relative to the quaternion loss.

    Near zero angle ``|R - R*|^2 ~ 2 a^2`` while ``min |q +- q*|^2 ~ a^2 / 4``,
    so scaling the Frobenius term by 1/8 makes the two agree.
    """
    return 1.0 / 8.0


@dataclass(frozen=True)
class LossSpec:
    kind: str = "frobenius"
    weight: float = 1.0
    lam: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if self.kind == "points":
            if self.lam is None:
                raise ValueError("points loss needs a Lambda matrix")
            lam = np.asarray(self.lam, dtype=float)
            if lam.shape != (3, 3) or np.abs(lam - lam.T).max() > 1e-12:
                raise ValueError("Lambda must be a symmetric 3x3 matrix")
            if np.linalg.eigvalsh(lam).min() < -1e-12:
                raise ValueError("Lambda must be positive semidefinite")

    @property
    def on_quaternions(self) -> bool:
        return self.kind == "quaternion"

    def __call__(self, pred, target):
        """Weighted loss value and gradient for matrices or quaternions."""
        if self.kind == "frobenius":
            v, g = frobenius_loss(pred, target)
        elif self.kind == "quaternion":
            v, g = quaternion_min_loss(pred, target)
        else:
            v, g = weighted_points_loss(pred, target, self.lam)
        return self.weight * v, self.weight * g
