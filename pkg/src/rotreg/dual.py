"""Vectorised forward-mode differentiation with dual numbers.

A :class:`Dual` carries a value array of shape ``S`` and a tangent array of
shape ``S + (n,)`` holding derivatives with respect to ``n`` seed directions.
Numpy ufuncs dispatch to it through ``__array_ufunc__``, so forward code
written with ``np.sin``, ``np.sqrt``, arithmetic operators and the helpers of
this module runs unchanged on plain arrays and on duals.

>>> x = seed(np.array([0.5, 2.0]))
>>> y = x[0] * np.sin(x[1])
>>> y.tan.round(6).tolist()
[0.909297, -0.208073]
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "tan")

    def __init__(self, val, tan):
        self.val = np.asarray(val, dtype=float)
        self.tan = np.asarray(tan, dtype=float)
        if self.tan.shape[:-1] != self.val.shape:
            raise ValueError(
                f"tangent shape {self.tan.shape} does not extend value shape {self.val.shape}"
            )

    @property
    def shape(self):
        return self.val.shape

    @property
    def ndim(self):
        return self.val.ndim

    @property
    def nseeds(self):
        return self.tan.shape[-1]

    def __repr__(self):
        return f"Dual(val={self.val!r}, nseeds={self.nseeds})"

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        if any(i is Ellipsis for i in idx):
            tidx = idx + (slice(None),)
        else:
            tidx = idx
        return Dual(self.val[idx], self.tan[tidx])

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        rule = _RULES.get(ufunc)
        if rule is None:
            return NotImplemented
        return rule(*inputs)

    __add__ = lambda self, o: np.add(self, o)  # noqa: E731
    __radd__ = lambda self, o: np.add(o, self)  # noqa: E731
    __sub__ = lambda self, o: np.subtract(self, o)  # noqa: E731
    __rsub__ = lambda self, o: np.subtract(o, self)  # noqa: E731
    __mul__ = lambda self, o: np.multiply(self, o)  # noqa: E731
    __rmul__ = lambda self, o: np.multiply(o, self)  # noqa: E731
    __truediv__ = lambda self, o: np.true_divide(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: np.true_divide(o, self)  # noqa: E731
    __neg__ = lambda self: np.negative(self)  # noqa: E731
    __pow__ = lambda self, p: np.power(self, p)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __rmatmul__ = lambda self, o: matmul(o, self)  # noqa: E731

    def __pos__(self):
        return self

    __lt__ = lambda self, o: np.less(self, o)  # noqa: E731
    __le__ = lambda self, o: np.less_equal(self, o)  # noqa: E731
    __gt__ = lambda self, o: np.greater(self, o)  # noqa: E731
    __ge__ = lambda self, o: np.greater_equal(self, o)  # noqa: E731


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def tangent(x, nseeds: int):
    if isinstance(x, Dual):
        return x.tan
    v = np.asarray(x, dtype=float)
    return np.zeros(v.shape + (nseeds,))


def seed(x) -> Dual:
    """Dual whose tangent is the identity over the last axis of ``x``."""
    x = np.asarray(x, dtype=float)
    n = x.shape[-1]
    tan = np.broadcast_to(np.eye(n), x.shape + (n,)).copy()
    return Dual(x, tan)


def _split(a, b):
    n = a.nseeds if isinstance(a, Dual) else b.nseeds
    va, vb = value(a), value(b)
    ta = a.tan if isinstance(a, Dual) else None
    tb = b.tan if isinstance(b, Dual) else None
    return n, va, vb, ta, tb


def _full(t, shape, n):
    return np.broadcast_to(t, shape + (n,))


def _add(a, b):
    n, va, vb, ta, tb = _split(a, b)
    v = va + vb
    if ta is None:
        t = _full(tb, v.shape, n)
    elif tb is None:
        t = _full(ta, v.shape, n)
    else:
        t = ta + tb
    return Dual(v, t)


def _sub(a, b):
    return _add(a, np.negative(b))


def _mul(a, b):
    n, va, vb, ta, tb = _split(a, b)
    v = va * vb
    t = 0.0
    if ta is not None:
        t = t + ta * vb[..., None]
    if tb is not None:
        t = t + va[..., None] * tb
    return Dual(v, _full(t, v.shape, n))


def _div(a, b):
    n, va, vb, ta, tb = _split(a, b)
    v = va / vb
    t = 0.0
    if ta is not None:
        t = t + ta / vb[..., None]
    if tb is not None:
        t = t - (v / vb)[..., None] * tb
    return Dual(v, _full(t, v.shape, n))


def _power(a, p):
    if isinstance(p, Dual):
        raise TypeError("dual exponents are not supported")
    p = np.asarray(p, dtype=float)
    v = np.power(a.val, p)
    return Dual(v, (p * np.power(a.val, p - 1.0))[..., None] * a.tan)


def _arctan2(y, x):
    n, vy, vx, ty, tx = _split(y, x)
    v = np.arctan2(vy, vx)
    r2 = vx * vx + vy * vy
    safe = np.where(r2 > 0.0, r2, 1.0)
    t = 0.0
    if ty is not None:
        t = t + (vx / safe)[..., None] * ty
    if tx is not None:
        t = t - (vy / safe)[..., None] * tx
    t = np.where((r2 > 0.0)[..., None], t, 0.0)
    return Dual(v, _full(t, v.shape, n))


def _unary(f, df):
    def rule(a):
        v = f(a.val)
        return Dual(v, df(a.val, v)[..., None] * a.tan)

    return rule


def _compare(ufunc):
    def rule(a, b):
        return ufunc(value(a), value(b))

    return rule


_RULES = {
    np.add: _add,
    np.subtract: _sub,
    np.multiply: _mul,
    np.true_divide: _div,
    np.power: _power,
    np.arctan2: _arctan2,
    np.negative: lambda a: Dual(-a.val, -a.tan),
    np.positive: lambda a: a,
    np.sin: _unary(np.sin, lambda x, v: np.cos(x)),
    np.cos: _unary(np.cos, lambda x, v: -np.sin(x)),
    np.sqrt: _unary(np.sqrt, lambda x, v: 0.5 / v),
    np.exp: _unary(np.exp, lambda x, v: v),
    np.log: _unary(np.log, lambda x, v: 1.0 / x),
    np.tanh: _unary(np.tanh, lambda x, v: 1.0 - v * v),
    np.arctanh: _unary(np.arctanh, lambda x, v: 1.0 / (1.0 - x * x)),
    np.arcsin: _unary(np.arcsin, lambda x, v: 1.0 / np.sqrt(1.0 - x * x)),
    np.square: _unary(np.square, lambda x, v: 2.0 * x),
    np.absolute: _unary(np.absolute, lambda x, v: np.sign(x)),
    np.less: _compare(np.less),
    np.less_equal: _compare(np.less_equal),
    np.greater: _compare(np.greater),
    np.greater_equal: _compare(np.greater_equal),
}


def _tan_axis(axis: int) -> int:
    return axis - 1 if axis < 0 else axis


def _nseeds(seq) -> int | None:
    for s in seq:
        if isinstance(s, Dual):
            return s.nseeds
    return None


def stack(seq, axis: int = 0):
    seq = list(seq)
    n = _nseeds(seq)
    if n is None:
        return np.stack(np.broadcast_arrays(*[np.asarray(s, dtype=float) for s in seq]), axis=axis)
    vals = np.broadcast_arrays(*[value(s) for s in seq])
    shape = vals[0].shape
    tans = [_full(tangent(s, n), shape, n) for s in seq]
    return Dual(np.stack(vals, axis=axis), np.stack(tans, axis=_tan_axis(axis)))


def where(cond, a, b):
    n = _nseeds([a, b])
    if n is None:
        return np.where(cond, a, b)
    cond = np.asarray(cond)
    v = np.where(cond, value(a), value(b))
    t = np.where(cond[..., None], tangent(a, n), tangent(b, n))
    return Dual(v, _full(t, v.shape, n))


def sum(x, axis=None):  # noqa: A001
    if not isinstance(x, Dual):
        return np.sum(x, axis=axis)
    if axis is None:
        axis = tuple(range(x.ndim))
    axes = axis if isinstance(axis, tuple) else (axis,)
    taxes = tuple(_tan_axis(a) for a in axes)
    return Dual(x.val.sum(axis=axes), x.tan.sum(axis=taxes))


def reshape(x, shape):
    if not isinstance(x, Dual):
        return np.reshape(x, shape)
    v = x.val.reshape(shape)
    return Dual(v, x.tan.reshape(v.shape + (x.nseeds,)))


def swapaxes(x, a1: int, a2: int):
    if not isinstance(x, Dual):
        return np.swapaxes(x, a1, a2)
    return Dual(np.swapaxes(x.val, a1, a2), np.swapaxes(x.tan, _tan_axis(a1), _tan_axis(a2)))


def matmul(a, b):
    n = _nseeds([a, b])
    if n is None:
        return np.matmul(a, b)
    va, vb = value(a), value(b)
    v = va @ vb
    t = 0.0
    if isinstance(a, Dual):
        t = t + np.einsum("...ijn,...jk->...ikn", a.tan, vb)
    if isinstance(b, Dual):
        t = t + np.einsum("...ij,...jkn->...ikn", va, b.tan)
    return Dual(v, _full(t, v.shape, n))


def take_along_axis(x, idx, axis: int):
    if not isinstance(x, Dual):
        return np.take_along_axis(x, idx, axis=axis)
    return Dual(
        np.take_along_axis(x.val, idx, axis=axis),
        np.take_along_axis(x.tan, idx[..., None], axis=_tan_axis(axis)),
    )


def cross(a, b):
    """Cross product along the last axis."""
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def dot(a, b):
    """Inner product along the last axis."""
    return sum(a * b, axis=-1)
