"""A small dense network with hand-written backpropagation, SGD and Adam.

Layers compute ``act(x @ W + b)`` on row-vector batches.  Parameters are
64-bit floats throughout so that finite-difference checks stay meaningful.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import mappings as mp
from .errors import NonFiniteParameters, ShapeMismatch

ACTIVATIONS = ("tanh", "relu", "identity")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0.0).astype(float)
    return np.ones_like(z)


@dataclass
class DenseNet:
    sizes: list[int]
    activations: list[str]
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        n = len(self.sizes) - 1
        if n < 1 or len(self.activations) != n or len(self.weights) != n or len(self.biases) != n:
            raise ShapeMismatch("sizes, activations and parameters do not describe the same layers")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[i], self.sizes[i + 1]) or b.shape != (self.sizes[i + 1],):
                raise ShapeMismatch(f"layer {i} parameters have wrong shapes")

    @classmethod
    def create(cls, sizes, rng: np.random.Generator, hidden: str = "tanh", output: str = "identity"):
        """Glorot-uniform weights, zero biases."""
        sizes = [int(s) for s in sizes]
        if any(s <= 0 for s in sizes):
            raise ValueError("layer sizes must be positive")
        weights, biases = [], []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fi + fo))
            weights.append(rng.uniform(-lim, lim, size=(fi, fo)))
            biases.append(np.zeros(fo))
        acts = [hidden] * (len(sizes) - 2) + [output]
        return cls(sizes, acts, weights, biases)

    def params(self) -> list[np.ndarray]:
        """Parameters in the fixed order ``W0, b0, W1, b1, ...`` (views, not copies)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "DenseNet":
        return DenseNet(list(self.sizes), list(self.activations),
                        [W.copy() for W in self.weights], [b.copy() for b in self.biases])


def forward(net: DenseNet, x):
    """Output of the network and the cache needed by :func:`backward`."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.sizes[0]:
        raise ShapeMismatch(f"network expects {net.sizes[0]} inputs, got shape {x.shape}")
    cache = [(x, None)]
    a = x
    for W, b, act in zip(net.weights, net.biases, net.activations):
        z = a @ W + b
        a = _act(act, z)
        cache.append((a, z))
    return a, cache


def backward(net: DenseNet, cache, grad_out):
    """Parameter gradients (same order as :meth:`DenseNet.params`) and input gradient."""
    g = np.asarray(grad_out, dtype=float)
    if g.shape != cache[-1][0].shape:
        raise ShapeMismatch(f"output gradient shape {g.shape} != output shape {cache[-1][0].shape}")
    grads = []
    for i in reversed(range(len(net.weights))):
        a, z = cache[i + 1]
        gz = g * _act_grad(net.activations[i], z, a)
        a_in = cache[i][0]
        grads.append(gz.reshape(-1, gz.shape[-1]).sum(axis=0))
        grads.append(a_in.reshape(-1, a_in.shape[-1]).T @ gz.reshape(-1, gz.shape[-1]))
        g = gz @ net.weights[i].T
    grads.reverse()
    return grads, g


@dataclass
class OptimState:
    """SGD or Adam state.  Moment buffers mirror the parameter list."""

    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")


def apply_update(net: DenseNet, opt: OptimState, grads) -> None:
    params = net.params()
    if len(grads) != len(params):
        raise ShapeMismatch("gradient list does not match parameters")
    opt.step += 1
    if opt.kind == "adam" and not opt.m:
        opt.m = [np.zeros_like(p) for p in params]
        opt.v = [np.zeros_like(p) for p in params]
    for i, (p, g) in enumerate(zip(params, grads)):
        if opt.kind == "sgd":
            p -= opt.lr * g
            continue
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
        mhat = opt.m[i] / (1.0 - opt.beta1**opt.step)
        vhat = opt.v[i] / (1.0 - opt.beta2**opt.step)
        p -= opt.lr * mhat / (np.sqrt(vhat) + opt.eps)
    if not all(np.all(np.isfinite(p)) for p in params):
        raise NonFiniteParameters(f"non-finite parameters after step {opt.step}")


# ------------------------------------------------------- mapping chain


def mapping_outputs(mapping, raw, quaternion: bool = False):
    """Rotations (or quaternions) and Jacobians for raw net outputs.

    ``raw`` has shape ``(B, k * n)`` for ``k`` rotations per sample.  Returns
    ``(out, J, ok)`` where ``out`` is ``(B, k, 3, 3)`` (``(B, k, 4)`` for
    quaternions), ``J`` is ``(B, k, 9 or 4, n)`` and ``ok`` flags samples whose
    every rotation is admissible.  Rows that fail carry identity placeholders.
    """
    kind = mp.parse_mapping(mapping)
    n = kind.input_dim
    B = raw.shape[0]
    x = raw.reshape(B, -1, n)
    if not quaternion:
        R, J, ok = mp.jacobian_where_defined(kind, x)
        return R, J, np.all(ok, axis=-1)
    ok = ~np.any(mp.degenerate_mask(kind, x, derivative=True), axis=-1)
    q = np.zeros(x.shape[:2] + (4,))
    q[..., 3] = 1.0
    J = np.zeros(x.shape[:2] + (4, n))
    if np.any(ok):
        q[ok], J[ok] = mp.quaternion_jacobian(kind, x[ok])
    return q, J, ok


def train_step(net: DenseNet, opt: OptimState, inputs, mapping, loss, targets):
    """One optimiser step on a batch; returns ``(mean loss, skipped count)``.

    ``mapping`` is a mapping kind, or ``None`` to train on raw 3x3 outputs.
    ``loss`` is a :class:`~rotreg.losses.LossSpec` or a callable
    ``loss(R, targets) -> (per-sample values, dL/dR)`` with ``R`` of shape
    ``(B, k, 3, 3)``.  Samples on which the mapping is degenerate contribute
    nothing and are counted as skipped; the mean is over kept samples.
    """
    inputs = np.asarray(inputs, dtype=float)
    out, cache = forward(net, inputs)
    B = out.shape[0]
    quat = isinstance(loss, L.LossSpec) and loss.on_quaternions
    if mapping is None:
        if quat:
            raise ValueError("the quaternion loss needs a quaternion-producing mapping")
        pred, J, ok = out.reshape(B, -1, 3, 3), None, np.ones(B, dtype=bool)
    else:
        pred, J, ok = mapping_outputs(mapping, out, quaternion=quat)
    kept = int(np.sum(ok))
    if kept == 0:
        return float("nan"), B
    if isinstance(loss, L.LossSpec):
        tgt = np.asarray(targets, dtype=float).reshape(pred.shape)
        vals, g = loss(pred, tgt)
        vals = vals.sum(axis=-1)
    else:
        vals, g = loss(pred, targets)
    g = np.where(ok.reshape((B,) + (1,) * (g.ndim - 1)), g, 0.0) / kept
    if J is None:
        grad_out = g.reshape(B, -1)
    else:
        grad_out = np.einsum("bko,bkon->bkn", g.reshape(J.shape[:3]), J).reshape(B, -1)
    grads, _ = backward(net, cache, grad_out)
    apply_update(net, opt, grads)
    return float(np.sum(np.where(ok, vals, 0.0)) / kept), B - kept


# ------------------------------------------------------------ checkpoint

_MAGIC = b"TNET"
_VERSION = 1


def save_checkpoint(net: DenseNet, path) -> None:
    """Write parameters to ``path`` and layer sizes to ``path + '.layers.txt'``.

    Layout, all little-endian: 4-byte magic ``TNET``, uint32 version,
    uint32 array count, then for each array a uint32 ndim and ndim uint32
    dimensions; after the header every array's float64 data in C order, in
    :meth:`DenseNet.params` order.
    """
    path = Path(path)
    params = net.params()
    header = _MAGIC + struct.pack("<II", _VERSION, len(params))
    for p in params:
        header += struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape)
    with open(path, "wb") as f:
        f.write(header)
        for p in params:
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    sidecar = " ".join(map(str, net.sizes)) + "\n" + " ".join(net.activations) + "\n"
    Path(str(path) + ".layers.txt").write_text(sidecar, encoding="utf-8")


def load_checkpoint(path) -> DenseNet:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path} is not a network checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    shapes = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", data, off)
        shapes.append(struct.unpack_from(f"<{ndim}I", data, off + 4))
        off += 4 + 4 * ndim
    arrays = []
    for shape in shapes:
        size = int(np.prod(shape))
        arrays.append(np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(float))
        off += 8 * size
    lines = Path(str(path) + ".layers.txt").read_text(encoding="utf-8").splitlines()
    sizes = [int(s) for s in lines[0].split()]
    acts = lines[1].split()
    return DenseNet(sizes, acts, arrays[0::2], arrays[1::2])
