"""Desk-scale experiments: linearity deviation, point-cloud alignment and a
synthetic inverse-kinematics auto-encoder.  Each returns an
:class:`ExperimentReport` that serialises to CSV.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import losses as L
from . import mappings as mp
from . import so3
from . import tinynet as tn
from .errors import NonFiniteParameters

CSV_HEADER = ("experiment", "mapping", "seed", "key", "metric", "value")
TRAINED_KINDS = ("procrustes", "sixd", "quaternion", "rotvec")
MATRIX = "matrix"


def fmt_float(x: float) -> str:
    return "%.17g" % float(x)


@dataclass
class ExperimentReport:
    """Append-only rows ``(experiment, mapping, seed, key, metric, value)``."""

    rows: list[tuple] = field(default_factory=list)

    def add(self, experiment, mapping, seed, key, metric, value) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise ValueError(f"non-finite metric {metric} = {value}")
        self.rows.append((str(experiment), str(mapping), int(seed), str(key), str(metric), value))

    def extend(self, other: "ExperimentReport") -> "ExperimentReport":
        self.rows.extend(other.rows)
        return self

    @classmethod
    def merge(cls, reports) -> "ExperimentReport":
        out = cls()
        for r in reports:
            out.extend(r)
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for e, m, s, k, name, v in self.rows:
            w.writerow((e, m, s, k, name, fmt_float(v)))
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "ExperimentReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        out = cls()
        for e, m, s, k, name, v in reader:
            out.rows.append((e, m, int(s), k, name, float(v)))
        return out

    def select(self, experiment=None, mapping=None, metric=None, key=None):
        return [r for r in self.rows
                if (experiment is None or r[0] == experiment)
                and (mapping is None or r[1] == mapping)
                and (metric is None or r[4] == metric)
                and (key is None or r[3] == key)]

    def final(self, mapping: str, metric: str, experiment=None) -> dict[int, float]:
        """Last recorded value of ``metric`` per seed."""
        out = {}
        for e, m, s, k, name, v in self.rows:
            if m == mapping and name == metric and (experiment is None or e == experiment):
                out[s] = v
        return out


def nearest_rank(values, pct: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("percentile of an empty sample")
    rank = max(1, math.ceil(pct / 100.0 * v.size))
    return float(v[rank - 1])


def lr_at(lr: float, lr_final: float | None, step: int, total: int) -> float:
    """Geometric decay from ``lr`` to ``lr_final`` (default ``lr / 100``) over ``total`` steps."""
    final = lr / 100.0 if lr_final is None else lr_final
    if lr <= 0.0 or total <= 1:
        return lr
    return lr * (final / lr) ** ((step - 1) / (total - 1))


def _rngs(seed: int, k: int):
    return [so3.make_rng([int(seed), i]) for i in range(k)]


# ---------------------------------------------------------------- linearity


@dataclass
class LinearityConfig:
    mappings: tuple = ("rotvec", "quaternion", "sixd", "procrustes", "rotvec-restricted")
    samples: int = 10_000
    eps: tuple = tuple(np.logspace(-3, 0, 13))
    seed: int = 0

    def __post_init__(self):
        self.eps = tuple(float(e) for e in self.eps)
        if any(not e > 0 for e in self.eps):
            raise ValueError("step sizes must be positive")
        if self.samples < 100:
            raise ValueError("at least 100 samples are required")


def _admissible_draws(kind, n, rng):
    x = rng.standard_normal((n, kind.input_dim))
    resampled = 0
    while True:
        bad = mp.degenerate_mask(kind, x, derivative=True)
        if not np.any(bad):
            return x, resampled
        resampled += int(bad.sum())
        x[bad] = rng.standard_normal((int(bad.sum()), kind.input_dim))


def run_linearity(cfg: LinearityConfig) -> ExperimentReport:
    """Deviation ``|L(x - e g) - (L(x) - e |g|^2)|`` for ``L(x) = v1^T R(x) v2``."""
    rep = ExperimentReport()
    for name in cfg.mappings:
        kind = mp.parse_mapping(name)
        rng = so3.make_rng([cfg.seed, 7])
        x, resampled = _admissible_draws(kind, cfg.samples, rng)
        v1 = so3.random_unit_vectors(rng, cfg.samples)
        v2 = so3.random_unit_vectors(rng, cfg.samples)
        R, J = mp.jacobian(kind, x)
        W = v1[:, :, None] * v2[:, None, :]
        Lx = np.sum(W * R, axis=(-1, -2))
        grad = np.einsum("bo,bon->bn", W.reshape(-1, 9), J)
        g2 = np.sum(grad * grad, axis=-1)
        skipped = 0
        for e in cfg.eps:
            xs = x - e * grad
            ok = ~mp.degenerate_mask(kind, xs)
            skipped += int(np.sum(~ok))
            Rs = mp.apply(kind, xs[ok])
            dev = np.abs(np.sum(W[ok] * Rs, axis=(-1, -2)) - (Lx[ok] - e * g2[ok]))
            key = fmt_float(e)
            rep.add("linearity", kind, cfg.seed, key, "median", nearest_rank(dev, 50))
            rep.add("linearity", kind, cfg.seed, key, "p25", nearest_rank(dev, 25))
            rep.add("linearity", kind, cfg.seed, key, "p75", nearest_rank(dev, 75))
        rep.add("linearity", kind, cfg.seed, "all", "resampled", resampled + skipped)
    return rep


# ---------------------------------------------------------------- alignment


@dataclass
class AlignConfig:
    mapping: str = "procrustes"
    loss: str = "frobenius"
    points: int = 64
    hidden: tuple = (128,)
    iterations: int = 5000
    batch: int = 32
    lr: float = 1e-3
    lr_final: float | None = None
    eval_every: int = 500
    test_size: int = 512
    seed: int = 0
    target_max_angle: float | None = None
    target_shift_x: bool = False

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        for name in ("points", "iterations", "batch", "eval_every", "test_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if any(h <= 0 for h in self.hidden) or self.lr < 0:
            raise ValueError("hidden sizes must be positive and lr non-negative")


def _uniform_below(rng, size, max_angle):
    """Rotations with uniform axis and angle density ``(1 - cos t)`` restricted below ``max_angle``."""
    out = np.empty((0, 3, 3))
    while len(out) < size:
        R = so3.random_rotation(rng, 4 * size)
        out = np.concatenate([out, R[so3.rotation_angle(R) < max_angle]])
    return out[:size]


def _targets(cfg: AlignConfig, rng, size):
    if cfg.target_max_angle is None:
        R = so3.random_rotation(rng, size)
    else:
        R = _uniform_below(rng, size, cfg.target_max_angle)
    if cfg.target_shift_x:
        # a half turn F applied to the prediction before the loss is the same
        # as regressing F^T R*
        R = so3.axis_rotation(0, math.pi).T @ R
    return R


def _decode(mapping: str, raw):
    """Rotations from raw outputs at evaluation time; inadmissible rows become I."""
    if mapping.startswith(MATRIX + "/"):
        how = mapping.split("/", 1)[1]
        M = raw.reshape(-1, 3, 3)
        if how == "procrustes":
            kind, x = mp.PROCRUSTES, raw
        else:
            kind, x = mp.SIXD, np.concatenate([M[:, :, 0], M[:, :, 1]], axis=-1)
    else:
        kind, x = mp.parse_mapping(mapping), raw
    ok = ~mp.degenerate_mask(kind, x)
    R = np.broadcast_to(np.eye(3), (len(raw), 3, 3)).copy()
    R[ok] = mp.apply(kind, x[ok])
    return R


def _align_inputs(cloud, R):
    moved = np.einsum("bij,nj->bni", R, cloud)
    base = np.broadcast_to(cloud, moved.shape)
    return np.concatenate([base.reshape(len(R), -1), moved.reshape(len(R), -1)], axis=-1)


def run_alignment(cfg: AlignConfig) -> ExperimentReport:
    """Regress the rotation between a fixed cloud and its rotated copy.

    ``mapping = "matrix"`` trains on the raw 9 outputs and reports the
    same network decoded by Procrustes and by Gram-Schmidt.
    """
    r_cloud, r_net, r_test, r_train = _rngs(cfg.seed, 4)
    cloud = r_cloud.standard_normal((cfg.points, 3))
    cloud -= cloud.mean(axis=0)
    test_R = _targets(cfg, r_test, cfg.test_size)
    test_in = _align_inputs(cloud, test_R)

    if cfg.mapping == MATRIX:
        kind, out_dim, labels = None, 9, [MATRIX + "/procrustes", MATRIX + "/gram-schmidt"]
    else:
        kind = mp.parse_mapping(cfg.mapping)
        out_dim, labels = kind.input_dim, [str(kind)]
    if cfg.loss == "quaternion":
        loss = L.LossSpec("quaternion")
    else:
        loss = L.LossSpec("frobenius")
    net = tn.DenseNet.create([6 * cfg.points, *cfg.hidden, out_dim], r_net)
    opt = tn.OptimState("adam", cfg.lr)
    rep = ExperimentReport()
    exp = "probe" if (cfg.target_max_angle is not None or cfg.target_shift_x) else "align"

    def evaluate(step):
        raw = tn.forward(net, test_in)[0]
        for lab in labels:
            err = np.degrees(so3.geodesic_angle(_decode(lab, raw), test_R))
            rep.add(exp, lab, cfg.seed, step, "test_error_deg", float(np.mean(err)))

    evaluate(0)
    skipped = 0
    last = 0.0
    try:
        for step in range(1, cfg.iterations + 1):
            opt.lr = lr_at(cfg.lr, cfg.lr_final, step, cfg.iterations)
            R = _targets(cfg, r_train, cfg.batch)
            tgt = so3.matrix_to_quat(R) if loss.on_quaternions else R
            last, sk = tn.train_step(net, opt, _align_inputs(cloud, R), kind, loss, tgt)
            skipped += sk
            if step % cfg.eval_every == 0 or step == cfg.iterations:
                evaluate(step)
    except NonFiniteParameters:
        for lab in labels:
            rep.add(exp, lab, cfg.seed, "abort", "aborted_at_step", opt.step)
    for lab in labels:
        rep.add(exp, lab, cfg.seed, "final", "train_loss", last if math.isfinite(last) else -1.0)
        rep.add(exp, lab, cfg.seed, "final", "skipped", skipped)
    return rep


# ----------------------------------------------------------------------- IK

CMU_HIPS_BONUS = 10.0 / 9.0


@dataclass
class IKConfig:
    mapping: str = "procrustes"
    joints: int = 3
    bone_lengths: tuple = (1.0, 0.8, 0.6)
    weights: tuple | None = None
    preset: str = "uniform"
    flagged: tuple = (0,)
    hidden: tuple = (128,)
    iterations: int = 3000
    batch: int = 32
    lr: float = 1e-3
    lr_final: float | None = None
    eval_every: int = 500
    test_size: int = 512
    frames: int = 4096
    walk_step: float = 0.3
    joint_limit: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.bone_lengths = tuple(float(b) for b in self.bone_lengths)
        if self.joints <= 0 or len(self.bone_lengths) != self.joints:
            raise ValueError("need one bone length per joint")
        if self.preset not in ("uniform", "cmu-hips"):
            raise ValueError(f"unknown weight preset {self.preset!r}")
        w = self.joint_weights()
        if not (np.all(np.isfinite(w)) and np.all(w >= 0) and w.sum() > 0):
            raise ValueError("joint weights must be finite, non-negative and not all zero")

    def joint_weights(self) -> np.ndarray:
        n = self.joints
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (n,):
                raise ValueError("need one weight per joint")
            return w
        w = np.full(n, 1.0 / (3 * n))
        if self.preset == "cmu-hips":
            w[list(self.flagged)] += CMU_HIPS_BONUS
        return w


def bone_vectors(cfg: IKConfig) -> np.ndarray:
    """Fixed offsets: bone ``i`` points along axis ``i mod 3``."""
    b = np.zeros((cfg.joints, 3))
    for i, length in enumerate(cfg.bone_lengths):
        b[i, i % 3] = length
    return b


def marker_offsets(cfg: IKConfig) -> np.ndarray:
    """Per-joint offsets ``(n, 2, 3)``: the bone, then a lateral marker of half its
    length along the next axis, so each joint frame is observable."""
    b = bone_vectors(cfg)
    c = np.zeros_like(b)
    for i, length in enumerate(cfg.bone_lengths):
        c[i, (i + 1) % 3] = 0.5 * length
    return np.stack([b, c], axis=1)


def forward_kinematics(R, offsets):
    """Keypoints of a chain with joint rotations ``R`` of shape ``(..., n, 3, 3)``.

    ``offsets[i, j]`` is keypoint ``j`` of joint ``i`` in the joint frame and
    ``offsets[i, 0]`` is the bone, whose tip is the next joint's origin:
    ``p_ij = x_{i-1} + C_i offsets[i, j]``, ``x_i = p_i0``, ``C_i = R_1 ... R_i``.
    A ``(n, 3)`` array of bones is accepted as one keypoint per joint.
    Returns keypoints ``(..., n, m, 3)`` and cumulative rotations ``(..., n, 3, 3)``.
    """
    offsets = np.asarray(offsets, dtype=float)
    if offsets.ndim == 2:
        offsets = offsets[:, None, :]
    n = offsets.shape[0]
    C, pts = [], []
    Ck = np.broadcast_to(np.eye(3), R.shape[:-3] + (3, 3))
    origin = np.zeros(R.shape[:-3] + (3,))
    for k in range(n):
        Ck = Ck @ R[..., k, :, :]
        p = origin[..., None, :] + np.einsum("...ij,mj->...mi", Ck, offsets[k])
        origin = p[..., 0, :]
        C.append(Ck)
        pts.append(p)
    return np.stack(pts, axis=-3), np.stack(C, axis=-3)


def ik_loss(R, target, offsets, alpha):
    """``sum_i alpha_i sum_j |p_ij - p*_ij|^2`` per sample and its gradient w.r.t. each ``R_k``."""
    offsets = np.asarray(offsets, dtype=float)
    if offsets.ndim == 2:
        offsets = offsets[:, None, :]
    p, C = forward_kinematics(R, offsets)
    diff = p - target.reshape(p.shape)
    value = np.einsum("i,bijd,bijd->b", alpha, diff, diff)
    g = 2.0 * alpha[None, :, None, None] * diff
    per_joint = g.sum(axis=2)
    later = np.cumsum(per_joint[:, ::-1], axis=1)[:, ::-1] - per_joint
    n = offsets.shape[0]
    dR = np.empty_like(R)
    Gbar = None
    for k in reversed(range(n)):
        Gk = np.einsum("bjd,je->bde", g[:, k], offsets[k])
        Gk = Gk + later[:, k, :, None] * offsets[k, 0][None, None, :]
        Gbar = Gk if Gbar is None else Gk + Gbar @ np.swapaxes(R[:, k + 1], -1, -2)
        Cprev = C[:, k - 1] if k > 0 else np.eye(3)
        dR[:, k] = np.swapaxes(Cprev, -1, -2) @ Gbar
    return value, dR


def _walks(rng, frames, joints, step, limit, chunk=64):
    """Smooth random joint trajectories.

    The root follows ``R <- R exp(step * xi)`` from a uniform start, so it
    covers all of SO(3).  Child joints walk a rotation vector inside the ball
    of radius ``limit``, mimicking bounded joint ranges.  Trajectories restart
    every ``chunk`` frames.
    """
    out = np.empty((frames, joints, 3, 3))
    for t in range(frames):
        if t % chunk == 0:
            root = so3.random_rotation(rng)
            v = limit * so3.random_unit_vectors(rng, joints - 1) * rng.uniform(size=(joints - 1, 1)) ** (1 / 3)
        root = root @ so3.exp_map(step * rng.standard_normal(3))
        v = v + step * rng.standard_normal(v.shape)
        norm = np.linalg.norm(v, axis=-1, keepdims=True)
        v = np.where(norm > limit, v * (limit / np.maximum(norm, 1e-300)), v)
        out[t, 0] = root
        out[t, 1:] = so3.exp_map(v)
    return out


def run_ik(cfg: IKConfig) -> ExperimentReport:
    """Auto-encode chain keypoints through joint rotations and forward kinematics."""
    r_data, r_net, r_test, r_train = _rngs(cfg.seed, 4)
    offsets = marker_offsets(cfg)
    alpha = cfg.joint_weights()
    train_X = forward_kinematics(_walks(r_data, cfg.frames, cfg.joints, cfg.walk_step, cfg.joint_limit), offsets)[0]
    test_X = forward_kinematics(_walks(r_test, cfg.test_size, cfg.joints, cfg.walk_step, cfg.joint_limit), offsets)[0]
    kind = mp.parse_mapping(cfg.mapping)
    n = cfg.joints
    net = tn.DenseNet.create([train_X[0].size, *cfg.hidden, n * kind.input_dim], r_net)
    opt = tn.OptimState("adam", cfg.lr)
    rep = ExperimentReport()
    label = str(kind)

    def evaluate(step, final=False):
        raw = tn.forward(net, test_X.reshape(len(test_X), -1))[0]
        R = _decode(label, raw.reshape(-1, kind.input_dim)).reshape(len(test_X), n, 3, 3)
        err = np.linalg.norm(forward_kinematics(R, offsets)[0] - test_X, axis=-1).mean(axis=-1)
        rep.add("ik", label, cfg.seed, step, "mean_joint_error", float(err.mean()))
        if final:
            for j in range(n):
                rep.add("ik", label, cfg.seed, "final", f"joint{j}_error", float(err[:, j].mean()))

    def loss(R, target):
        return ik_loss(R, target, offsets, alpha)

    evaluate(0)
    skipped = 0
    try:
        for step in range(1, cfg.iterations + 1):
            opt.lr = lr_at(cfg.lr, cfg.lr_final, step, cfg.iterations)
            idx = r_train.integers(0, len(train_X), size=cfg.batch)
            X = train_X[idx]
            _, sk = tn.train_step(net, opt, X.reshape(cfg.batch, -1), kind, loss, X)
            skipped += sk
            if step % cfg.eval_every == 0 and step != cfg.iterations:
                evaluate(step)
    except NonFiniteParameters:
        rep.add("ik", label, cfg.seed, "abort", "aborted_at_step", opt.step)
    evaluate(opt.step, final=True)
    rep.add("ik", label, cfg.seed, "final", "skipped", skipped)
    return rep


# ----------------------------------------------------------- restricted probe


def run_restricted_rotvec_probe(max_angle: float = math.pi / 2, cfg: AlignConfig | None = None):
    """Small-angle regression with the restricted rotation vector.

    Targets stay below ``0.9 * max_angle``.  Runs the restricted mapping and
    Procrustes on them, then plain rotation vectors with the quaternion loss
    on the same targets, unshifted and composed with a half turn about x.
    """
    cfg = cfg or AlignConfig()
    small = replace(cfg, target_max_angle=0.9 * max_angle, target_shift_x=False)
    rep = ExperimentReport()
    runs = [
        ("restricted", replace(small, mapping=str(mp.rotvec_restricted(max_angle)), loss="frobenius")),
        ("restricted", replace(small, mapping="procrustes", loss="frobenius")),
        ("unshifted", replace(small, mapping="rotvec", loss="quaternion")),
        ("shifted", replace(small, mapping="rotvec", loss="quaternion", target_shift_x=True)),
    ]
    for task, c in runs:
        for row in run_alignment(c).rows:
            rep.rows.append((f"probe-{task}",) + row[1:])
    return rep


def config_fields(cls) -> dict[str, type]:
    return {f.name: f.type for f in fields(cls)}
