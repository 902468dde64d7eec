"""Executable property suites: gradients, rank, surjectivity, pre-image
convexity, loss identities and the Gram-Schmidt limit of weighted Procrustes.

Every suite returns a list of :class:`CheckResult`; :data:`SUITES` maps the
CLI subcommand names to suite functions and :func:`list_checks` enumerates
every check with the module it exercises.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import mappings as mp
from . import so3
from . import tinynet as tn
from .errors import DegenerateInput, OutOfRange
from .linalg import numeric_rank

GRAD_TOL = 1e-5
E2E_TOL = 1e-4
ROUNDTRIP_TOL = 1e-8
RANK_SIGMA_MIN = 1e-6
CONVEX_TOL = 1e-8
IDENTITY_TOL = 1e-9
FULL_RANK_KINDS = ("quaternion", "sixd", "procrustes", "symmatrix", "rotvec-restricted")
CONVEX_KINDS = ("procrustes", "sixd", "symmatrix")

# rows: surjective, differentiable, full rank, connected pre-image
PROPERTY_TABLE = {
    "euler": (True, True, False, False),
    "rotvec": (True, True, False, False),
    "quaternion": (True, True, True, False),
    "sixd": (True, True, True, True),
    "procrustes": (True, True, True, True),
    "symmatrix": (True, True, True, True),
}
PROPERTY_COLUMNS = ("surjective", "differentiable", "full_rank", "connected_preimage")


@dataclass(frozen=True)
class CheckResult:
    name: str
    anchor: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        text = f"{tag} {self.name} value={self.value:.3e} threshold={self.threshold:.1e}"
        return text + (f" ({self.detail})" if self.detail else "")


def _kinds(mappings):
    if mappings is None:
        return list(mp.ALL_KINDS)
    return [mp.parse_mapping(m) for m in mappings]


def _admissible(kind, rng, n):
    """``n`` standard normal inputs with degenerate draws replaced."""
    x = rng.standard_normal((n, kind.input_dim))
    bad = mp.degenerate_mask(kind, x, derivative=True)
    while np.any(bad):
        x[bad] = rng.standard_normal((int(bad.sum()), kind.input_dim))
        bad = mp.degenerate_mask(kind, x, derivative=True)
    return x


def scaled_error(a, b, axes):
    """``max |a - b| / (1 + max |a|)`` over ``axes``, one value per leading index."""
    num = np.max(np.abs(a - b), axis=axes)
    return num / (1.0 + np.max(np.abs(a), axis=axes))


# -------------------------------------------------------------- gradients


def mapping_gradient_error(kind, x, h: float = 1e-5) -> np.ndarray:
    J = mp.jacobian(kind, x).jacobian
    return scaled_error(J, mp.finite_difference_jacobian(kind, x, h), (-1, -2))


def _fd_grad(f, x, h):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        g[idx] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _loss_cases(rng):
    pts = L.PointSet.from_points(rng.standard_normal((50, 3)))
    return {
        "frobenius": (lambda R, T: L.frobenius_loss(R, T), lambda: so3.random_rotation(rng)),
        "quaternion": (lambda q, T: L.quaternion_min_loss(q, T), lambda: so3.random_unit_vectors(rng, 1, 4)[0]),
        "points": (lambda R, T: L.weighted_points_loss(R, T, pts), lambda: so3.random_rotation(rng)),
    }


def _end_to_end_error(kind, rng, probes, h=1e-6):
    """Directional derivatives of a tiny net + mapping + Frobenius loss.

    Returns the worst ``|analytic - fd| / |grad|`` over random unit directions.
    """
    batch = 4
    while True:
        net = tn.DenseNet.create([9, 16, kind.input_dim], rng)
        a = rng.standard_normal((batch, 9))
        if not np.any(mp.degenerate_mask(kind, tn.forward(net, a)[0], derivative=True)):
            break
    target = so3.random_rotation(rng, batch)

    def loss(n):
        R = mp.apply(kind, tn.forward(n, a)[0])
        return float(np.sum(L.frobenius_loss(R, target)[0]))

    out, cache = tn.forward(net, a)
    R, J = mp.jacobian(kind, out)
    _, gR = L.frobenius_loss(R, target)
    grads, _ = tn.backward(net, cache, np.einsum("bo,bon->bn", gR.reshape(batch, 9), J))
    gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    worst = 0.0
    for _ in range(probes):
        dirs = [rng.standard_normal(p.shape) for p in net.params()]
        scale = math.sqrt(sum(float(np.sum(d * d)) for d in dirs))
        dirs = [d / scale for d in dirs]
        analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
        plus, minus = net.copy(), net.copy()
        for p, q, d in zip(plus.params(), minus.params(), dirs):
            p += h * d
            q -= h * d
        fd = (loss(plus) - loss(minus)) / (2 * h)
        worst = max(worst, abs(analytic - fd) / max(gnorm, 1e-12))
    return worst


def gradcheck(seed: int = 0, samples: int = 500, mappings=None, probes: int = 200,
              include_extras: bool = True) -> list[CheckResult]:
    """Analytic against central-difference derivatives.

    Mapping Jacobians use ``h = 1e-5`` and the scaled error
    ``max|J - J_fd| / (1 + max|J|)``; losses use ``h = 1e-6``; the end-to-end
    net composition compares ``probes`` random directional derivatives.
    """
    rng = so3.make_rng([seed, 101])
    out = []
    for kind in _kinds(mappings):
        x = _admissible(kind, rng, samples)
        err = float(np.max(mapping_gradient_error(kind, x)))
        out.append(CheckResult(f"gradcheck/mapping/{kind}", "mappings.jacobian", err <= GRAD_TOL,
                               err, GRAD_TOL, f"{samples} samples"))
    if include_extras:
        n = max(200, min(samples, 500))
        x = rng.standard_normal((n, 5))
        fd = np.stack([(mp.softmax_map(x + h) - mp.softmax_map(x - h)) / 2e-5
                       for h in np.eye(5) * 1e-5], axis=-1)
        err = float(np.max(scaled_error(mp.softmax_jacobian(x), fd, (-1, -2))))
        out.append(CheckResult("gradcheck/softmax", "mappings.softmax_jacobian", err <= GRAD_TOL,
                               err, GRAD_TOL, f"{n} samples"))
        for name, (fn, draw) in _loss_cases(rng).items():
            worst = 0.0
            for _ in range(200):
                a, t = draw(), draw()
                g = fn(a, t)[1]
                fdg = _fd_grad(lambda z: float(fn(z, t)[0]), a, 1e-6)
                worst = max(worst, float(scaled_error(g, fdg, None)))
            out.append(CheckResult(f"gradcheck/loss/{name}", f"losses.{name}", worst <= GRAD_TOL,
                                   worst, GRAD_TOL, "200 samples"))
    for kind in _kinds(mappings):
        err = _end_to_end_error(kind, rng, probes)
        out.append(CheckResult(f"gradcheck/end-to-end/{kind}", "tinynet.train_step", err <= E2E_TOL,
                               err, E2E_TOL, f"{probes} directional probes"))
    return out


# ------------------------------------------------------------------- rank


def _rotvec_at_2pi(rng, n):
    return 2 * math.pi * so3.random_unit_vectors(rng, n)


def _euler_at_lock(rng, n):
    x = rng.uniform(-math.pi, math.pi, size=(n, 3))
    x[:, 1] = np.where(rng.uniform(size=n) < 0.5, math.pi / 2, -math.pi / 2)
    return x


def rankcheck(seed: int = 0, samples: int = 1000) -> list[CheckResult]:
    rng = so3.make_rng([seed, 102])
    out = []
    for name in FULL_RANK_KINDS:
        kind = mp.parse_mapping(name)
        x = _admissible(kind, rng, samples)
        rank, sigma = numeric_rank(mp.jacobian(kind, x).jacobian, RANK_SIGMA_MIN)
        smin = float(sigma.min())
        ok = bool(np.all(rank == 3)) and smin > RANK_SIGMA_MIN
        out.append(CheckResult(f"rankcheck/full-rank/{kind}", "mappings.jacobian", ok, smin,
                               RANK_SIGMA_MIN, f"min sigma_3 over {samples} inputs"))
    for label, kind, x in (("rotvec-at-2pi", mp.ROTVEC, _rotvec_at_2pi(rng, 100)),
                           ("euler-gimbal-lock", mp.EULER, _euler_at_lock(rng, 100))):
        rank, sigma = numeric_rank(mp.jacobian(kind, x).jacobian, RANK_SIGMA_MIN)
        smax = float(sigma.max())
        ok = bool(np.all(rank < 3))
        out.append(CheckResult(f"rankcheck/deficient/{label}", "mappings.jacobian", ok, smax,
                               RANK_SIGMA_MIN, "max sigma_3 over 100 inputs; rank < 3 expected"))
    return out


# ----------------------------------------------------------- surjectivity


def surjectivity(seed: int = 0, samples: int = 1000) -> list[CheckResult]:
    rng = so3.make_rng([seed, 103])
    R = so3.random_rotation(rng, samples)
    out = []
    for kind in mp.ALL_KINDS:
        if kind.name == "rotvec-restricted":
            inside = R[so3.rotation_angle(R) < 0.999 * kind.max_angle]
            err = float(np.max(np.abs(mp.apply(kind, mp.canonical_preimage(kind, inside)) - inside)))
            outside = R[so3.rotation_angle(R) >= kind.max_angle][:1]
            try:
                mp.canonical_preimage(kind, outside)
                raised = False
            except OutOfRange:
                raised = True
            x = 3.0 * rng.standard_normal((samples, 3))
            top = float(np.max(so3.rotation_angle(mp.apply(kind, x))))
            ok = err <= ROUNDTRIP_TOL and raised and top < kind.max_angle
            detail = f"{len(inside)} rotations inside the ball; max output angle {top:.6f}"
        else:
            err = float(np.max(np.abs(mp.apply(kind, mp.canonical_preimage(kind, R)) - R)))
            ok = err <= ROUNDTRIP_TOL
            detail = f"{samples} uniform rotations"
        out.append(CheckResult(f"surjectivity/{kind}", "mappings.canonical_preimage", ok, err,
                               ROUNDTRIP_TOL, detail))
    return out


# -------------------------------------------------------------- convexity


def _segment_error(kind, pair, R):
    ts = np.linspace(0.1, 0.9, 9)
    xs = ts[:, None] * pair.x1 + (1 - ts[:, None]) * pair.x2
    return float(np.max(np.abs(mp.apply(kind, xs) - R)))


def _euler_pair(R):
    a, b, c = mp.canonical_preimage(mp.EULER, R)
    return mp.PreimagePair(np.array([a, b, c]), np.array([a + math.pi, math.pi - b, c + math.pi]))


def convexity(seed: int = 0, rotations: int = 50) -> list[CheckResult]:
    """Segments between pre-images stay in the pre-image for the convex
    mappings and leave it for the others; also checks the property table."""
    rng = so3.make_rng([seed, 104])
    Rs = so3.random_rotation(rng, rotations)
    out = []
    for name in CONVEX_KINDS:
        kind = mp.parse_mapping(name)
        err = max(_segment_error(kind, mp.preimage_pair(kind, R, rng), R) for R in Rs)
        out.append(CheckResult(f"convexity/convex/{kind}", "mappings.preimage_pair", err <= CONVEX_TOL,
                               err, CONVEX_TOL, f"t in 0.1..0.9, {rotations} rotations"))
    raised = 0
    for R in Rs:
        pair = mp.preimage_pair(mp.QUATERNION, R, rng, antipodal=True)
        try:
            mp.apply(mp.QUATERNION, 0.5 * (pair.x1 + pair.x2))
        except DegenerateInput:
            raised += 1
    out.append(CheckResult("convexity/quaternion-antipodal-midpoint", "mappings.preimage_pair",
                           raised == rotations, float(raised), float(rotations),
                           "midpoint of q and -q is degenerate"))
    pos_err = max(_segment_error(mp.QUATERNION, mp.preimage_pair(mp.QUATERNION, R, rng), R) for R in Rs)
    out.append(CheckResult("convexity/quaternion-positive-ray", "mappings.preimage_pair",
                           pos_err <= CONVEX_TOL, pos_err, CONVEX_TOL,
                           "segment between q and lambda q stays in the pre-image"))
    for label, kind, make in (("rotvec", mp.ROTVEC, lambda R: mp.preimage_pair(mp.ROTVEC, R, rng)),
                              ("euler", mp.EULER, _euler_pair)):
        gaps = []
        for R in Rs:
            pair = make(R)
            gap = max(float(np.max(np.abs(mp.apply(kind, pair.x1) - R))),
                      float(np.max(np.abs(mp.apply(kind, pair.x2) - R))))
            mid = float(np.max(np.abs(mp.apply(kind, 0.5 * (pair.x1 + pair.x2)) - R)))
            gaps.append((gap, mid))
        pair_err = max(g for g, _ in gaps)
        witnesses = sum(m > 1e-3 for _, m in gaps)
        ok = pair_err <= CONVEX_TOL and witnesses > 0
        out.append(CheckResult(f"convexity/non-convex/{label}", "mappings.preimage_pair", ok,
                               float(witnesses), 1.0,
                               f"midpoints leaving the pre-image; pair error {pair_err:.1e}"))
    out.append(property_table(seed))
    return out


def property_table_observed(seed: int = 0) -> dict[str, tuple]:
    """Property booleans measured numerically, in :data:`PROPERTY_TABLE` layout."""
    rng = so3.make_rng([seed, 105])
    R = so3.random_rotation(rng, 200)
    observed = {}
    for name in PROPERTY_TABLE:
        kind = mp.parse_mapping(name)
        surj = float(np.max(np.abs(mp.apply(kind, mp.canonical_preimage(kind, R)) - R))) <= ROUNDTRIP_TOL
        x = _admissible(kind, rng, 100)
        diff = float(np.max(mapping_gradient_error(kind, x))) <= GRAD_TOL
        if name == "rotvec":
            probe = _rotvec_at_2pi(rng, 20)
        elif name == "euler":
            probe = _euler_at_lock(rng, 20)
        else:
            probe = x
        rank, _ = numeric_rank(mp.jacobian(kind, probe).jacobian, RANK_SIGMA_MIN)
        full = bool(np.all(rank == 3))
        if name == "euler":
            pairs = [_euler_pair(r) for r in R[:20]]
        elif name == "quaternion":
            pairs = [mp.preimage_pair(kind, r, rng, antipodal=True) for r in R[:20]]
        else:
            pairs = [mp.preimage_pair(kind, r, rng) for r in R[:20]]
        connected = True
        for pair, r in zip(pairs, R[:20]):
            try:
                connected &= _segment_error(kind, pair, r) <= CONVEX_TOL
            except DegenerateInput:
                connected = False
        observed[name] = (surj, diff, full, connected)
    return observed


def property_table(seed: int = 0) -> CheckResult:
    observed = property_table_observed(seed)
    mismatches = [f"{k}.{PROPERTY_COLUMNS[i]}" for k in PROPERTY_TABLE for i in range(4)
                  if observed[k][i] != PROPERTY_TABLE[k][i]]
    return CheckResult("convexity/property-table", "mappings", not mismatches, float(len(mismatches)), 0.0,
                       "mismatching cells: " + (", ".join(mismatches) or "none"))


# ------------------------------------------------------------- identities


def identities(seed: int = 0, pairs: int = 10_000) -> list[CheckResult]:
    rng = so3.make_rng([seed, 106])
    R1 = so3.random_rotation(rng, pairs)
    R2 = so3.random_rotation(rng, pairs)
    ang = so3.geodesic_angle(R1, R2)
    fro = L.frobenius_loss(R1, R2)[0]
    e1 = float(np.max(np.abs(fro - 8 * np.sin(ang / 2) ** 2)))
    q1, q2 = so3.matrix_to_quat(R1), so3.matrix_to_quat(R2)
    qv = L.quaternion_min_loss(q1, q2)[0]
    e2 = float(np.max(np.abs(qv - 4 * np.sin(ang / 4) ** 2)))
    out = [
        CheckResult("identities/frobenius-8sin2", "losses.frobenius_loss", e1 <= IDENTITY_TOL, e1,
                    IDENTITY_TOL, f"{pairs} pairs"),
        CheckResult("identities/quaternion-4sin2", "losses.quaternion_min_loss", e2 <= IDENTITY_TOL, e2,
                    IDENTITY_TOL, f"{pairs} pairs"),
    ]
    v = so3.random_unit_vectors(rng, 1000) * rng.uniform(1e-3, 0.1, size=(1000, 1))
    S1 = so3.random_rotation(rng, 1000)
    S2 = S1 @ so3.exp_map(v)
    ratio = L.frobenius_loss(S1, S2)[0] / L.quaternion_min_loss(so3.matrix_to_quat(S1), so3.matrix_to_quat(S2))[0]
    target = 1.0 / L.loss_weight_ratio()
    e3 = float(np.max(np.abs(ratio / target - 1.0)))
    out.append(CheckResult("identities/small-angle-ratio", "losses.loss_weight_ratio", e3 <= 0.02, e3,
                           0.02, "relative deviation of the loss ratio from 8, angles < 0.1"))
    pts = L.PointSet.from_points(rng.standard_normal((200, 3)) * [1.0, 0.5, 0.2])
    closed = L.weighted_points_loss(R1[:1000], R2[:1000], pts)[0]
    direct = L.direct_points_loss(R1[:1000], R2[:1000], pts)
    e4 = float(np.max(np.abs(closed - direct)))
    out.append(CheckResult("identities/points-closed-form", "losses.weighted_points_loss", e4 <= IDENTITY_TOL,
                           e4, IDENTITY_TOL, "closed form against the direct point sum"))
    return out


# ------------------------------------------------------------ GS limit

LIMIT_LAMBDAS = (1e-1, 1e-2, 1e-3, 1e-4)


def limit_errors(M, lambdas=LIMIT_LAMBDAS) -> np.ndarray:
    """``|weighted_procrustes(M, diag_rect(1, l)) - SixD(M)|_F`` for each ``l``; ``M`` is (..., 3, 2)."""
    M = np.asarray(M, dtype=float)
    gs = mp.apply(mp.SIXD, np.concatenate([M[..., :, 0], M[..., :, 1]], axis=-1))
    errs = []
    for lam in lambdas:
        R = mp.weighted_procrustes(M, np.broadcast_to(mp.diag_rect(1.0, lam), M.shape))
        errs.append(np.linalg.norm(R - gs, axis=(-1, -2)))
    return np.stack(errs, axis=-1)


def limit_gs(seed: int = 0, samples: int = 100) -> list[CheckResult]:
    rng = so3.make_rng([seed, 107])
    M = rng.standard_normal((samples, 3, 2))
    errs = limit_errors(M)
    mono = int(np.sum(np.all(np.diff(errs, axis=-1) < 0, axis=-1)))
    last = float(errs[:, -1].max())
    return [
        CheckResult("limit-gs/monotone", "mappings.weighted_procrustes", mono == samples, float(mono),
                    float(samples), "inputs with strictly decreasing error over lambda"),
        CheckResult("limit-gs/final", "mappings.weighted_procrustes", last < 1e-2, last, 1e-2,
                    "max error at lambda = 1e-4"),
    ]


SUITES = {
    "gradcheck": gradcheck,
    "rankcheck": rankcheck,
    "convexity": convexity,
    "identities": identities,
    "limit-gs": limit_gs,
}


def list_checks() -> list[tuple[str, str]]:
    """``(check name, module anchor)`` for every check of every suite."""
    names = [(f"gradcheck/mapping/{k}", "mappings.jacobian") for k in mp.ALL_KINDS]
    names += [("gradcheck/softmax", "mappings.softmax_jacobian")]
    names += [(f"gradcheck/loss/{n}", f"losses.{n}") for n in ("frobenius", "quaternion", "points")]
    names += [(f"gradcheck/end-to-end/{k}", "tinynet.train_step") for k in mp.ALL_KINDS]
    names += [(f"rankcheck/full-rank/{mp.parse_mapping(k)}", "mappings.jacobian") for k in FULL_RANK_KINDS]
    names += [("rankcheck/deficient/rotvec-at-2pi", "mappings.jacobian"),
              ("rankcheck/deficient/euler-gimbal-lock", "mappings.jacobian")]
    names += [(f"surjectivity/{k}", "mappings.canonical_preimage") for k in mp.ALL_KINDS]
    names += [(f"convexity/convex/{k}", "mappings.preimage_pair") for k in CONVEX_KINDS]
    names += [("convexity/quaternion-antipodal-midpoint", "mappings.preimage_pair"),
              ("convexity/quaternion-positive-ray", "mappings.preimage_pair"),
              ("convexity/non-convex/rotvec", "mappings.preimage_pair"),
              ("convexity/non-convex/euler", "mappings.preimage_pair"),
              ("convexity/property-table", "mappings")]
    names += [("identities/frobenius-8sin2", "losses.frobenius_loss"),
              ("identities/quaternion-4sin2", "losses.quaternion_min_loss"),
              ("identities/small-angle-ratio", "losses.loss_weight_ratio"),
              ("identities/points-closed-form", "losses.weighted_points_loss")]
    names += [("limit-gs/monotone", "mappings.weighted_procrustes"),
              ("limit-gs/final", "mappings.weighted_procrustes")]
    return names
