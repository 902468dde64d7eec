"""Acceptance criteria, each run at its stated tolerance.

A pass/fail line per criterion is printed in the terminal summary.
"""

import time

import numpy as np
import pytest

from rotreg import checks, cli
from rotreg import experiments as E
from rotreg import mappings as mp


def _failed(results):
    return [r.line() for r in results if not r.passed]


def test_criterion_1_gradient_suite(acceptance):
    start = time.perf_counter()
    results = checks.gradcheck(seed=0, samples=500, probes=200)
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    covered = (all(f"gradcheck/mapping/{k}" in names for k in mp.ALL_KINDS)
               and "gradcheck/softmax" in names
               and all(f"gradcheck/loss/{n}" in names for n in ("frobenius", "quaternion", "points"))
               and all(f"gradcheck/end-to-end/{k}" in names for k in mp.ALL_KINDS))
    worst_map = max(r.value for r in results if not r.name.startswith("gradcheck/end-to-end"))
    worst_e2e = max(r.value for r in results if r.name.startswith("gradcheck/end-to-end"))
    ok = covered and not _failed(results) and elapsed < 60
    acceptance(1, "gradient suite", ok,
               f"{len(results)} checks, worst {worst_map:.1e} (tol 1e-5), end-to-end {worst_e2e:.1e} "
               f"(tol 1e-4), {elapsed:.1f} s of 60 s")
    assert covered
    assert not _failed(results), _failed(results)
    assert elapsed < 60


def test_criterion_2_property_table(acceptance):
    results = checks.rankcheck(0, samples=1000) + checks.surjectivity(0, samples=1000) + checks.convexity(0)
    names = {r.name for r in results}
    required = ({f"rankcheck/full-rank/{mp.parse_mapping(k)}" for k in checks.FULL_RANK_KINDS}
                | {"rankcheck/deficient/rotvec-at-2pi", "rankcheck/deficient/euler-gimbal-lock",
                   "convexity/quaternion-antipodal-midpoint", "convexity/property-table"}
                | {f"convexity/convex/{k}" for k in checks.CONVEX_KINDS}
                | {f"surjectivity/{k}" for k in mp.ALL_KINDS})
    table = next(r for r in results if r.name == "convexity/property-table")
    ok = required <= names and not _failed(results)
    acceptance(2, "property framework and table", ok, f"{len(results)} checks; {table.detail}")
    assert required <= names, required - names
    assert not _failed(results), _failed(results)


def test_criterion_3_identities(acceptance):
    results = checks.identities(0, pairs=10_000)
    detail = ", ".join(f"{r.name.split('/')[1]}={r.value:.1e}" for r in results)
    acceptance(3, "loss identities", not _failed(results), detail)
    assert not _failed(results), _failed(results)


def test_criterion_4_gram_schmidt_limit(acceptance):
    rng = np.random.default_rng(0)
    M = rng.standard_normal((100, 3, 2))
    errs = checks.limit_errors(M)
    monotone = bool(np.all(np.diff(errs, axis=-1) < 0))
    final = float(errs[:, -1].max())
    results = checks.limit_gs(0, samples=100)
    ok = monotone and final < 1e-2 and not _failed(results)
    acceptance(4, "Gram-Schmidt limit", ok, f"monotone on 100 inputs: {monotone}, max error at 1e-4 {final:.1e}")
    assert monotone and final < 1e-2
    assert not _failed(results), _failed(results)


def test_criterion_5_linearity(acceptance):
    start = time.perf_counter()
    cfg = E.LinearityConfig()
    rep = E.run_linearity(cfg)
    elapsed = time.perf_counter() - start

    def medians(name):
        label = str(mp.parse_mapping(name))
        return np.array([r[5] for r in rep.select(mapping=label, metric="median")])

    proc, sixd, quat = medians("procrustes"), medians("sixd"), medians("quaternion")
    restricted, plain = medians("rotvec-restricted"), medians("rotvec")
    assert len(proc) == len(cfg.eps)
    order = bool(np.all(proc < sixd) and np.all(proc < quat))
    ratio = restricted / proc
    within = bool(np.all((ratio <= 2.0) & (ratio >= 0.5)))
    plain_ratio = float(np.max(plain / proc))
    ok = order and within and elapsed < 120
    acceptance(5, "linearity deviation", ok,
               f"Procrustes below SixD and Quaternion at all {len(proc)} steps: {order}; "
               f"restricted/Procrustes median ratio in [{ratio.min():.2f}, {ratio.max():.2f}]; "
               f"plain rotvec max ratio {plain_ratio:.2f} (reported); {elapsed:.1f} s of 120 s")
    assert order
    assert within
    assert elapsed < 120


def _mean_final(rep, experiment, mapping, metric):
    final = rep.final(mapping, metric, experiment)
    assert sorted(final) == [0, 1, 2, 3, 4]
    return float(np.mean(list(final.values())))


@pytest.mark.slow
def test_criterion_6_training_orderings(acceptance, desk_sweep):
    rep, elapsed = desk_sweep
    align = {m: _mean_final(rep, "align", m, "test_error_deg") for m in E.TRAINED_KINDS}
    ik = {m: _mean_final(rep, "ik", m, "mean_joint_error") for m in E.TRAINED_KINDS}
    mat_p = _mean_final(rep, "align", "matrix/procrustes", "test_error_deg")
    mat_gs = _mean_final(rep, "align", "matrix/gram-schmidt", "test_error_deg")

    def split(d):
        return (d["procrustes"] + d["sixd"]) / 2, (d["quaternion"] + d["rotvec"]) / 2

    a_good, a_bad = split(align)
    k_good, k_bad = split(ik)
    ok = a_good < a_bad and k_good < k_bad and mat_p <= mat_gs and elapsed < 900
    fmt = lambda d: " ".join(f"{k}={v:.3g}" for k, v in d.items())  # noqa: E731
    acceptance(6, "desk-scale training orderings", ok,
               f"align deg [{fmt(align)}] {a_good:.3g} < {a_bad:.3g}; "
               f"ik [{fmt(ik)}] {k_good:.3g} < {k_bad:.3g}; "
               f"matrix procrustes {mat_p:.3g} <= gram-schmidt {mat_gs:.3g}; {elapsed:.0f} s of 900 s")
    assert a_good < a_bad
    assert k_good < k_bad
    assert mat_p <= mat_gs
    assert elapsed < 900


TINY = ["--points", "8", "--hidden", "16", "--iterations", "30", "--batch", "8", "--eval-every", "10",
        "--test-size", "16"]
COMMANDS = {
    "gradcheck": ["gradcheck", "--samples", "30", "--probes", "5"],
    "rankcheck": ["rankcheck", "--samples", "100"],
    "convexity": ["convexity", "--rotations", "5", "--samples", "100"],
    "identities": ["identities", "--pairs", "1000"],
    "limit-gs": ["limit-gs", "--samples", "20"],
    "linearity": ["linearity", "--samples", "200", "--eps", "1e-3:1:logspace4"],
    "align": ["align", "--mapping", "procrustes,sixd,quaternion,rotvec,matrix", "--num-seeds", "2"] + TINY,
    "ik": ["ik", "--mapping", "procrustes,quaternion", "--iterations", "20", "--eval-every", "10",
           "--frames", "64", "--test-size", "16", "--hidden", "16"],
    "probe-restricted": ["probe-restricted"] + TINY,
}


def test_criterion_7_determinism(acceptance, tmp_path, capsys):
    differing = []
    for name, args in COMMANDS.items():
        outs = []
        for run in range(2):
            path = tmp_path / f"{name}-{run}.csv"
            code = cli.main(args + ["--seed", "7", "--out", str(path)])
            assert code == 0, name
            outs.append(path.read_bytes())
        assert outs[0].startswith(b"experiment,mapping,seed,key,metric,value\n")
        if outs[0] != outs[1]:
            differing.append(name)
    capsys.readouterr()
    acceptance(7, "byte-identical CSV on re-run", not differing,
               f"{len(COMMANDS)} commands compared" + (f"; differing: {differing}" if differing else ""))
    assert not differing
