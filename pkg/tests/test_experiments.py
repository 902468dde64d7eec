import math

import numpy as np
import pytest

from rotreg import experiments as E
from rotreg import mappings as mp
from rotreg import so3
from rotreg import tinynet as tn
from rotreg.errors import NonFiniteParameters

TINY_ALIGN = dict(points=8, hidden=(16,), iterations=30, batch=8, eval_every=10, test_size=16)
TINY_IK = dict(hidden=(16,), iterations=30, batch=8, eval_every=10, test_size=16, frames=64)


def test_csv_format():
    rep = E.ExperimentReport()
    rep.add("align", "procrustes", 0, 500, "test_error_deg", 0.1)
    rep.add("ik", "sixd", 3, "final", "skipped", 0)
    text = rep.to_csv()
    assert text == ("experiment,mapping,seed,key,metric,value\n"
                    "align,procrustes,0,500,test_error_deg,0.10000000000000001\n"
                    "ik,sixd,3,final,skipped,0\n")
    back = E.ExperimentReport.from_csv(text)
    assert back.rows == rep.rows
    with pytest.raises(ValueError):
        rep.add("a", "b", 0, 0, "m", float("nan"))
    with pytest.raises(ValueError):
        E.ExperimentReport.from_csv("a,b\n")


def test_report_select_and_final():
    rep = E.ExperimentReport()
    for s in (0, 1):
        for step, v in ((0, 10.0), (5, 1.0 + s)):
            rep.add("align", "sixd", s, step, "test_error_deg", v)
    assert len(rep.select(mapping="sixd", key="5")) == 2
    assert rep.final("sixd", "test_error_deg") == {0: 1.0, 1: 2.0}


def test_nearest_rank():
    v = [15, 20, 35, 40, 50]
    assert E.nearest_rank(v, 30) == 20
    assert E.nearest_rank(v, 40) == 20
    assert E.nearest_rank(v, 50) == 35
    assert E.nearest_rank(v, 100) == 50
    assert E.nearest_rank(v, 0) == 15
    with pytest.raises(ValueError):
        E.nearest_rank([], 50)


def test_lr_schedule():
    assert E.lr_at(1e-3, None, 1, 100) == 1e-3
    np.testing.assert_allclose(E.lr_at(1e-3, None, 100, 100), 1e-5)
    np.testing.assert_allclose(E.lr_at(1e-2, 1e-4, 50, 99), 1e-3)
    assert E.lr_at(0.0, None, 10, 100) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        E.LinearityConfig(samples=50)
    with pytest.raises(ValueError):
        E.LinearityConfig(eps=(0.1, 0.0))
    with pytest.raises(ValueError):
        E.AlignConfig(points=0)
    with pytest.raises(ValueError):
        E.IKConfig(joints=2)
    with pytest.raises(ValueError):
        E.IKConfig(weights=(0.0, 0.0, 0.0))
    with pytest.raises(ValueError):
        E.IKConfig(preset="mocap")


def test_linearity_small():
    cfg = E.LinearityConfig(samples=300, eps=(1e-3, 1e-1, 1.0), seed=1)
    rep = E.run_linearity(cfg)
    for m in cfg.mappings:
        label = str(mp.parse_mapping(m))
        med = {r[3]: r[5] for r in rep.select(mapping=label, metric="median")}
        assert med[E.fmt_float(1e-3)] < med[E.fmt_float(1.0)]
        p25 = {r[3]: r[5] for r in rep.select(mapping=label, metric="p25")}
        p75 = {r[3]: r[5] for r in rep.select(mapping=label, metric="p75")}
        assert all(p25[k] <= med[k] <= p75[k] for k in med)
    assert rep.to_csv() == E.run_linearity(cfg).to_csv()


def test_uniform_below_and_shift():
    rng = so3.make_rng(0)
    R = E._uniform_below(rng, 500, 1.0)
    assert so3.rotation_angle(R).max() < 1.0
    cfg = E.AlignConfig(target_max_angle=0.5, target_shift_x=True)
    R = E._targets(cfg, so3.make_rng(1), 200)
    assert so3.rotation_angle(R).min() > math.pi - 0.5 - 1e-9


def test_align_smoke_and_determinism():
    cfg = E.AlignConfig(mapping="sixd", **TINY_ALIGN)
    rep = E.run_alignment(cfg)
    steps = [r[3] for r in rep.select(metric="test_error_deg")]
    assert steps == ["0", "10", "20", "30"]
    assert rep.select(metric="skipped")[0][5] == 0
    assert rep.to_csv() == E.run_alignment(cfg).to_csv()
    assert rep.to_csv() != E.run_alignment(E.AlignConfig(mapping="sixd", seed=1, **TINY_ALIGN)).to_csv()


def test_align_matrix_ablation_reports_both_decoders():
    rep = E.run_alignment(E.AlignConfig(mapping="matrix", **TINY_ALIGN))
    labels = {r[1] for r in rep.rows}
    assert labels == {"matrix/procrustes", "matrix/gram-schmidt"}


def test_align_quaternion_loss():
    rep = E.run_alignment(E.AlignConfig(mapping="quaternion", loss="quaternion", **TINY_ALIGN))
    assert rep.final("quaternion", "test_error_deg")[0] > 0


def test_align_abort_keeps_partial_report(monkeypatch):
    calls = {"n": 0}
    real = tn.train_step

    def flaky(*args, **kw):
        calls["n"] += 1
        if calls["n"] == 15:
            raise NonFiniteParameters("forced")
        return real(*args, **kw)

    monkeypatch.setattr(tn, "train_step", flaky)
    rep = E.run_alignment(E.AlignConfig(mapping="procrustes", **TINY_ALIGN))
    assert rep.select(metric="aborted_at_step")[0][5] == 14
    assert [r[3] for r in rep.select(metric="test_error_deg")] == ["0", "10"]


def test_forward_kinematics_zero_rotations():
    cfg = E.IKConfig(joints=4, bone_lengths=(1.0, 0.5, 0.25, 2.0))
    bones = E.bone_vectors(cfg)
    R = np.broadcast_to(np.eye(3), (2, 4, 3, 3))
    pts, C = E.forward_kinematics(R, bones)
    np.testing.assert_allclose(pts[:, :, 0], np.broadcast_to(np.cumsum(bones, axis=0), (2, 4, 3)))
    np.testing.assert_allclose(C, R)
    pts, _ = E.forward_kinematics(R, E.marker_offsets(cfg))
    np.testing.assert_allclose(pts[0, :, 0], np.cumsum(bones, axis=0))
    np.testing.assert_allclose(pts[0, 1, 1], bones[0] + 0.5 * np.array([0, 0, 0.5]))


def test_forward_kinematics_rotates_descendants():
    bones = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    R = np.stack([so3.axis_rotation(2, math.pi / 2), np.eye(3)])[None]
    pts, _ = E.forward_kinematics(R, bones)
    np.testing.assert_allclose(pts[0, :, 0], [[0, 1, 0], [0, 2, 0]], atol=1e-15)


def test_ik_loss_gradient():
    rng = so3.make_rng(2)
    cfg = E.IKConfig()
    offsets = E.marker_offsets(cfg)
    alpha = np.array([0.2, 0.5, 1.3])
    X = rng.standard_normal((2, 3, 3, 3))
    target = rng.standard_normal((2, 3, 2, 3))
    _, dR = E.ik_loss(X, target, offsets, alpha)
    h = 1e-6
    for idx in np.ndindex(X.shape):
        e = np.zeros_like(X)
        e[idx] = h
        fd = (E.ik_loss(X + e, target, offsets, alpha)[0].sum()
              - E.ik_loss(X - e, target, offsets, alpha)[0].sum()) / (2 * h)
        assert abs(dR[idx] - fd) <= 1e-6 * (1 + abs(fd))


def test_joint_weight_presets():
    np.testing.assert_allclose(E.IKConfig().joint_weights(), np.full(3, 1 / 9))
    w = E.IKConfig(preset="cmu-hips", flagged=(0, 2)).joint_weights()
    np.testing.assert_allclose(w, [1 / 9 + 10 / 9, 1 / 9, 1 / 9 + 10 / 9])
    np.testing.assert_allclose(E.IKConfig(weights=(1, 2, 3)).joint_weights(), [1, 2, 3])


def test_walks_respect_joint_limit():
    R = E._walks(so3.make_rng(3), 200, 3, 0.3, 0.8)
    assert so3.rotation_angle(R[:, 1:]).max() <= 0.8 + 1e-9


def test_ik_smoke_and_determinism():
    cfg = E.IKConfig(mapping="quaternion", **TINY_IK)
    rep = E.run_ik(cfg)
    assert [r[3] for r in rep.select(metric="mean_joint_error")] == ["0", "10", "20", "30"]
    assert {r[4] for r in rep.select(key="final")} == {"joint0_error", "joint1_error", "joint2_error", "skipped"}
    assert rep.to_csv() == E.run_ik(cfg).to_csv()


def test_probe_small_runs_four_jobs():
    cfg = E.AlignConfig(**TINY_ALIGN)
    rep = E.run_restricted_rotvec_probe(math.pi / 2, cfg)
    keys = {(r[0], r[1]) for r in rep.select(metric="test_error_deg")}
    assert keys == {("probe-restricted", "rotvec-restricted:1.5707963267948966"),
                    ("probe-restricted", "procrustes"),
                    ("probe-unshifted", "rotvec"), ("probe-shifted", "rotvec")}
