import numpy as np
import pytest

from rotreg import experiments as E
from rotreg import losses as L
from rotreg import mappings as mp
from rotreg import so3
from rotreg import tinynet as tn
from rotreg.errors import NonFiniteParameters, ShapeMismatch


def _net(sizes=(5, 7, 6, 3), seed=0, hidden="tanh"):
    return tn.DenseNet.create(sizes, so3.make_rng(seed), hidden=hidden)


def test_create_glorot_bounds():
    net = _net((9, 16, 6))
    for W in net.weights:
        bound = np.sqrt(6 / sum(W.shape))
        assert np.abs(W).max() <= bound
    assert all(np.all(b == 0) for b in net.biases)


def test_zero_weights_pass_bias():
    net = _net((4, 3), hidden="identity")
    net.weights[0][:] = 0
    net.biases[0][:] = [1.0, -2.0, 0.5]
    out, _ = tn.forward(net, np.ones((2, 4)))
    np.testing.assert_array_equal(out, [[1.0, -2.0, 0.5]] * 2)


def test_identity_layer_is_matmul():
    net = _net((4, 3))
    x = so3.make_rng(1).standard_normal((5, 4))
    np.testing.assert_allclose(tn.forward(net, x)[0], x @ net.weights[0], atol=1e-15)


def test_shape_errors():
    net = _net()
    with pytest.raises(ShapeMismatch):
        tn.forward(net, np.zeros((2, 4)))
    _, cache = tn.forward(net, np.zeros((2, 5)))
    with pytest.raises(ShapeMismatch):
        tn.backward(net, cache, np.zeros((2, 4)))


@pytest.mark.parametrize("hidden", ["tanh", "relu"])
def test_backward_matches_finite_differences(hidden):
    rng = so3.make_rng(2)
    net = _net(hidden=hidden)
    x = rng.standard_normal((4, 5))
    c = rng.standard_normal((4, 3))

    def loss(n):
        return float(np.sum(c * tn.forward(n, x)[0]))

    _, cache = tn.forward(net, x)
    grads, gin = tn.backward(net, cache, c)
    params = net.params()
    h = 1e-6
    for _ in range(200):
        i = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[i].shape)
        old = params[i][idx]
        params[i][idx] = old + h
        up = loss(net)
        params[i][idx] = old - h
        down = loss(net)
        params[i][idx] = old
        fd = (up - down) / (2 * h)
        assert abs(grads[i][idx] - fd) <= 1e-5 * (1 + abs(fd))
    fd_in = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[idx] = h
        fd_in[idx] = (np.sum(c * tn.forward(net, x + e)[0]) - np.sum(c * tn.forward(net, x - e)[0])) / (2 * h)
    np.testing.assert_allclose(gin, fd_in, atol=1e-8)


def test_backward_zero_and_linear_in_output_grad():
    net = _net()
    x = so3.make_rng(3).standard_normal((3, 5))
    _, cache = tn.forward(net, x)
    zero, _ = tn.backward(net, cache, np.zeros((3, 3)))
    assert all(np.all(g == 0) for g in zero)
    c = so3.make_rng(4).standard_normal((3, 3))
    g1, _ = tn.backward(net, cache, c)
    g3, _ = tn.backward(net, cache, 3 * c)
    for a, b in zip(g1, g3):
        np.testing.assert_allclose(b, 3 * a, rtol=1e-13, atol=1e-15)


def test_adam_first_steps_by_hand():
    net = tn.DenseNet([1, 1], ["identity"], [np.array([[0.5]])], [np.array([-0.2])])
    opt = tn.OptimState("adam", lr=0.1)
    g = [np.array([[2.0]]), np.array([-0.5])]
    tn.apply_update(net, opt, g)
    # Bias-corrected first step moves each parameter by lr against the gradient sign.
    w1 = 0.5 - 0.1 * 2.0 / (2.0 + 1e-8)
    np.testing.assert_allclose(net.weights[0], [[w1]], rtol=1e-15)
    np.testing.assert_allclose(net.biases[0], [-0.2 + 0.1 * 0.5 / (0.5 + 1e-8)])
    g2 = [np.array([[1.0]]), np.array([0.0])]
    tn.apply_update(net, opt, g2)
    m = 0.9 * 0.1 * 2.0 + 0.1 * 1.0
    v = 0.999 * 0.001 * 4.0 + 0.001 * 1.0
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    np.testing.assert_allclose(net.weights[0], [[w1 - step]], rtol=1e-12)


def test_sgd_step():
    net = tn.DenseNet([1, 1], ["identity"], [np.array([[0.5]])], [np.array([0.0])])
    tn.apply_update(net, tn.OptimState("sgd", lr=0.25), [np.array([[2.0]]), np.array([1.0])])
    np.testing.assert_allclose(net.weights[0], [[0.0]])
    np.testing.assert_allclose(net.biases[0], [-0.25])


def test_non_finite_parameters_abort():
    net = _net((1, 1))
    with pytest.raises(NonFiniteParameters):
        tn.apply_update(net, tn.OptimState("sgd", lr=1.0), [np.array([[np.inf]]), np.array([0.0])])


def _align_batch(seed=0, batch=32):
    rng = so3.make_rng(seed)
    cloud = rng.standard_normal((16, 3))
    R = so3.random_rotation(rng, batch)
    return E._align_inputs(cloud, R), R


@pytest.mark.parametrize("kind", [mp.PROCRUSTES, mp.SIXD, mp.QUATERNION, mp.ROTVEC])
def test_train_step_reduces_batch_loss(kind):
    x, R = _align_batch()
    net = tn.DenseNet.create([x.shape[1], 32, kind.input_dim], so3.make_rng(1))
    opt = tn.OptimState("adam", lr=1e-3)
    loss = L.LossSpec("frobenius")
    first, skipped = tn.train_step(net, opt, x, kind, loss, R)
    assert skipped == 0
    second, _ = tn.train_step(net, opt, x, kind, loss, R)
    assert second < first


def test_train_step_lr_zero_keeps_parameters():
    x, R = _align_batch()
    net = tn.DenseNet.create([x.shape[1], 16, 9], so3.make_rng(1))
    before = [p.copy() for p in net.params()]
    tn.train_step(net, tn.OptimState("adam", lr=0.0), x, mp.PROCRUSTES, L.LossSpec(), R)
    for a, b in zip(before, net.params()):
        np.testing.assert_array_equal(a, b)


def test_train_step_deterministic():
    x, R = _align_batch()
    runs = []
    for _ in range(2):
        net = tn.DenseNet.create([x.shape[1], 16, 6], so3.make_rng(1))
        opt = tn.OptimState()
        vals = [tn.train_step(net, opt, x, mp.SIXD, L.LossSpec(), R)[0] for _ in range(5)]
        runs.append((vals, [p.copy() for p in net.params()]))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        np.testing.assert_array_equal(a, b)


def test_train_step_skips_degenerate_samples():
    x, R = _align_batch(batch=4)
    net = tn.DenseNet.create([x.shape[1], 4], so3.make_rng(1), hidden="identity")
    net.weights[0][:] = 0.0
    net.weights[0][0, :] = 1.0
    x = x.copy()
    x[0] = 0.0
    _, skipped = tn.train_step(net, tn.OptimState(), x, mp.QUATERNION, L.LossSpec(), R)
    assert skipped == 1


@pytest.mark.parametrize("kind", mp.ALL_KINDS, ids=str)
def test_end_to_end_gradient(kind):
    rng = so3.make_rng(5)
    net = tn.DenseNet.create([9, 16, kind.input_dim], rng)
    a = rng.standard_normal((3, 9))
    Rt = so3.random_rotation(rng, 3)

    def total(n):
        out, _ = tn.forward(n, a)
        return float(np.sum(L.frobenius_loss(mp.apply(kind, out), Rt)[0]))

    out, cache = tn.forward(net, a)
    R, J = mp.jacobian(kind, out)
    _, dR = L.frobenius_loss(R, Rt)
    grads, _ = tn.backward(net, cache, np.einsum("bo,bon->bn", dR.reshape(3, 9), J))
    params = net.params()
    h = 1e-6
    for _ in range(30):
        i = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[i].shape)
        old = params[i][idx]
        params[i][idx] = old + h
        up = total(net)
        params[i][idx] = old - h
        down = total(net)
        params[i][idx] = old
        fd = (up - down) / (2 * h)
        assert abs(grads[i][idx] - fd) <= 1e-4 * (1 + abs(fd))


def test_checkpoint_round_trip(tmp_path):
    net = _net((6, 8, 9), hidden="relu")
    path = tmp_path / "net.bin"
    tn.save_checkpoint(net, path)
    back = tn.load_checkpoint(path)
    assert back.sizes == net.sizes and back.activations == net.activations
    for a, b in zip(net.params(), back.params()):
        np.testing.assert_array_equal(a, b)
    raw = path.read_bytes()
    assert raw[:4] == b"TNET"
    n_floats = sum(p.size for p in net.params())
    assert raw[-8 * n_floats:] == b"".join(p.astype("<f8").tobytes() for p in net.params())
    assert (tmp_path / "net.bin.layers.txt").read_text().splitlines() == ["6 8 9", "relu identity"]


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        tn.load_checkpoint(p)
