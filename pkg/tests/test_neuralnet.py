import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from causaldiff.errors import DimensionMismatch
from causaldiff.neuralnet import Mlp, MlpGrads, Optimizer, forward, grad, load_mlp, save_mlp, sgd_step


def test_zero_net_gives_zero():
    net = Mlp.constant([3, 4, 2], 0.0)
    np.testing.assert_array_equal(forward(net, np.ones(3)), np.zeros(2))


def test_identity_layer():
    net = Mlp([np.eye(3)], [np.zeros(3)])
    x = np.array([0.3, -1.0, 2.0])
    np.testing.assert_array_equal(forward(net, x), x)


def test_hand_computed_121():
    net = Mlp([[[0.3], [-0.2]], [[0.5, 0.7]]], [[0.1, 0.05], [-0.4]])
    x = 0.8
    h = np.tanh(np.array([0.3 * x + 0.1, -0.2 * x + 0.05]))
    expected = 0.5 * h[0] + 0.7 * h[1] - 0.4
    assert abs(forward(net, [x])[0] - expected) < 1e-12


def test_input_dimension_checked():
    with pytest.raises(DimensionMismatch):
        forward(Mlp.init([3, 2]), np.ones(4))
    with pytest.raises(DimensionMismatch):
        Mlp([np.ones((2, 3)), np.ones((1, 3))], [np.zeros(2), np.zeros(1)])


def test_linear_input_gradient_is_transpose():
    w = np.random.default_rng(0).normal(size=(2, 3))
    net = Mlp([w], [np.zeros(2)])
    up = np.array([0.4, -1.1])
    _, dx = grad(net, np.ones(3), up)
    np.testing.assert_array_equal(dx, w.T @ up)


def test_zero_upstream_zero_gradients():
    net = Mlp.init([2, 5, 3], seed=1)
    g, dx = grad(net, np.ones((4, 2)), np.zeros((4, 3)))
    assert all(np.all(p == 0) for p in g.params()) and np.all(dx == 0)


def _fd_check(net, x, up, h=1e-5):
    g, dx = grad(net, x, up)
    f = lambda n, xx: float(np.sum(up * forward(n, xx)))
    worst = 0.0
    for k, p in enumerate(net.params()):
        for idx in np.ndindex(p.shape):
            plus, minus = net.copy(), net.copy()
            plus.params()[k][idx] += h
            minus.params()[k][idx] -= h
            num = (f(plus, x) - f(minus, x)) / (2 * h)
            worst = max(worst, abs(num - g.params()[k][idx]) / max(1.0, abs(num)))
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (f(net, xp) - f(net, xm)) / (2 * h)
        worst = max(worst, abs(num - dx[idx]) / max(1.0, abs(num)))
    return worst


@pytest.mark.parametrize("output", ["identity", "softplus"])
def test_gradients_match_finite_differences(output):
    net = Mlp.init([3, 6, 4, 2], seed=5, output=output)
    rng = np.random.default_rng(2)
    assert _fd_check(net, rng.normal(size=(5, 3)), rng.normal(size=(5, 2))) < 1e-6


@given(st.integers(0, 10_000), st.lists(st.integers(1, 5), min_size=1, max_size=3))
def test_gradient_property(seed, hidden):
    rng = np.random.default_rng(seed)
    net = Mlp.init([2, *hidden, 1], seed=seed)
    for b in net.biases:
        b[:] = rng.normal(size=b.shape) * 0.3
    assert _fd_check(net, rng.normal(size=(3, 2)), rng.normal(size=(3, 1))) < 1e-5


@given(st.integers(0, 10_000))
def test_lipschitz_bound(seed):
    rng = np.random.default_rng(seed)
    net = Mlp.init([3, 8, 8, 2], seed=seed)
    lip = np.prod([np.linalg.norm(w, 2) for w in net.weights])
    x, y = rng.uniform(-2, 2, size=(2, 3))
    assert np.linalg.norm(forward(net, x) - forward(net, y)) <= lip * np.linalg.norm(x - y) + 1e-12


def _bowl(net, target):
    x = np.linspace(-1, 1, 16)[:, None]
    out = forward(net, x)
    loss = float(np.mean((out - target) ** 2))
    g, _ = grad(net, x, 2 * (out - target) / out.size)
    return loss, g


def test_zero_learning_rate_leaves_params():
    net = Mlp.init([1, 4, 1], seed=0)
    _, g = _bowl(net, 1.0)
    new = sgd_step(net, g, Optimizer(lr=0.0))
    for a, b in zip(net.params(), new.params()):
        np.testing.assert_array_equal(a, b)


def test_identity_preconditioner_is_plain_sgd():
    net = Mlp.init([1, 4, 1], seed=0)
    _, g = _bowl(net, 1.0)
    new = sgd_step(net, g, Optimizer(lr=0.1))
    for a, b, d in zip(net.params(), new.params(), g.params()):
        np.testing.assert_allclose(b, a - 0.1 * d)
    up = sgd_step(net, g, Optimizer(lr=0.1), maximize=True)
    np.testing.assert_allclose(up.params()[0], net.params()[0] + 0.1 * g.params()[0])


def test_quadratic_bowl_descends_every_step():
    net = Mlp([np.array([[0.5]])], [np.array([-1.0])])
    opt = Optimizer(lr=0.1)
    prev = np.inf
    for _ in range(100):
        loss, g = _bowl(net, 2.0)
        assert loss < prev
        prev = loss
        net = sgd_step(net, g, opt)


def test_optimizer_rejects_negative_preconditioner():
    with pytest.raises(ValueError):
        Optimizer(lr=0.1, precond=[np.array([-1.0])])
    with pytest.raises(ValueError):
        Optimizer(lr=-1.0)


def test_gradient_accumulation_order_independent():
    net = Mlp.init([2, 3, 1], seed=4)
    x = np.random.default_rng(0).normal(size=(6, 2))
    up = np.ones((6, 1))
    a = grad(net, x[:3], up[:3])[0] + grad(net, x[3:], up[3:])[0]
    b = grad(net, x[3:], up[3:])[0] + grad(net, x[:3], up[:3])[0]
    full = grad(net, x, up)[0]
    for p, q, r in zip(a.params(), b.params(), full.params()):
        np.testing.assert_array_equal(p, q)
        np.testing.assert_allclose(p, r, atol=1e-14)
    assert isinstance(a, MlpGrads)


def test_checkpoint_round_trip(tmp_path):
    net = Mlp.init([2, 5, 1], seed=3, output="softplus")
    back = load_mlp(save_mlp(tmp_path / "n.mlp", net))
    assert back.output == "softplus"
    for a, b in zip(net.params(), back.params()):
        np.testing.assert_array_equal(a, b)
