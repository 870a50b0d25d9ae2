import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from causaldiff.diffusion import (
    LinearDecay,
    NodeSDE,
    PerturbationKernel,
    ScoreDataset,
    TrainConfig,
    dsm_loss,
    dsm_terms,
    forward_path,
    kernel_mu,
    kernel_sigma,
    sample_perturbed,
    simpson_weights,
    time_weight,
    train_score,
)
from causaldiff.errors import NegativeVariance, NonFiniteState, OddStepCount, ZeroVariance

const = lambda c: (lambda t: np.full(np.shape(t), float(c)))


def sde(g=1.0, lam=0.0, drift=None, T=1.0, steps=32):
    kw = {} if drift is None else {"drift": drift}
    g_fn = g if callable(g) else const(g)
    lam_fn = lam if callable(lam) else const(lam)
    return NodeSDE("z", diffusion=g_fn, lam=lam_fn, T=T, steps=steps, **kw)


def test_no_dynamics_is_constant():
    z0 = np.array([0.5, -1.0])
    path = forward_path(sde(g=0.0), z0, seed=0)
    assert np.all(path == z0)


def test_relaxation_matches_discrete_recursion():
    s = sde(g=0.0, lam=1.0, steps=40)
    z0, c = np.array([2.0, -3.0]), 0.7
    zT = forward_path(s, z0, targets=np.full((1, 2), c))[-1]
    expected = c + (z0 - c) * (1 - s.dt) ** s.steps
    np.testing.assert_allclose(zT, expected, atol=1e-10)


def test_brownian_variance():
    zT = forward_path(sde(g=1.0), np.zeros(100_000), seed=1)[-1]
    assert abs(zT.var() - 1.0) < 0.03


def test_divergence_reports_step():
    s = sde(g=0.0, drift=lambda z, p, t: 1e3 * z * z)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteState) as err:
        forward_path(s, np.array([10.0]))
    assert err.value.step >= 1


def test_kernel_mu_examples():
    z0 = np.array([1.0, -2.0])
    np.testing.assert_array_equal(kernel_mu(sde(), z0, t=0.6), z0)
    s = sde(drift=lambda z, p, t: -z, steps=64)
    mu = kernel_mu(s, z0)
    np.testing.assert_allclose(mu, np.exp(-1.0) * z0, rtol=2 * s.dt)


def test_kernel_mu_is_path_mean():
    s = sde(g=0.2, lam=LinearDecay(1.5, 1.0), drift=lambda z, p, t: -0.5 * z)
    z0 = np.full(50_000, 1.3)
    tg = np.full((1, 50_000), -0.4)
    paths = forward_path(s, z0, targets=tg, seed=3)[-1]
    mu = kernel_mu(s, z0[:1], targets=tg[:, :1])
    se = paths.std() / math.sqrt(paths.size)
    assert abs(paths.mean() - mu[0]) < 3 * se


def test_kernel_mu_tangent_matches_difference():
    s = sde(lam=const(0.8), drift=lambda z, p, t: -0.3 * z + 0.1 * np.sin(z))
    z0 = np.array([0.2, 1.5])
    tg = np.full((2, 2), 0.5)
    _, d = kernel_mu(s, z0, t=0.7, targets=tg, tangent=True)
    h = 1e-6
    num = (kernel_mu(s, z0 + h, t=0.7, targets=tg) - kernel_mu(s, z0 - h, t=0.7, targets=tg)) / (2 * h)
    np.testing.assert_allclose(d, num, rtol=1e-6)


def test_kernel_sigma_polynomial_exactness():
    assert kernel_sigma(sde(g=1.7), 0.8) == pytest.approx(1.7**2 * 0.8, abs=1e-14)
    s = sde(g=lambda t: np.asarray(t, dtype=float), T=2.0, steps=4)
    assert kernel_sigma(s) == pytest.approx(8 / 3, abs=1e-13)
    s3 = sde(g=lambda t: np.sqrt(1 + np.asarray(t) ** 3), steps=2)
    assert kernel_sigma(s3) == pytest.approx(1.25, abs=1e-14)


def test_kernel_sigma_sin_against_fine_trapezoid():
    s = sde(g=lambda t: np.sin(t), steps=64)
    r = np.linspace(0, 1, 200_001)
    oracle = np.trapezoid(np.sin(r) ** 2, r)
    assert abs(kernel_sigma(s) - oracle) < 1e-6


def test_simpson_convergence_order():
    g = lambda t: np.sqrt(np.exp(np.asarray(t)) + 0.5)
    exact = math.e - 1 + 0.5
    ns = [8, 16, 32, 64]
    errs = [abs(kernel_sigma(sde(g=g, steps=n)) - exact) for n in ns]
    slope = -np.polyfit(np.log(ns), np.log(errs), 1)[0]
    assert 3.5 <= slope <= 4.5


def test_odd_steps_rejected():
    with pytest.raises(OddStepCount):
        sde(steps=7)
    with pytest.raises(OddStepCount):
        simpson_weights(3)


def test_sample_perturbed():
    mu = np.array([0.3, -1.0])
    z, eps = sample_perturbed(PerturbationKernel(mu, 0.0), seed=0)
    np.testing.assert_array_equal(z, mu)
    k = PerturbationKernel(np.full(100_000, 0.5), 2.0)
    z, _ = sample_perturbed(k, seed=1)
    assert abs(z.mean() - 0.5) < 0.03 and abs(z.var() / 2.0 - 1) < 0.03
    a, b = sample_perturbed(k, seed=7), sample_perturbed(k, seed=7)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(NegativeVariance):
        sample_perturbed(PerturbationKernel(mu, -1.0))


def test_reparameterisation_matches_paths_linear_drift():
    s = sde(g=0.8, drift=lambda z, p, t: -0.7 * z, steps=64)
    n = 10_000
    paths = forward_path(s, np.full(n, 1.0), seed=11)[s.steps // 2]
    t = 0.5
    mu = kernel_mu(s, np.array([1.0]), t=t, n_steps=s.steps // 2)[0]
    # Euler variance of the linear drift, to compare like with like
    var, a = 0.0, 1 - 0.7 * s.dt
    for _ in range(s.steps // 2):
        var = a * a * var + 0.64 * s.dt
    z, _ = sample_perturbed(PerturbationKernel(np.full(n, mu), var), seed=12)
    stat = ks_2samp(paths, z).statistic
    assert stat < 1.63 * math.sqrt(2 / n)


def test_dsm_loss_examples():
    rng = np.random.default_rng(0)
    eps = rng.normal(size=(8, 3))
    sigma = rng.uniform(0.1, 2.0, size=8)
    t = rng.uniform(0, 1, size=8)
    perfect = -eps / np.sqrt(sigma)[:, None]
    assert dsm_terms(perfect, t, eps, sigma)[0] == 0.0
    assert time_weight(0.0) == 1.0 and time_weight(1.0) == 0.5
    s = rng.normal(size=(8, 3))
    direct = np.mean(np.sum(time_weight(t)[:, None] * (np.sqrt(sigma)[:, None] * s + eps) ** 2, axis=1))
    assert abs(dsm_terms(s, t, eps, sigma)[0] - direct) < 1e-12
    assert dsm_loss(lambda z, tt: s, t, None, eps, sigma) == pytest.approx(direct, abs=1e-12)
    with pytest.raises(ZeroVariance):
        dsm_terms(s, t, eps, np.zeros(8))


def test_dsm_gradient_matches_difference():
    rng = np.random.default_rng(1)
    s, eps = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    sigma, t = rng.uniform(0.2, 1.0, 4), rng.uniform(0, 1, 4)
    _, g = dsm_terms(s, t, eps, sigma)
    h = 1e-6
    for idx in np.ndindex(s.shape):
        sp, sm = s.copy(), s.copy()
        sp[idx] += h
        sm[idx] -= h
        num = (dsm_terms(sp, t, eps, sigma)[0] - dsm_terms(sm, t, eps, sigma)[0]) / (2 * h)
        assert abs(num - g[idx]) < 1e-7


@given(st.floats(-3, 3), st.floats(0.01, 4), st.floats(0.01, 1))
def test_dsm_weight_identity(score, sigma, t):
    eps = np.array([[0.37]])
    loss = dsm_terms(np.array([[score]]), np.array([t]), eps, np.array([sigma]))[0]
    assert loss == pytest.approx(time_weight(t) * (math.sqrt(sigma) * score + 0.37) ** 2, abs=1e-12)


def test_repeated_point_attracts():
    s = sde(g=1.0, steps=32)
    ds = ScoreDataset.single("z", np.full(4096, 0.8))
    model, losses = train_score(s, ds, TrainConfig(epochs=15, steps_per_epoch=20, batch_size=256))
    z = np.linspace(-3, 3, 13)
    z = z[np.abs(z - 0.8) > 0.2]
    for t in (0.1, 0.5, 1.0):
        assert np.all(np.sign(model(z, t)) == np.sign(0.8 - z))
    assert losses[-1] <= losses[0]


def test_loss_curve_moving_average_non_increasing():
    s = sde(g=1.0, steps=32)
    ds = ScoreDataset.single("z", np.random.default_rng(0).normal(size=4096))
    _, losses = train_score(s, ds, TrainConfig(epochs=40, steps_per_epoch=10, batch_size=256))
    ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(ma) <= 1e-3 * ma[0])
