import dataclasses
import math
import warnings

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.stats import multivariate_normal, norm

from causaldiff.errors import DegenerateEnsembleWarning, MaxIterationsWarning, NonFiniteState
from causaldiff.graph import CausalGraph, LatentNode, cell_moments, joint_moments, sample_prior
from causaldiff.multires import Grid, ObservationSource, observe
from causaldiff.sampler import (
    ElboReport,
    FitConfig,
    Model,
    PosteriorEnsemble,
    SamplerConfig,
    elbo,
    fit,
    kde_logdensity,
    langevin_correct,
    likelihood_term,
    parameters,
    prior_term,
    reverse_step,
    sample_posterior,
)

from helpers import GaussianScore, const_sde


# ------------------------------------------------------------- single steps

def test_reverse_step_static():
    s = const_sde(g=1e-300)
    z = np.array([0.3, -1.0])
    np.testing.assert_array_equal(reverse_step(z, 0.5, 0.1, s, np.zeros(2), noise=np.zeros(2)), z)


def test_reverse_step_drift_linear_in_dt():
    s = const_sde(g=1.0)
    z, sc = np.array([0.4]), np.array([-0.7])
    d1 = reverse_step(z, 0.5, 0.2, s, sc, noise=np.zeros(1)) - z
    d2 = reverse_step(z, 0.5, 0.1, s, sc, noise=np.zeros(1)) - z
    np.testing.assert_allclose(d2, d1 / 2)


def test_reverse_step_non_finite():
    with pytest.raises(NonFiniteState):
        reverse_step(np.array([np.inf]), 0.5, 0.1, const_sde(), np.zeros(1), noise=np.zeros(1))


def test_gaussian_reversal_recovers_data_moments():
    sde = const_sde(g=1.0, steps=64)
    mu, v = 0.5, 0.8
    score = GaussianScore(sde, mu, v)
    rng = np.random.default_rng(0)
    z = mu + math.sqrt(v + 1.0) * rng.standard_normal(10_000)
    for j in range(sde.steps, 0, -1):
        t = j * sde.dt
        z = reverse_step(z, t, sde.dt, sde, score(z, t), noise=rng.standard_normal(z.shape))
    assert abs(z.mean() - mu) < 3 * math.sqrt(v / z.size)
    assert abs(z.var() / v - 1) < 0.03


def test_langevin_examples():
    z = np.array([1.0, 2.0])
    np.testing.assert_array_equal(langevin_correct(z, 0.5, np.ones(2), 1.0, 0.0, seed=1), z)
    a = langevin_correct(z, 0.5, lambda x, t: -x, 0.3, 0.1, seed=4)
    b = langevin_correct(z, 0.5, lambda x, t: -x, 0.3, 0.1, seed=4)
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        langevin_correct(z, 0.5, np.ones(2), 1.0, -1.0)


@pytest.mark.parametrize("preconditioned", [True, False])
def test_langevin_stationarity(preconditioned):
    rng = np.random.default_rng(0)
    z = np.full(10_000, 5.0)
    for _ in range(500):
        z = langevin_correct(z, 0.0, -z, 1.0, 0.1, noise=rng.standard_normal(z.shape),
                             preconditioned=preconditioned)
    assert abs(z.mean()) < 0.1 and abs(z.var() - 1) < 0.1


def test_preconditioned_langevin_keeps_scaled_target():
    # target N(0, 4) with Sigma = 4: step kappa*Sigma leaves it invariant
    rng = np.random.default_rng(1)
    z = np.zeros(10_000)
    for _ in range(400):
        z = langevin_correct(z, 0.0, -z / 4, 4.0, 0.05, noise=rng.standard_normal(z.shape))
    assert abs(z.var() / 4 - 1) < 0.1


# ------------------------------------------------------------------- KDE

def test_kde_single_kernel_at_mode():
    assert kde_logdensity(np.array([0.0]), np.array(0.0), bandwidth=1.0) == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_kde_matches_normal_density():
    x = np.random.default_rng(0).standard_normal(10_000)
    q = np.linspace(-3, 3, 31)
    assert np.abs(np.exp(kde_logdensity(x, q)) - norm.pdf(q)).max() < 0.05


def test_kde_far_query_finite():
    out = kde_logdensity(np.array([0.0, 0.1, -0.1]), np.array(1e4), bandwidth=0.05)
    assert np.isfinite(out) and out < -1e6


def test_kde_integrates_to_one():
    x = np.random.default_rng(1).normal(0.3, 1.5, size=200)
    grid = np.linspace(-15, 15, 30_001)
    total = np.trapezoid(np.exp(kde_logdensity(x, grid)), grid)
    assert abs(total - 1) < 0.01


def test_degenerate_ensemble_floors_bandwidth():
    with pytest.warns(DegenerateEnsembleWarning):
        ens = PosteriorEnsemble("z", np.ones((5, 3)))
    assert np.all(ens.bandwidth == 1e-6)
    assert np.all(np.isfinite(kde_logdensity(ens, ens.samples)))


def test_ensemble_validation():
    with pytest.raises(ValueError):
        PosteriorEnsemble("z", np.zeros((1, 3)))
    with pytest.raises(NonFiniteState):
        PosteriorEnsemble("z", np.array([[0.0], [np.nan]]))
    ens = PosteriorEnsemble("z", np.random.default_rng(0).normal(size=(64, 2)))
    h = 64 ** (-0.2) * ens.samples.std(axis=0, ddof=1)
    np.testing.assert_allclose(ens.bandwidth, h)


# ------------------------------------------------------------ ELBO terms

def test_likelihood_hand_value():
    assert likelihood_term(np.array([0.0]), 0.0, 1.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)


def test_likelihood_flat_for_large_noise():
    h = 1e-4
    for var in (1e2, 1e6):
        d = (likelihood_term(np.array([0.5 + h]), 0.0, var) - likelihood_term(np.array([0.5 - h]), 0.0, var)) / (2 * h)
        # only the -log y Jacobian survives
        assert abs(d + 1) < 1e-2 if var == 1e2 else abs(d + 1) < 1e-5


@pytest.mark.parametrize("theta0,theta,mu,var,eta,logy", [
    (0.0, 1.0, 0.0, 0.0, 1.0, 0.0), (0.2, 1.3, 0.4, 0.7, 0.3, 1.1), (-0.5, 0.6, -1.0, 2.0, 0.8, -2.0),
])
def test_likelihood_quadrature_oracle(theta0, theta, mu, var, eta, logy):
    if var == 0:
        dens = norm.pdf(logy, theta0 + theta * mu, eta)
    else:
        f = lambda z: norm.pdf(logy, theta0 + theta * z, eta) * norm.pdf(z, mu, math.sqrt(var))
        dens = quad(f, mu - 12 * math.sqrt(var), mu + 12 * math.sqrt(var), epsabs=0, epsrel=1e-12, limit=200)[0]
    oracle = math.log(dens) - logy
    got = likelihood_term(np.array([logy]), theta0 + theta * mu, theta**2 * var + eta**2)
    assert abs(got - oracle) < 1e-6


def test_prior_term_examples():
    g = CausalGraph([LatentNode("p", 1, prior_mean=0.4, prior_cov=1.0),
                     LatentNode("c", 1, intercept=0.1, coeffs=(2.0,), sigma=1.0)], [("p", "c")])
    total, parts = prior_term(g, {"p": np.array([[0.4]]), "c": np.array([[0.9]])}, per_node=True)
    assert parts["c"] == pytest.approx(-0.5 * math.log(2 * math.pi))
    assert parts["p"] == pytest.approx(-0.5 * math.log(2 * math.pi))


def test_prior_term_equals_joint_density():
    g = CausalGraph([LatentNode("p", 1, prior_mean=-0.3, prior_cov=1.7),
                     LatentNode("c", 1, intercept=0.5, coeffs=(-0.8,), sigma=0.6)], [("p", "c")])
    mean, cov = joint_moments(g)
    pts = np.random.default_rng(0).normal(size=(5, 2))
    got = prior_term(g, {"p": pts[:, :1], "c": pts[:, 1:]})
    expected = multivariate_normal(mean, cov).logpdf(pts).mean()
    assert abs(got - expected) < 1e-8


# ------------------------------------------------------------ sampling

def gaussian_model(side=6, eta=0.3, seed=0, theta0=0.2, steps=32):
    d = side * side
    g = CausalGraph([LatentNode("A", d, prior_mean=0.0, prior_cov=1.0),
                     LatentNode("B", d, intercept=0.1, coeffs=(0.8,), sigma=0.3)], [("A", "B")])
    truth = sample_prior(g, seed=seed)
    src = ObservationSource("yA", "A", None, theta0, {"A": 1.0}, eta, cell_size=1.0)
    src.grid = observe({"A": Grid(truth["A"].reshape(side, side))}, src, seed=seed + 1)
    sdes = {k: const_sde(k, steps=steps) for k in ("A", "B")}
    means, covs = cell_moments(g)
    scores = {"A": GaussianScore(sdes["A"], means["A"], covs[:, 0, 0]),
              "B": GaussianScore(sdes["B"], means["B"], covs[:, 1, 1])}
    return Model(g, sdes, [src], scores, (side, side)), truth


def test_sample_posterior_matches_exact_gaussian_posterior():
    eta = 0.3
    model, truth = gaussian_model(side=8, eta=eta)
    ens = sample_posterior(model, SamplerConfig(M=16, seed=3))
    logy = np.log(model.sources[0].grid.values.ravel())
    post_a = (logy - 0.2) / eta**2 / (1 + 1 / eta**2)
    exact = {"A": post_a, "B": 0.1 + 0.8 * post_a}
    for k in ("A", "B"):
        assert np.corrcoef(ens[k].mean(), exact[k])[0, 1] > 0.9
    assert np.corrcoef(ens["A"].mean(), truth["A"])[0, 1] > 0.9


def test_sample_posterior_determinism_and_threads():
    model, _ = gaussian_model(side=3)
    a = sample_posterior(model, SamplerConfig(M=8, seed=5, chunk=3))
    b = sample_posterior(model, SamplerConfig(M=8, seed=5, chunk=3, threads=3))
    c = sample_posterior(model, SamplerConfig(M=8, seed=6, chunk=3))
    for k in a:
        np.testing.assert_array_equal(a[k].samples, b[k].samples)
        assert not np.array_equal(a[k].samples, c[k].samples)
    assert sample_posterior(model, SamplerConfig(M=2))["A"].M == 2
    with pytest.raises(ValueError):
        sample_posterior(model, SamplerConfig(M=1))


def test_elbo_bookkeeping_and_entropy_direction():
    model, _ = gaussian_model(side=3)
    ens = sample_posterior(model, SamplerConfig(M=32, seed=1))
    rep = elbo(model, ens)
    assert isinstance(rep, ElboReport)
    assert abs(rep.elbo - (rep.likelihood_term + rep.prior_term + rep.entropy_term)) < 1e-12
    centre = {k: e.mean() for k, e in ens.items()}
    jitter = np.random.default_rng(0).normal(size=(32, 9)) * 1e-4
    tight = {k: PosteriorEnsemble(k, centre[k] + jitter) for k in ens}
    assert elbo(model, tight).entropy_term < rep.entropy_term - 5


def test_elbo_below_evidence_conjugate():
    sde = const_sde(steps=64)
    mu0, v0, eta = 0.3, 0.5, 0.4
    score = GaussianScore(sde, mu0, v0)
    g = CausalGraph([LatentNode("z", 1, prior_mean=mu0, prior_cov=v0)])
    for logy, th0 in [(1.1, 0.2), (-0.5, 0.2), (2.0, 1.2)]:
        src = ObservationSource("y", "z", Grid([[math.exp(logy)]]), th0, {"z": 1.0}, eta)
        model = Model(g, {"z": sde}, [src], {"z": score}, (1, 1))
        rep = elbo(model, sample_posterior(model, SamplerConfig(M=512, chunk=128)))
        D = v0 + eta**2
        log_z = -0.5 * math.log(2 * math.pi * D) - (logy - th0 - mu0) ** 2 / (2 * D) - logy
        assert rep.elbo <= log_z
        assert log_z - rep.elbo < 0.1


# ------------------------------------------------------------------- fit

def test_fit_zero_iterations_returns_input():
    model, _ = gaussian_model(side=3)
    res = fit(model, FitConfig(iterations=0))
    assert res.model is model and res.trace == [] and res.converged


def test_fit_at_optimum_is_stable():
    # start from the marginal-likelihood optimum: log y ~ N(theta0, theta^2 + eta^2)
    model, _ = gaussian_model(side=8, steps=128)
    src = model.sources[0]
    logy = np.log(src.grid.values.ravel())
    src = dataclasses.replace(src, theta0=logy.mean(), theta={"A": math.sqrt(logy.var() - 0.09)})
    model = dataclasses.replace(model, sources=[src])
    before = parameters(model)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", MaxIterationsWarning)
        res = fit(model, FitConfig(iterations=12, params=("theta0", "theta", "causal"), tol=0.0),
                  SamplerConfig(M=16, seed=2))
    after = parameters(res.model)
    for k, v in before.items():
        assert abs(after[k] - v) <= 0.05 * max(abs(v), 1.0)
    assert len(res.trace) == 12


def test_fit_warns_when_not_settled():
    model, _ = gaussian_model(side=3, theta0=1.2)
    with pytest.warns(MaxIterationsWarning):
        res = fit(model, FitConfig(iterations=2, tol=0.0), SamplerConfig(M=4))
    assert not res.converged and res.model is res.best_model
