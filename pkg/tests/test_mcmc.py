from __future__ import annotations

import warnings

import numpy as np
import pytest
from scipy import stats

from mortproj.errors import ConvergenceWarning, DiagnosticsUnavailable, SchemaViolation
from mortproj.mcmc import (PosteriorDraws, PriorSet, Problem, SamplerConfig, State, _Sweeper, ess, fitted_rate,
                           sample, sample_problem, split_rhat)
from mortproj.simlab import GeneratorConfig, generate, grid_posterior, oracle_posterior_1d
from mortproj.spec import ModelSpec


def gaussian_toy(seed=0, n=30):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal(n)])
    y = X @ np.array([1.0, -0.5]) + 0.3 * rng.standard_normal(n)
    return Problem(X, None, None, y=y)


def test_seed_is_mandatory():
    with pytest.raises(SchemaViolation):
        SamplerConfig()


def test_gaussian_posterior_with_fixed_variance_is_exact():
    prob = gaussian_toy()
    s2 = 0.09
    cov = np.linalg.inv(prob.X.T @ prob.X / s2 + np.eye(2) / 1e4)
    mean = cov @ prob.X.T @ prob.y / s2
    d = sample_problem(prob, SamplerConfig(chains=2, iters=6000, burnin=500, thin=1, seed=1, fixed_sigma2=s2))
    b = d.flat("beta")
    se = np.sqrt(np.diag(cov) / min(ess(d.beta[..., 0]), ess(d.beta[..., 1])))
    assert np.all(np.abs(b.mean(0) - mean) < 5 * se)
    np.testing.assert_allclose(b.std(0), np.sqrt(np.diag(cov)), rtol=0.05)


def test_beta_conditional_against_quadrature():
    # one coefficient, four cells: beta | z, sigma2 by repeated Gibbs draws
    X = np.ones((4, 1))
    prob = Problem(X, np.array([3, 5, 2, 7]), np.full(4, 1e3))
    sw = _Sweeper(prob, SamplerConfig(chains=1, iters=2, burnin=1, seed=0))
    z = np.log(np.array([3, 5, 2, 7]) / 1e3)
    st = State(z.copy(), np.zeros(1), 0.2, np.zeros(0), np.zeros(0))
    rng = np.random.default_rng(4)
    draws = np.empty(20_000)
    for i in range(draws.size):
        sw.update_beta(st, rng)
        draws[i] = st.beta[0]
    g = grid_posterior(lambda b: -0.5 * ((z[None, :] - b[:, None]) ** 2).sum(1) / 0.2 - 0.5 * b**2 / 1e4, -20, 10)
    assert g.ks_distance(draws) < 0.02


def test_sigma2_conditional_against_quadrature():
    prob = Problem(np.ones((5, 1)), np.array([1, 2, 3, 4, 5]), np.full(5, 100.0))
    sw = _Sweeper(prob, SamplerConfig(chains=1, iters=2, burnin=1, seed=0))
    z = np.array([-4.0, -3.6, -3.3, -3.1, -2.9])
    st = State(z, np.array([-3.4]), 0.1, np.zeros(0), np.zeros(0))
    rng = np.random.default_rng(9)
    draws = np.empty(20_000)
    for i in range(draws.size):
        sw.update_sigma2(st, rng)
        draws[i] = st.sigma2
    ss = float(((z + 3.4) ** 2).sum())
    shape, rate = 1.0 + 2.5, 0.1 + ss / 2
    # inverse-gamma density on the log scale, including the Jacobian
    g = grid_posterior(lambda u: -shape * u - rate * np.exp(-u), -8.0, 4.0)
    assert g.ks_distance(np.log(draws)) < 0.02


def test_full_poisson_marginal_matches_oracle():
    D, E = np.array([12, 20, 9]), np.array([1e4, 1.5e4, 8e3])
    s2 = 0.05
    prob = Problem(np.ones((3, 1)), D, E)
    d = sample_problem(prob, SamplerConfig(chains=4, iters=6000, burnin=1000, thin=2, seed=3, fixed_sigma2=s2))
    oracle = oracle_posterior_1d(D, E, sigma2=s2, prior_mean=0.0, prior_var=1e4)
    n_eff = ess(d.beta[..., 0])
    # 99% Kolmogorov critical value at the effective sample size
    assert oracle.ks_distance(d.flat("beta")[:, 0]) < 1.63 / np.sqrt(n_eff)


def test_ess_oracles():
    rng = np.random.default_rng(0)
    iid = rng.standard_normal((4, 5000))
    assert ess(iid) == pytest.approx(20_000, rel=0.1)
    phi = 0.8
    x = np.zeros((4, 20_000))
    e = rng.standard_normal(x.shape)
    for t in range(1, x.shape[1]):
        x[:, t] = phi * x[:, t - 1] + e[:, t]
    assert ess(x) == pytest.approx(x.size * (1 - phi) / (1 + phi), rel=0.15)


def test_rhat_behaviour():
    rng = np.random.default_rng(1)
    same = rng.standard_normal((4, 2000))
    assert split_rhat(same) < 1.01
    shifted = same + np.array([0, 0, 0, 1.0])[:, None]
    assert split_rhat(shifted) > 1.1
    with pytest.raises(DiagnosticsUnavailable):
        split_rhat(same[:1])


def test_single_chain_reports_missing_rhat():
    d = sample_problem(gaussian_toy(), SamplerConfig(chains=1, iters=300, burnin=100, seed=2))
    assert d.report["rhat"] is None and d.report["rhat_error"] == "DiagnosticsUnavailable"


def test_convergence_warning():
    with pytest.warns(ConvergenceWarning):
        sample_problem(gaussian_toy(), SamplerConfig(chains=3, iters=30, burnin=2, thin=1, seed=2, rhat_threshold=1.0))


@pytest.fixture(scope="module")
def small_fit():
    syn = generate(GeneratorConfig(n_age=3, n_region=2, n_years=6, seed=8))
    cfg = SamplerConfig(chains=2, iters=800, burnin=400, thin=2, seed=11)
    return syn, sample(syn.spec, syn.panel, syn.covariates, PriorSet(), cfg), cfg


def test_fit_is_deterministic(small_fit):
    syn, d, cfg = small_fit
    again = sample(syn.spec, syn.panel, syn.covariates, PriorSet(), cfg)
    assert np.array_equal(d.beta, again.beta) and np.array_equal(d.sigma2, again.sigma2)
    other = sample(syn.spec, syn.panel, syn.covariates, PriorSet(),
                   SamplerConfig(chains=2, iters=800, burnin=400, thin=2, seed=12))
    assert not np.array_equal(d.beta, other.beta)


def test_draws_roundtrip(tmp_path, small_fit):
    _, d, _ = small_fit
    d.save(tmp_path / "draws")
    again = PosteriorDraws.load(tmp_path / "draws")
    assert np.array_equal(again.beta, d.beta) and again.columns == d.columns
    assert again.kappa_terms == ("period", "period:aad")


def test_latent_draws_respect_bounds(small_fit):
    _, d, _ = small_fit
    assert d.z is not None and d.z.max() <= 0.0 and d.z.min() >= -30.0
    assert np.all(d.sigma2 > 0) and np.all(d.sigma2_kappa > 0)


def test_fitted_rate_interval(small_fit):
    _, d, _ = small_fit
    r = fitted_rate(d, d.design.X[0])
    assert r["lo95"] < r["mean"] < r["hi95"]
    crude = d.design.deaths[0] / d.design.exposure[0]
    assert 0.5 * crude < r["mean"] < 2 * crude
