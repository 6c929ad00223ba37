from __future__ import annotations

import json

import numpy as np
import pandas as pd
import pytest
from scipy import stats

from mortproj.errors import OracleFailure, SchemaViolation
from mortproj.simlab import GeneratorConfig, generate, grid_posterior, oracle_posterior_1d, poisson_glm


def test_generator_is_deterministic(tmp_path):
    cfg = GeneratorConfig(n_age=2, n_region=2, n_years=3, seed=4)
    a, b = generate(cfg), generate(cfg)
    assert a.panel.frame.equals(b.panel.frame)
    assert a.truth == b.truth
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("panel.csv", "truth.json", "truth_log_rate.csv", "spec.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert not generate(GeneratorConfig(n_age=2, n_region=2, n_years=3, seed=5)).panel.frame.equals(a.panel.frame)


def test_generator_shape_and_truth():
    syn = generate(GeneratorConfig(seed=1))
    assert syn.panel.n_cells == 4 * 3 * 5 * 10
    t = syn.truth
    assert len(t["beta_vector"]) == len(t["beta"])
    assert t["kappa_paths"]["period"][0] == 0.0 and len(t["kappa_paths"]["period"]) == 10
    assert syn.log_rate.shape == (syn.panel.n_cells,)


def test_config_from_toml(tmp_path):
    p = tmp_path / "g.toml"
    p.write_text('seed = 3\nn_age = 2\nterms = ["intercept", "age"]\ncoefficients = {age = [0.4]}\n')
    cfg = GeneratorConfig.read(p)
    assert cfg.coefficients == {"age": (0.4,)}
    syn = generate(cfg)
    assert syn.truth["beta"]["age[1]"] == 0.4
    (tmp_path / "bad.json").write_text(json.dumps({"seed": 1, "colour": "red"}))
    with pytest.raises(SchemaViolation):
        GeneratorConfig.read(tmp_path / "bad.json")


def test_fixed_coefficients_need_matching_length():
    with pytest.raises(SchemaViolation):
        generate(GeneratorConfig(n_age=3, terms=("intercept", "age"), coefficients={"age": (0.1,)}))


def test_grid_posterior_matches_normal():
    g = grid_posterior(lambda x: -0.5 * ((x - 1.5) / 0.3) ** 2, -10, 10)
    assert g.mean == pytest.approx(1.5, abs=1e-6) and g.sd == pytest.approx(0.3, rel=1e-4)
    q = stats.norm(1.5, 0.3).ppf((np.arange(20_000) + 0.5) / 20_000)
    assert g.ks_distance(q) < 1e-3


def test_grid_posterior_failure():
    with pytest.raises(OracleFailure):
        grid_posterior(lambda x: np.full_like(x, -np.inf), 0, 1)


def test_one_dimensional_oracle_matches_gamma_posterior():
    # no extra noise and a flat prior: exp(b) | D ~ Gamma(sum D, sum E)
    D, E = np.array([4, 9, 6]), np.array([1e3, 2e3, 1.5e3])
    g = oracle_posterior_1d(D, E, sigma2=0.0)
    ref = stats.gamma(D.sum(), scale=1 / E.sum())
    x = np.linspace(g.x[0], g.x[-1], 50)
    np.testing.assert_allclose(g.cdf(x), ref.cdf(np.exp(x)), atol=1e-6)


def test_oracle_with_noise_is_wider():
    D, E = np.array([40, 55]), np.array([1e4, 1e4])
    assert oracle_posterior_1d(D, E, 0.2).sd > oracle_posterior_1d(D, E, 0.0).sd


def test_poisson_glm_group_means():
    g = np.repeat([0, 1, 2], 4)
    E = np.linspace(1e3, 2e3, 12)
    D = np.array([3, 4, 2, 5, 10, 12, 9, 14, 1, 0, 2, 1])
    X = np.column_stack([np.ones(12), g == 1, g == 2]).astype(float)
    beta, cov = poisson_glm(X, D, E)
    rates = [D[g == k].sum() / E[g == k].sum() for k in range(3)]
    np.testing.assert_allclose(beta, [np.log(rates[0]), np.log(rates[1] / rates[0]), np.log(rates[2] / rates[0])],
                               rtol=1e-9)
    assert cov.shape == (3, 3) and np.all(np.diag(cov) > 0)
