from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mortproj.errors import BadHorizon, CovariateGap, ShareViolation
from mortproj.mcmc import PriorSet, SamplerConfig, sample
from mortproj.projection import (ProjectionSurface, base_year_shares, extrapolate_kappa, frozen_exposure,
                                 project_rates, projection_frame, simulate_walk, split_population)
from mortproj.simlab import GeneratorConfig, generate


def test_walk_starts_at_anchor_and_rejects_zero_horizon():
    rng = np.random.default_rng(0)
    w = simulate_walk([0.3, -0.1], -0.02, 1e-4, 4, rng)
    assert w.shape == (2, 5) and np.array_equal(w[:, 0], [0.3, -0.1])
    with pytest.raises(BadHorizon):
        simulate_walk([0.0], 0.0, 1.0, 0, rng)


def test_walk_without_noise_is_linear():
    w = simulate_walk([1.0], -0.05, 0.0, 6, np.random.default_rng(0))
    np.testing.assert_allclose(w[0], 1.0 - 0.05 * np.arange(7))


@settings(max_examples=20, deadline=None)
@given(psi=st.floats(-0.1, 0.1), s2=st.floats(1e-5, 1e-2), seed=st.integers(0, 1000))
def test_walk_increments_are_iid_normal(psi, s2, seed):
    w = simulate_walk(np.zeros(4000), psi, s2, 3, np.random.default_rng(seed))
    inc = np.diff(w, axis=1).ravel()
    assert abs(inc.mean() - psi) < 5 * np.sqrt(s2 / inc.size)
    assert inc.var() == pytest.approx(s2, rel=0.1)


@pytest.fixture(scope="module")
def fitted():
    syn = generate(GeneratorConfig(n_age=3, n_region=2, n_years=6, seed=13))
    d = sample(syn.spec, syn.panel, syn.covariates, PriorSet(),
               SamplerConfig(chains=2, iters=800, burnin=400, thin=4, seed=2))
    return syn, d


def test_projection_frame_and_surface(fitted):
    syn, d = fitted
    frame = projection_frame(d.design, range(2007, 2010))
    assert len(frame) == 3 * 2 * 5 * 3 and frame["year"].min() == 2007
    surf = project_rates(d, d.design, frame, 5, frozen_exposure(syn.panel, frame))
    s = surf.summary()
    assert (s["lo95"] < s["mean"]).all() and (s["mean"] < s["hi95"]).all()
    assert np.allclose(s["expected_deaths"], s["mean"] * s["exposure"])
    again = project_rates(d, d.design, frame, 5, frozen_exposure(syn.panel, frame))
    assert np.array_equal(surf.theta, again.theta)


def test_fitted_years_use_fitted_kappa(fitted):
    _, d = fitted
    frame = projection_frame(d.design, [2006])
    surf = project_rates(d, d.design, frame, 1)
    mu = d.flat("beta") @ d.design.rows(frame).T
    xi = np.log(surf.theta) - mu
    # remaining variation is the lognormal cell noise only
    assert abs(xi.mean()) < 0.05


def test_extrapolated_paths_continue_last_value(fitted):
    _, d = fitted
    paths = extrapolate_kappa(d, d.design, 3, seed=1)
    b = d.design.block("period")
    np.testing.assert_array_equal(paths["period"][:, 0], d.flat("beta")[:, b.stop - 1])


def test_projection_needs_covariates_past_their_range(fitted):
    syn, d = fitted
    frame = projection_frame(d.design, [2007 + 40])
    with pytest.raises(CovariateGap):
        project_rates(d, d.design, frame, 1)
    project_rates(d, d.design, frame, 1, carry_forward=True)


def test_surface_draws_roundtrip(tmp_path, fitted):
    syn, d = fitted
    frame = projection_frame(d.design, [2007])
    surf = project_rates(d, d.design, frame, 1, frozen_exposure(syn.panel, frame))
    surf.save_draws(tmp_path / "s")
    again = ProjectionSurface.load_draws(tmp_path / "s")
    assert np.array_equal(again.theta, surf.theta)


def test_split_population_rejects_bad_shares(fitted):
    syn, _ = fitted
    shares = base_year_shares(syn.panel)
    pop = shares[["age_group", "gender", "region"]].drop_duplicates().assign(year=2007, exposure=1e5)
    out = split_population(pop, shares)
    assert out["exposure"].sum() == pytest.approx(pop["exposure"].sum())
    bad = shares.copy()
    bad.loc[0, "share"] += 0.1
    with pytest.raises(ShareViolation):
        split_population(pop, bad)
