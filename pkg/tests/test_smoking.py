from __future__ import annotations

import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mortproj.core import AgeBand
from mortproj.errors import LagUnavailable, SchemaViolation, SingularFit
from mortproj.smoking import (SmokingSeries, band_for_age, fit_backcast, lagged_ns, lagged_ns_table,
                              load_smoking, reconstruct)

BANDS = ["16-24", "25-34", "35-49", "50-59", "60+"]


def series(seed=0, years=range(1998, 2020), noise=0.01, bands=BANDS):
    rng = np.random.default_rng(seed)
    rows = []
    for g in ("female", "male"):
        for i, b in enumerate(bands):
            for t in years:
                y = (t - 2006) / 10
                v = 0.5 + 0.04 * i + 0.05 * y - 0.01 * y * y + 0.01 * (i - 2) * y
                rows.append((b, g, t, float(np.clip(v + noise * rng.standard_normal(), 0, 1))))
    return SmokingSeries(pd.DataFrame(rows, columns=["age_band", "gender", "year", "ns_rate"]))


def _oracle_fitted(df):
    # corner-coded dummies on raw years: same column space, different basis
    t = df["year"].to_numpy(float)
    D = pd.get_dummies(df["age_band"], drop_first=True).to_numpy(float)
    X = np.column_stack([np.ones_like(t), D, t, t * t, D * t[:, None]])
    coef, *_ = np.linalg.lstsq(X, df["ns_rate"].to_numpy(), rcond=None)
    return X @ coef


def test_backcast_matches_reference_least_squares():
    s = series(seed=3)
    m = fit_backcast(s, "female")
    df = s.for_gender("female")
    ours = np.concatenate([m.predict(b, df.loc[df.age_band == b, "year"]) for b in m.age_bands])
    order = pd.concat([df[df.age_band == b] for b in m.age_bands])
    np.testing.assert_allclose(ours, _oracle_fitted(order), atol=1e-9)


def test_backcast_recovers_noise_free_truth():
    m = fit_backcast(series(noise=0.0), "male")
    assert m.year_quadratic == pytest.approx(-0.01, abs=1e-10)
    assert m.year_linear == pytest.approx(0.05, abs=1e-10)
    assert m.age_effects.sum() == pytest.approx(0.0, abs=1e-12)
    assert m.age_slopes.sum() == pytest.approx(0.0, abs=1e-12)
    assert m.rss == pytest.approx(0.0, abs=1e-20)


def test_original_scale_agrees_with_predict():
    m = fit_backcast(series(seed=1), "female")
    t = np.arange(1981, 2020)
    for b, (c0, c1, c2) in m.original_scale().items():
        np.testing.assert_allclose(c0 + c1 * t + c2 * t * t, m.predict(b, t), atol=1e-8)


def test_reconstruct_keeps_observed_values():
    s = series(seed=2)
    m = fit_backcast(s, "female")
    r = reconstruct(m, s, (1981, 2019))
    obs = s.for_gender("female").set_index(["age_band", "year"])["ns_rate"]
    got = r.frame.set_index(["age_band", "year"])["ns_rate"]
    assert got.loc[obs.index].equals(obs)
    assert not r.frame.loc[r.frame.year < 1998, "observed"].any()
    assert len(r.frame) == len(BANDS) * 39


def test_reconstruct_clamps_with_warning():
    rows = [(b, "female", t, min(1.0, 0.5 + 0.05 * (t - 2010))) for b in ("20-39", "40+")
            for t in range(2010, 2020)]
    s = SmokingSeries(pd.DataFrame(rows, columns=["age_band", "gender", "year", "ns_rate"]))
    m = fit_backcast(s, "female")
    with pytest.warns(RuntimeWarning):
        r = reconstruct(m, s, (1981, 2030))
    assert r.frame["ns_rate"].between(0, 1).all()


def test_too_few_years():
    s = series(years=range(2018, 2020))
    with pytest.raises(SingularFit):
        fit_backcast(s, "female")


def test_series_validation():
    with pytest.raises(SchemaViolation):
        SmokingSeries(pd.DataFrame({"age_band": ["16-24"], "gender": ["male"], "year": [2000], "ns_rate": [1.2]}))
    gap = pd.DataFrame({"age_band": ["16-24"] * 2, "gender": ["male"] * 2, "year": [2000, 2002], "ns_rate": [0.5] * 2})
    with pytest.raises(SchemaViolation):
        SmokingSeries(gap)


def test_lag_lookup():
    s = reconstruct(fit_backcast(series(), "female"), series(), (1981, 2019))
    band = AgeBand.parse("55-59")  # midpoint 57 falls in 50-59
    assert band_for_age(s, band.midpoint) == "50-59"
    want = s.frame.query("age_band == '50-59' and gender == 'female' and year == 1990")["ns_rate"].iloc[0]
    assert lagged_ns(s, band, "female", 2010) == want
    with pytest.raises(LagUnavailable):
        lagged_ns(s, band, "female", 2045)
    tab = lagged_ns_table(s, (band, AgeBand.parse("60-64")), "female", [2005, 2010])
    assert tab.shape == (2, 2) and tab[0, 1] == want


def test_load_smoking(tmp_path):
    s = series()
    s.to_csv(tmp_path / "ns.csv")
    again = load_smoking(tmp_path / "ns.csv")
    assert len(again.frame) == len(s.frame)


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(-0.2, 0.2), seed=st.integers(0, 1000))
def test_backcast_equivariant_to_level_shift(shift, seed):
    s = series(seed=seed, noise=0.005)
    base = fit_backcast(s, "male")
    moved = s.frame.assign(ns_rate=(s.frame["ns_rate"] + shift))
    if not moved["ns_rate"].between(0, 1).all():
        return
    m2 = fit_backcast(SmokingSeries(moved), "male")
    assert m2.intercept == pytest.approx(base.intercept + shift, abs=1e-9)
    np.testing.assert_allclose(m2.age_effects, base.age_effects, atol=1e-9)
