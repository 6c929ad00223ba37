"""Non-smoker prevalence: quadratic-trend backcast and lagged lookup.

Per gender, prevalence is modelled as

    NS(a, t) = b0 + b_age[a] + b_lin * y + b_quad * y**2 + b_slope[a] * y

with ``y = (t - 2006) / 10`` and both age vectors summing to zero.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .core import AgeBand
from .errors import LagUnavailable, SchemaViolation, SingularFit

log = logging.getLogger(__name__)

YEAR_CENTRE = 2006.0
YEAR_SCALE = 10.0
DEFAULT_LAG = 20


@dataclass(frozen=True)
class SmokingSeries:
    """NS rates with columns ``age_band, gender, year, ns_rate``.

    ``observed`` marks rows that came from data (as opposed to backcasts).
    """

    frame: pd.DataFrame

    def __post_init__(self):
        need = {"age_band", "gender", "year", "ns_rate"}
        if not need.issubset(self.frame.columns):
            raise SchemaViolation(f"smoking series needs columns {sorted(need)}")
        r = self.frame["ns_rate"]
        if r.isna().any() or (r < 0).any() or (r > 1).any():
            raise SchemaViolation("NS rates must lie in [0, 1]")
        for (a, g), grp in self.frame.groupby(["age_band", "gender"]):
            yrs = np.sort(grp["year"].to_numpy())
            if len(yrs) != len(np.unique(yrs)) or np.any(np.diff(yrs) != 1):
                raise SchemaViolation(f"years for ({a}, {g}) are not contiguous and unique")

    @property
    def age_bands(self) -> list[str]:
        return _band_order(self.frame["age_band"].unique())

    def for_gender(self, gender: str) -> pd.DataFrame:
        return self.frame[self.frame["gender"] == gender]

    def to_csv(self, path: str | Path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g")


def _band_order(labels) -> list[str]:
    return sorted({str(x) for x in labels}, key=lambda s: AgeBand.parse(s).lower)


def load_smoking(path: str | Path) -> SmokingSeries:
    df = pd.read_csv(path)
    df["year"] = df["year"].astype(int)
    df["gender"] = df["gender"].str.lower()
    df["age_band"] = df["age_band"].astype(str)
    if "observed" not in df.columns:
        df["observed"] = True
    return SmokingSeries(df)


@dataclass(frozen=True)
class BackcastModel:
    gender: str
    age_bands: tuple[str, ...]
    intercept: float
    age_effects: np.ndarray  # STZ, one per band
    year_linear: float
    year_quadratic: float
    age_slopes: np.ndarray  # STZ, one per band
    rss: float
    n_obs: int

    def predict(self, age_band: str, years) -> np.ndarray:
        try:
            i = self.age_bands.index(age_band)
        except ValueError:
            raise SchemaViolation(f"age band {age_band!r} not in model") from None
        y = (np.asarray(years, dtype=float) - YEAR_CENTRE) / YEAR_SCALE
        return (self.intercept + self.age_effects[i] + self.year_linear * y
                + self.year_quadratic * y**2 + self.age_slopes[i] * y)

    def original_scale(self) -> dict:
        """Coefficients as a polynomial in raw calendar year ``t``.

        Returns per-band ``(c0, c1, c2)`` with ``NS = c0 + c1*t + c2*t**2``.
        """
        c, s = YEAR_CENTRE, YEAR_SCALE
        out = {}
        for i, band in enumerate(self.age_bands):
            lin = (self.year_linear + self.age_slopes[i]) / s
            quad = self.year_quadratic / s**2
            c0 = self.intercept + self.age_effects[i] - lin * c + quad * c**2
            c1 = lin - 2 * quad * c
            out[band] = (c0, c1, quad)
        return out


def _stz(n: int, idx: np.ndarray) -> np.ndarray:
    """Sum-to-zero coding: ``n - 1`` columns, the last level coded -1."""
    C = np.vstack([np.eye(n - 1), -np.ones((1, n - 1))]) if n > 1 else np.zeros((1, 0))
    return C[idx]


def _design(age_idx: np.ndarray, years: np.ndarray, n_age: int) -> np.ndarray:
    y = (years - YEAR_CENTRE) / YEAR_SCALE
    A = _stz(n_age, age_idx)
    return np.column_stack([np.ones_like(y), A, y, y**2, A * y[:, None]])


def fit_backcast(series: SmokingSeries, gender: str) -> BackcastModel:
    df = series.for_gender(gender)
    if "observed" in df.columns:
        df = df[df["observed"].astype(bool)]
    if df.empty:
        raise SchemaViolation(f"no smoking data for gender {gender!r}")
    bands = _band_order(df["age_band"].unique())
    for b in bands:
        if df.loc[df["age_band"] == b, "year"].nunique() < 3:
            raise SingularFit(f"age band {b!r} has fewer than 3 distinct years")
    idx = df["age_band"].map({b: i for i, b in enumerate(bands)}).to_numpy()
    X = _design(idx, df["year"].to_numpy(dtype=float), len(bands))
    y = df["ns_rate"].to_numpy(dtype=float)
    coef, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        raise SingularFit(f"design rank {rank} < {X.shape[1]} columns")
    resid = y - X @ coef
    k = len(bands) - 1

    def expand(free):
        return np.append(free, -free.sum())

    return BackcastModel(
        gender=gender,
        age_bands=tuple(bands),
        intercept=float(coef[0]),
        age_effects=expand(coef[1:1 + k]),
        year_linear=float(coef[1 + k]),
        year_quadratic=float(coef[2 + k]),
        age_slopes=expand(coef[3 + k:]),
        rss=float(resid @ resid),
        n_obs=len(y),
    )


def reconstruct(model: BackcastModel, series: SmokingSeries | None = None,
                year_range: tuple[int, int] = (1981, 2019)) -> SmokingSeries:
    """Fill ``year_range`` with model predictions, keeping observed values.

    Predictions outside [0, 1] are clamped with a warning.
    """
    years = np.arange(year_range[0], year_range[1] + 1)
    obs = None
    if series is not None:
        obs = series.for_gender(model.gender)
        if "observed" in obs.columns:
            obs = obs[obs["observed"].astype(bool)]
        obs = obs.set_index(["age_band", "year"])["ns_rate"]
    rows = []
    clamped = 0
    for band in model.age_bands:
        pred = model.predict(band, years)
        for t, p in zip(years, pred):
            if obs is not None and (band, int(t)) in obs.index:
                rows.append((band, model.gender, int(t), float(obs[(band, int(t))]), True))
                continue
            if p < 0 or p > 1:
                clamped += 1
                p = min(max(p, 0.0), 1.0)
            rows.append((band, model.gender, int(t), float(p), False))
    if clamped:
        msg = f"{clamped} backcast NS values clamped to [0, 1] for {model.gender}"
        log.warning(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    df = pd.DataFrame(rows, columns=["age_band", "gender", "year", "ns_rate", "observed"])
    return SmokingSeries(df)


def band_for_age(series: SmokingSeries, age: float) -> str:
    """Smoking band whose range contains ``age`` (a mortality band midpoint)."""
    for lab in series.age_bands:
        if AgeBand.parse(lab).contains(age):
            return lab
    raise SchemaViolation(f"no smoking age band contains age {age}")


def lagged_ns(series: SmokingSeries, age_group: AgeBand | float, gender: str,
              death_year: int, lag: int = DEFAULT_LAG) -> float:
    """NS prevalence ``lag`` years before ``death_year`` for a mortality band."""
    age = age_group.midpoint if isinstance(age_group, AgeBand) else float(age_group)
    band = band_for_age(series, age)
    df = series.frame
    hit = df[(df["age_band"] == band) & (df["gender"] == gender) & (df["year"] == death_year - lag)]
    if hit.empty:
        raise LagUnavailable(f"no NS value for {band}/{gender} in {death_year - lag}")
    return float(hit["ns_rate"].iloc[0])


def lagged_ns_table(series: SmokingSeries, bands: tuple[AgeBand, ...], gender: str,
                    years, lag: int = DEFAULT_LAG) -> np.ndarray:
    """Matrix [age index, year index] of lagged NS values."""
    lookup = series.frame[series.frame["gender"] == gender].set_index(["age_band", "year"])["ns_rate"]
    out = np.empty((len(bands), len(years)))
    for i, b in enumerate(bands):
        sb = band_for_age(series, b.midpoint)
        for j, t in enumerate(years):
            key = (sb, int(t) - lag)
            if key not in lookup.index:
                raise LagUnavailable(f"no NS value for {sb}/{gender} in {int(t) - lag}")
            out[i, j] = lookup[key]
    return out
