"""Age standardisation, deprivation gap, residual diagnostics and excess deaths."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from .core import KEY_ORDER, StandardPopulation, display
from .errors import AggregationError, SchemaViolation, ScenarioUnsupported, StdMismatch, UndefinedRD
from .mcmc import PosteriorDraws
from .projection import ProjectionSurface, project_rates
from .spec import DesignMatrix


# --- age standardisation ------------------------------------------------------------

def asr(rates, weights) -> np.ndarray | float:
    """Weighted mean over the last axis with standard-population weights."""
    r = np.asarray(rates, dtype=float)
    w = np.asarray(weights, dtype=float)
    if r.shape[-1] != w.shape[-1]:
        raise StdMismatch(f"{r.shape[-1]} age groups but {w.shape[-1]} standard weights")
    if np.any(w <= 0):
        raise StdMismatch("standard weights must be positive")
    out = r @ w / w.sum()
    return float(out) if np.ndim(out) == 0 else out


def asr_frame(df: pd.DataFrame, value: str, std: StandardPopulation) -> pd.DataFrame:
    """ASR of column ``value`` for every combination of the non-age keys."""
    keys = [c for c in KEY_ORDER if c in df.columns and c != "age_group"]
    ages = sorted(df["age_group"].unique())
    w = std.array(ages)
    wide = df.pivot_table(index=keys, columns="age_group", values=value, aggfunc="first")
    if wide.isna().any().any():
        raise StdMismatch("rates do not cover every age group in every stratum")
    wide = wide[ages]
    out = wide.index.to_frame(index=False)
    out["asr"] = asr(wide.to_numpy(), w)
    return out


def asr_draws(theta: np.ndarray, keys: pd.DataFrame, std: StandardPopulation,
              by: Sequence[str]) -> tuple[pd.DataFrame, np.ndarray]:
    """Draw-wise ASR over age for each group in ``by`` (draws x groups)."""
    by = list(by)
    ages = sorted(keys["age_group"].unique())
    w = std.array(ages)
    groups = keys[by].drop_duplicates().sort_values(by).reset_index(drop=True)
    out = np.empty((theta.shape[0], len(groups)))
    age_pos = {a: i for i, a in enumerate(ages)}
    gid = keys[by].merge(groups.reset_index(), on=by, how="left")["index"].to_numpy()
    for g in range(len(groups)):
        cols = np.flatnonzero(gid == g)
        a = keys["age_group"].to_numpy()[cols]
        if sorted(a) != ages:
            raise StdMismatch(f"group {groups.iloc[g].to_dict()} lacks some age groups")
        order = np.argsort([age_pos[x] for x in a])
        out[:, g] = asr(theta[:, cols[order]], w)
    return groups, out


def rd_gap(asr_q1, asr_q5):
    """Relative gap between the most (q1) and least (q5) deprived quintiles."""
    q1 = np.asarray(asr_q1, dtype=float)
    q5 = np.asarray(asr_q5, dtype=float)
    if np.any(q1 == 0):
        raise UndefinedRD("ASR of the most deprived quintile is zero")
    out = (q1 - q5) / q1
    return float(out) if out.ndim == 0 else out


def interval(x: np.ndarray, axis: int = 0) -> dict:
    lo, hi = np.quantile(x, [0.025, 0.975], axis=axis)
    return {"mean": np.mean(x, axis=axis), "lo95": lo, "hi95": hi}


# --- residuals ------------------------------------------------------------------------

RESIDUAL_EDGES = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0)
RESIDUAL_LABELS = ("[-4,-2)", "[-2,-1)", "[-1,0)", "[0,1)", "[1,2)", "[2,4]")


def pearson(deaths, expected, sigma2) -> np.ndarray:
    """(D - m) / sqrt(m (1 + m (exp(sigma2) - 1))) for lognormal-mixed Poisson counts."""
    D = np.asarray(deaths, dtype=float)
    m = np.asarray(expected, dtype=float)
    var = m * (1.0 + m * np.expm1(sigma2))
    return (D - m) / np.sqrt(var)


def residual_category(r) -> np.ndarray:
    """Heat-map bins; values beyond ±4 fall in the outermost bins."""
    c = np.clip(np.asarray(r, dtype=float), -4.0, 4.0)
    idx = np.searchsorted(np.asarray(RESIDUAL_EDGES[1:-1]), c, side="right")
    return np.asarray(RESIDUAL_LABELS, dtype=object)[idx]


def pearson_residuals(design: DesignMatrix, draws: PosteriorDraws | None = None,
                      theta_hat: np.ndarray | None = None, sigma2: float | None = None) -> pd.DataFrame:
    """Residual table for the fitted cells.

    With draws, the fitted rate is the posterior mean of exp(mu + sigma2/2)
    and the variance uses the posterior mean of sigma2.
    """
    if draws is not None:
        B = draws.flat("beta")
        s2 = draws.flat("sigma2")
        mu = B @ design.X.T
        theta_hat = np.exp(mu + 0.5 * s2[:, None]).mean(axis=0)
        sigma2 = float(s2.mean())
    if theta_hat is None or sigma2 is None:
        raise SchemaViolation("need draws or a point fit (theta_hat, sigma2)")
    m = np.asarray(theta_hat) * design.exposure
    out = design.keys.copy()
    out["deaths"] = design.deaths
    out["expected"] = m
    out["variance"] = m * (1.0 + m * np.expm1(sigma2))
    out["residual"] = pearson(design.deaths, m, sigma2)
    out["category"] = residual_category(out["residual"])
    return out


def heatmap_table(resid: pd.DataFrame) -> pd.DataFrame:
    """Age-by-year grid per region (and quintile) in long form."""
    panels = [c for c in ("gender", "region", "deprivation") if c in resid.columns]
    cols = panels + ["age_group", "year", "residual", "category"]
    out = resid[cols].copy()
    out["residual_clipped"] = np.clip(out["residual"], -4, 4)
    return out.sort_values(panels + ["age_group", "year"], kind="mergesort").reset_index(drop=True)


# --- observed excess -------------------------------------------------------------------

def ced_from_totals(registered, expected) -> tuple[np.ndarray, np.ndarray]:
    """Excess (registered - expected) and ratio (registered / expected)."""
    r = np.asarray(registered, dtype=float)
    e = np.asarray(expected, dtype=float)
    return r - e, r / e


def cumulative_excess(observed: pd.DataFrame, baseline: pd.DataFrame, years: Sequence[int] | None = None,
                      by: Sequence[str] = ("gender", "region"), expected_col: str = "expected_deaths",
                      total_label: str = "England") -> pd.DataFrame:
    """Registered minus baseline-expected deaths summed over years (and ages).

    ``observed`` is at a coarser or equal granularity to ``baseline``; the
    baseline is summed up to the observed keys first.  A total row per
    gender is appended.
    """
    obs_keys = [c for c in KEY_ORDER if c in observed.columns]
    if "deaths" not in observed.columns or expected_col not in baseline.columns:
        raise AggregationError("observed needs 'deaths' and baseline needs expected deaths")
    missing = [c for c in obs_keys if c not in baseline.columns]
    if missing:
        raise AggregationError(f"baseline lacks dimensions {missing} present in the observed panel")
    if years is not None:
        observed = observed[observed["year"].isin(years)]
        baseline = baseline[baseline["year"].isin(years)]
    base = baseline.groupby(obs_keys, as_index=False)[expected_col].sum()
    merged = observed[obs_keys + ["deaths"]].merge(base, on=obs_keys, how="outer", indicator=True)
    if (merged["_merge"] != "both").any():
        bad = merged[merged["_merge"] != "both"].iloc[0][obs_keys].to_dict()
        raise AggregationError(f"observed and baseline key sets differ, e.g. {bad}")
    by = [c for c in by if c in obs_keys]
    table = merged.groupby(by, as_index=False)[["deaths", expected_col]].sum()
    if "gender" in by and "region" in by:
        tot = table.groupby("gender", as_index=False)[["deaths", expected_col]].sum()
        tot["region"] = total_label
        table["region"] = table["region"].astype(object)
        table = pd.concat([table, tot[table.columns]], ignore_index=True)
    table = table.rename(columns={"deaths": "registered", expected_col: "expected"})
    table["excess"], table["ratio"] = ced_from_totals(table["registered"], table["expected"])
    table["excess_display"] = display(table["excess"], 2)
    table["ratio_display"] = display(table["ratio"], 2)
    return table


# --- delay scenarios ---------------------------------------------------------------------

def default_schedule() -> tuple[float, ...]:
    """Cumulative share of the delay realised, by year since projection start.

    Nothing in the first year, 60% by the second, then linear to 85% by year
    six, to 95% by year eleven and to 100% by year eighteen.
    """
    vals = [0.0, 0.60]
    vals += list(0.60 + 0.25 * np.arange(1, 5) / 4)
    vals += list(0.85 + 0.10 * np.arange(1, 6) / 5)
    vals += list(0.95 + 0.05 * np.arange(1, 8) / 7)
    return tuple(float(v) for v in vals)


@dataclass(frozen=True)
class ScenarioConfig:
    delay_months: float
    schedule: tuple[float, ...] = field(default_factory=default_schedule)
    start_year: int = 2019

    def __post_init__(self):
        s = np.asarray(self.schedule, dtype=float)
        if self.delay_months < 0:
            raise SchemaViolation("delay must be non-negative")
        if s.size == 0 or s[0] < 0 or np.any(np.diff(s) < 0):
            raise SchemaViolation("schedule must start at or above 0 and never decrease")
        if abs(s[-1] - 1.0) > 1e-12:
            raise SchemaViolation("schedule must end at 1")

    def fraction(self, years) -> np.ndarray:
        off = np.asarray(years, dtype=int) - self.start_year
        s = np.asarray(self.schedule, dtype=float)
        return np.where(off < 0, 0.0, s[np.clip(off, 0, len(s) - 1)])

    def increments(self) -> np.ndarray:
        return np.diff(np.asarray(self.schedule, dtype=float), prepend=0.0)

    def shift_years(self, years) -> np.ndarray:
        """AAD shift in years for each projection year."""
        return self.delay_months / 12.0 * self.fraction(years)

    @classmethod
    def from_name(cls, delay_months: float, schedule: str = "default", start_year: int = 2019) -> "ScenarioConfig":
        if schedule == "default":
            return cls(delay_months, default_schedule(), start_year)
        vals = tuple(float(x) for x in schedule.split(","))
        return cls(delay_months, vals, start_year)


def check_scenario_support(spec) -> None:
    if spec.cause != "lung" or "aad" not in spec.covariates():
        raise ScenarioUnsupported("delay scenarios need a lung cancer model with an AAD term")


def apply_delay_scenario(draws: PosteriorDraws, design: DesignMatrix, frame: pd.DataFrame,
                         scenario: ScenarioConfig, seed: int, exposure: np.ndarray | None = None,
                         max_draws: int | None = None, carry_forward: bool = False) -> ProjectionSurface:
    """Re-project with AAD raised by the delay, reusing the baseline's random numbers."""
    check_scenario_support(design.spec)
    shift = scenario.shift_years(frame["year"].to_numpy())
    return project_rates(draws, design, frame, seed, exposure, max_draws,
                         shifts={"aad": shift}, carry_forward=carry_forward)


@dataclass
class ExcessReport:
    ed: pd.DataFrame
    eam: pd.DataFrame
    erm: pd.DataFrame
    edm: pd.DataFrame | None
    national: pd.DataFrame
    cumulative: dict
    draws: np.ndarray = field(repr=False)  # per-draw ED, (draws, cells)

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("ed", "eam", "erm", "edm", "national"):
            df = getattr(self, name)
            if df is not None:
                df.to_csv(d / f"{name}.csv", index=False, float_format="%.17g")


def _grouped(keys: pd.DataFrame, ed: np.ndarray, E: np.ndarray, by: list[str]) -> pd.DataFrame:
    groups = keys[by].drop_duplicates().sort_values(by).reset_index(drop=True)
    gid = keys[by].merge(groups.reset_index(), on=by, how="left")["index"].to_numpy()
    G = np.zeros((len(keys), len(groups)))
    G[np.arange(len(keys)), gid] = 1.0
    tot_ed = ed @ G
    tot_E = E @ G
    rate = tot_ed / tot_E[None, :]
    s = interval(rate)
    out = groups.copy()
    out["excess_deaths"] = tot_ed.mean(axis=0)
    out["exposure"] = tot_E
    out["rate"] = s["mean"]
    out["rate_lo95"] = s["lo95"]
    out["rate_hi95"] = s["hi95"]
    return out


def excess_tables(scenario: ProjectionSurface, baseline: ProjectionSurface) -> ExcessReport:
    """Scenario minus baseline deaths, by stratum-year and aggregated margins."""
    if scenario.theta.shape != baseline.theta.shape or not scenario.keys.equals(baseline.keys):
        raise AggregationError("scenario and baseline surfaces cover different cells or draws")
    if scenario.exposure is None or baseline.exposure is None or not np.array_equal(scenario.exposure,
                                                                                       baseline.exposure):
        raise AggregationError("scenario and baseline exposures differ")
    E = baseline.exposure
    ed = scenario.expected - baseline.expected
    s = interval(ed)
    cell = scenario.keys.copy()
    cell["excess_deaths"] = s["mean"]
    cell["lo95"] = s["lo95"]
    cell["hi95"] = s["hi95"]
    keys = scenario.keys
    eam = _grouped(keys, ed, E, ["age_group", "year"])
    erm = _grouped(keys, ed, E, ["region", "year"])
    edm = _grouped(keys, ed, E, ["deprivation", "year"]) if "deprivation" in keys.columns else None
    national = _grouped(keys, ed, E, ["year"])
    total = ed.sum(axis=1)
    ci = interval(total)
    cumulative = {"excess_deaths": float(ci["mean"]), "lo95": float(ci["lo95"]), "hi95": float(ci["hi95"])}
    return ExcessReport(cell, eam, erm, edm, national, cumulative, ed)
