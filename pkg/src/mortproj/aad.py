"""Average age at diagnosis (AAD) covariate.

Yearly AAD for a stratum is the incidence-weighted mean of band midpoints,
with incidence re-weighted by the standard population so that strata with
different age structures are comparable.  The model covariate is the
exposure-weighted average of the yearly values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .core import IncidenceSurface, MortalityPanel, StandardPopulation
from .errors import DegenerateCovariate, SchemaViolation, UndefinedAAD


def weighted_age(midpoints, rates, std_weights) -> float:
    w = np.asarray(rates, dtype=float) * np.asarray(std_weights, dtype=float)
    total = w.sum()
    if not total > 0:
        raise UndefinedAAD("incidence is zero in every age group")
    return float(np.dot(np.asarray(midpoints, dtype=float), w) / total)


def aad_yearly(incidence: IncidenceSurface, std: StandardPopulation, key: dict) -> float:
    """AAD for one (gender, deprivation?, region, year) key."""
    df = incidence.frame
    mask = np.ones(len(df), dtype=bool)
    for dim, val in key.items():
        if dim not in df.columns:
            raise SchemaViolation(f"incidence surface has no {dim!r} dimension")
        mask &= (df[dim] == val).to_numpy()
    sub = df[mask]
    n_age = len(incidence.schema.age_groups)
    if sub["age_group"].nunique() != n_age or len(sub) != n_age:
        raise UndefinedAAD(f"incidence does not cover every age group for {key}")
    sub = sub.sort_values("age_group")
    mids = incidence.schema.midpoints()[sub["age_group"].to_numpy() - 1]
    return weighted_age(mids, sub["lambda_hat"], std.array(sub["age_group"]))


def aad_timeavg(aad_t, exposures) -> float:
    a = np.asarray(aad_t, dtype=float)
    e = np.asarray(exposures, dtype=float)
    if a.size == 0:
        raise UndefinedAAD("no years to average over")
    if a.shape != e.shape:
        raise SchemaViolation("AAD and exposure vectors differ in length")
    if np.any(e <= 0):
        raise SchemaViolation("exposure weights must be positive")
    return float(np.dot(a, e) / e.sum())


def standardise(values) -> tuple[np.ndarray, float, float]:
    """Z-scores with population (divide-by-n) standard deviation."""
    v = np.asarray(values, dtype=float)
    mean = float(v.mean())
    sd = float(v.std(ddof=0))
    if not sd > 0 or sd < 1e-12 * max(1.0, abs(mean)):
        raise DegenerateCovariate("covariate has zero variance over the frame")
    z = (v - mean) / sd
    # second pass removes residual rounding in the mean
    z = z - z.mean()
    return z, mean, sd


def unstandardise(z, mean: float, sd: float) -> np.ndarray:
    return np.asarray(z, dtype=float) * sd + mean


@dataclass(frozen=True)
class AADSurface:
    """Yearly and time-averaged AAD plus the standardisation constants.

    ``yearly`` has columns (gender, [deprivation,] region, year, aad_t);
    ``averaged`` has (gender, [deprivation,] region, aad, aad_std).
    """

    yearly: pd.DataFrame
    averaged: pd.DataFrame
    mean: float
    sd: float
    keys: tuple[str, ...]

    def to_csv(self, path: str | Path) -> None:
        self.averaged.to_csv(path, index=False, float_format="%.17g")

    def lookup(self) -> dict:
        return {tuple(r[:-2]): r[-1] for r in self.averaged[list(self.keys) + ["aad", "aad_std"]]
                .itertuples(index=False, name=None)}

    @classmethod
    def from_frame(cls, averaged: pd.DataFrame, mean: float | None = None,
                   sd: float | None = None) -> "AADSurface":
        keys = tuple(c for c in ("gender", "deprivation", "region") if c in averaged.columns)
        df = averaged.copy()
        if mean is None or sd is None:
            z, mean, sd = standardise(df["aad"])
        else:
            z = (df["aad"].to_numpy(dtype=float) - mean) / sd
        df["aad_std"] = z
        return cls(pd.DataFrame(), df, float(mean), float(sd), keys)


def build_aad_surface(incidence: IncidenceSurface, std: StandardPopulation,
                      panel: MortalityPanel, region_only: bool = False) -> AADSurface:
    """Yearly AAD per stratum, exposure-weighted over the panel's years.

    With ``region_only`` the yearly values are first averaged over deprivation
    quintiles (exposure-weighted) so the covariate varies by region only.
    """
    inc = incidence.frame
    has_dep = "deprivation" in inc.columns and "deprivation" in panel.dims
    keys = ["gender"] + (["deprivation"] if has_dep else []) + ["region"]
    years = sorted(set(inc["year"]).intersection(panel.years))
    if not years:
        raise UndefinedAAD("incidence and panel share no years")
    inc = inc[inc["year"].isin(years)]

    mids = incidence.schema.midpoints()
    w_std = std.array(range(1, len(incidence.schema.age_groups) + 1))
    rows = []
    n_age = len(mids)
    for k, grp in inc.groupby(keys + ["year"], sort=True):
        g = grp.sort_values("age_group")
        if len(g) != n_age:
            raise UndefinedAAD(f"incidence does not cover every age group for {k}")
        a = g["age_group"].to_numpy() - 1
        rows.append((*k, weighted_age(mids[a], g["lambda_hat"], w_std[a])))
    yearly = pd.DataFrame(rows, columns=keys + ["year", "aad_t"])

    expo = (panel.frame[panel.frame["year"].isin(years)]
            .groupby(keys + ["year"], as_index=False)["exposure"].sum())
    yearly = yearly.merge(expo, on=keys + ["year"], how="left")
    if yearly["exposure"].isna().any():
        raise UndefinedAAD("panel lacks exposure for some incidence strata")

    if region_only and has_dep:
        yearly = (yearly.assign(w=yearly["aad_t"] * yearly["exposure"])
                  .groupby(["gender", "region", "year"], as_index=False)[["w", "exposure"]].sum())
        yearly["aad_t"] = yearly["w"] / yearly["exposure"]
        yearly = yearly.drop(columns="w")
        keys = ["gender", "region"]

    avg = [(*k, aad_timeavg(g["aad_t"], g["exposure"])) for k, g in yearly.groupby(keys, sort=True)]
    averaged = pd.DataFrame(avg, columns=keys + ["aad"])
    z, mean, sd = standardise(averaged["aad"])
    averaged["aad_std"] = z
    return AADSurface(yearly[keys + ["year", "aad_t", "exposure"]], averaged, mean, sd, tuple(keys))


def load_aad(path: str | Path) -> AADSurface:
    df = pd.read_csv(path)
    if "aad" not in df.columns:
        raise SchemaViolation("AAD file needs an 'aad' column")
    return AADSurface.from_frame(df.drop(columns=[c for c in ("aad_std",) if c in df.columns]))
