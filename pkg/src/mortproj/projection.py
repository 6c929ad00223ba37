"""Posterior-predictive projection of mortality rates beyond the fitted years.

Non-time effects are reused draw by draw; each random-walk block is continued
from its last fitted value with the draw's own drift and innovation variance.
All randomness comes from fixed sub-streams of one seed, so two projections
of the same frame with the same seed share their innovations (common random
numbers), which is what the delay scenarios rely on.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import pandas as pd

from .core import KEY_ORDER, MortalityPanel, display
from .errors import BadHorizon, SchemaViolation, ShareViolation
from .mcmc import PosteriorDraws
from .spec import CovariateTable, DesignMatrix

# sub-stream labels
_KAPPA, _THETA, _COUNTS = 2, 3, 4


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def simulate_walk(anchor, psi, sigma2_kappa, horizon: int, rng: np.random.Generator) -> np.ndarray:
    """Random walk with drift; column 0 is the anchor, column h is step h."""
    if horizon < 1:
        raise BadHorizon(f"horizon must be at least 1, got {horizon}")
    anchor = np.atleast_1d(np.asarray(anchor, dtype=float))
    psi = np.broadcast_to(np.asarray(psi, dtype=float), anchor.shape)
    sd = np.sqrt(np.broadcast_to(np.asarray(sigma2_kappa, dtype=float), anchor.shape))
    eps = rng.standard_normal((anchor.size, horizon))
    steps = psi[:, None] + sd[:, None] * eps
    return np.concatenate([anchor[:, None], anchor[:, None] + np.cumsum(steps, axis=1)], axis=1)


def _draw_index(n: int, max_draws: int | None) -> np.ndarray:
    if max_draws is None or max_draws >= n:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, max_draws).round().astype(int))


def extrapolate_kappa(draws: PosteriorDraws, design: DesignMatrix, horizon: int, seed: int,
                      max_draws: int | None = None) -> dict[str, np.ndarray]:
    """Per-draw paths ``(draws, horizon + 1)`` for every random-walk block."""
    if horizon < 1:
        raise BadHorizon(f"horizon must be at least 1, got {horizon}")
    idx = _draw_index(draws.n_draws, max_draws)
    B = draws.flat("beta")[idx]
    psi = draws.flat("psi")[idx]
    s = draws.flat("sigma2_kappa")[idx]
    rng = _rng(seed, _KAPPA)
    out = {}
    k = 0
    for b in design.kappa_blocks():
        if b.size == 0:
            continue
        anchor = B[:, b.stop - 1]
        out[b.term] = simulate_walk(anchor, psi[:, k], s[:, k], horizon, rng)
        k += 1
    return out


@dataclass
class ProjectionSurface:
    keys: pd.DataFrame
    theta: np.ndarray  # (draws, cells)
    exposure: np.ndarray | None
    seed: int
    last_observed: int
    counts: np.ndarray | None = field(default=None, repr=False)

    @property
    def expected(self) -> np.ndarray:
        if self.exposure is None:
            raise SchemaViolation("projection has no exposures")
        return self.theta * self.exposure[None, :]

    def summary(self) -> pd.DataFrame:
        df = self.keys.copy()
        lo, hi = np.quantile(self.theta, [0.025, 0.975], axis=0)
        df["mean"] = self.theta.mean(axis=0)
        df["lo95"] = lo
        df["hi95"] = hi
        if self.exposure is not None:
            ed = self.expected
            df["exposure"] = self.exposure
            df["expected_deaths"] = ed.mean(axis=0)
            dlo, dhi = np.quantile(ed, [0.025, 0.975], axis=0)
            df["expected_lo95"] = dlo
            df["expected_hi95"] = dhi
        if self.counts is not None:
            clo, chi = np.quantile(self.counts, [0.025, 0.975], axis=0)
            df["deaths_lo95"] = clo
            df["deaths_hi95"] = chi
        return df

    def to_csv(self, path: str | Path) -> None:
        df = self.summary()
        for c in ("mean", "lo95", "hi95"):
            df[f"{c}_display"] = display(df[c], sig=4)
        if "expected_deaths" in df:
            df["expected_deaths_display"] = display(df["expected_deaths"], 2)
        df.to_csv(path, index=False, float_format="%.17g")

    def save_draws(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        np.save(d / "theta.npy", np.ascontiguousarray(self.theta), allow_pickle=False)
        if self.exposure is not None:
            np.save(d / "exposure.npy", self.exposure, allow_pickle=False)
        self.keys.to_csv(d / "keys.csv", index=False)

    @classmethod
    def load_draws(cls, directory: str | Path, seed: int = 0, last_observed: int = 0) -> "ProjectionSurface":
        d = Path(directory)
        e = d / "exposure.npy"
        return cls(pd.read_csv(d / "keys.csv"), np.load(d / "theta.npy"),
                   np.load(e) if e.exists() else None, seed, last_observed)


def projection_frame(design: DesignMatrix, years) -> pd.DataFrame:
    """Every non-year key of the fitted frame crossed with ``years``, in frozen order."""
    dims = [c for c in design.keys.columns if c != "year"]
    base = design.keys[dims].drop_duplicates()
    yrs = pd.DataFrame({"year": [int(y) for y in years]})
    frame = base.merge(yrs, how="cross")
    cols = [d for d in KEY_ORDER if d in frame.columns]
    return frame.sort_values(cols, kind="mergesort").reset_index(drop=True)[cols]


def project_rates(draws: PosteriorDraws, design: DesignMatrix, frame: pd.DataFrame, seed: int,
                  exposure: np.ndarray | None = None, max_draws: int | None = None,
                  shifts: Mapping[str, np.ndarray] | None = None, carry_forward: bool = False,
                  counts: bool = False, covariates: CovariateTable | None = None) -> ProjectionSurface:
    """Posterior-predictive rates for the cells in ``frame``.

    Years up to the last fitted year use the fitted random-walk values;
    later years use extrapolated paths.  ``shifts`` adds raw-unit offsets to
    named covariates cell by cell before standardisation.
    """
    years = frame["year"].to_numpy(dtype=int)
    T = design.years[-1]
    first = design.years[0]
    if np.any(years < first):
        raise SchemaViolation(f"projection years must not precede {first}")
    H = int(years.max() - T)
    idx = _draw_index(draws.n_draws, max_draws)
    B = draws.flat("beta")[idx]
    s2 = draws.flat("sigma2")[idx]
    Xf = design.rows(frame, covariates, include_kappa=False, shifts=shifts, carry_forward=carry_forward)
    mu = B @ Xf.T
    paths = extrapolate_kappa(draws, design, H, seed, max_draws) if H >= 1 else {}
    for b in design.kappa_blocks():
        if b.size == 0:
            continue
        mult = design.multiplier_values(b, frame, covariates, shifts, carry_forward)
        fitted = np.concatenate([np.zeros((len(idx), 1)), B[:, b.slice]], axis=1)
        kap = np.empty((len(idx), len(frame)))
        past = years <= T
        if past.any():
            kap[:, past] = fitted[:, years[past] - first]
        if (~past).any():
            kap[:, ~past] = paths[b.term][:, years[~past] - T]
        mu += kap * mult[None, :]
    xi = _rng(seed, _THETA).standard_normal(mu.shape)
    theta = np.exp(mu + np.sqrt(s2)[:, None] * xi)
    if exposure is not None:
        exposure = np.asarray(exposure, dtype=float)
        if exposure.shape != (len(frame),) or np.any(exposure <= 0):
            raise SchemaViolation("projection exposures must be positive, one per cell")
    cnt = None
    if counts:
        if exposure is None:
            raise SchemaViolation("count intervals need exposures")
        cnt = _rng(seed, _COUNTS).poisson(theta * exposure[None, :])
    return ProjectionSurface(frame.reset_index(drop=True), theta, exposure, seed, T, cnt)


# --- population ----------------------------------------------------------------------

def base_year_shares(panel: MortalityPanel, year: int | None = None) -> pd.DataFrame:
    """Deprivation shares of exposure within each (age, gender, region) in ``year``."""
    if "deprivation" not in panel.dims:
        raise SchemaViolation("panel has no deprivation dimension")
    year = panel.years[-1] if year is None else year
    df = panel.frame[panel.frame["year"] == year]
    if df.empty:
        raise SchemaViolation(f"panel has no cells in {year}")
    grp = ["age_group", "gender", "region"]
    tot = df.groupby(grp)["exposure"].transform("sum")
    out = df[grp + ["deprivation"]].copy()
    out["share"] = df["exposure"].to_numpy() / tot.to_numpy()
    return out.reset_index(drop=True)


def split_population(pop: pd.DataFrame, shares: pd.DataFrame, tol: float = 1e-9) -> pd.DataFrame:
    """Split (age, gender, region, year) exposures by frozen deprivation shares."""
    grp = ["age_group", "gender", "region"]
    sums = shares.groupby(grp)["share"].sum()
    bad = (sums - 1.0).abs() > tol
    if bad.any():
        raise ShareViolation(f"deprivation shares do not sum to one for {sums[bad].index[0]}")
    if (shares["share"] < 0).any():
        raise ShareViolation("negative deprivation share")
    if (pop["exposure"] <= 0).any():
        raise SchemaViolation("population exposures must be positive")
    merged = pop.merge(shares, on=grp, how="inner")
    if merged.groupby(grp + ["year"]).ngroups != pop.groupby(grp + ["year"]).ngroups:
        raise ShareViolation("shares do not cover every population stratum")
    merged["exposure"] = merged["exposure"] * merged["share"]
    cols = [d for d in KEY_ORDER if d in merged.columns]
    return merged.drop(columns="share").sort_values(cols, kind="mergesort").reset_index(drop=True)


def load_population(path: str | Path, schema) -> pd.DataFrame:
    from .core import _GENDER_ALIASES, _map_levels

    df = pd.read_csv(path)
    need = {"age_group", "gender", "region", "year", "exposure"}
    if not need.issubset(df.columns):
        raise SchemaViolation(f"population file needs columns {sorted(need)}")
    df["age_group"] = _map_levels(df["age_group"], [b.label for b in schema.age_groups], "age_group")
    df["region"] = _map_levels(df["region"], list(schema.regions), "region")
    df["gender"] = df["gender"].map(lambda v: _GENDER_ALIASES.get(str(v).strip().lower(), str(v)))
    if "deprivation" in df.columns:
        df["deprivation"] = df["deprivation"].astype(int)
    df["year"] = df["year"].astype(int)
    return df


def frame_exposure(frame: pd.DataFrame, pop: pd.DataFrame) -> np.ndarray:
    """Exposure for each row of ``frame`` looked up in ``pop``."""
    cols = [c for c in frame.columns if c in pop.columns and c != "exposure"]
    merged = frame.merge(pop[cols + ["exposure"]], on=cols, how="left")
    if merged["exposure"].isna().any():
        row = merged[merged["exposure"].isna()].iloc[0][cols].to_dict()
        raise SchemaViolation(f"population lacks exposure for {row}")
    return merged["exposure"].to_numpy(dtype=float)


def frozen_exposure(panel: MortalityPanel, frame: pd.DataFrame) -> np.ndarray:
    """Exposure held at the last fitted year for every projected cell."""
    last = panel.frame[panel.frame["year"] == panel.years[-1]].drop(columns=["year", "deaths"])
    return frame_exposure(frame, last)
