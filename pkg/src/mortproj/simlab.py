"""Synthetic panels from known parameters, and brute-force posterior oracles."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
import pandas as pd
from scipy import special

from .core import ENGLISH_REGIONS, AgeBand, MortalityPanel, PanelSchema, frame_from_records
from .errors import OracleFailure, SchemaViolation
from .spec import Covariate, CovariateTable, ModelSpec, build_design

FEMALE_LUNG_TERMS = ("intercept", "age", "region", "deprivation", "aad", "deprivation:age",
                     "region:age", "period", "period:aad", "region:aad", "ns")

# prior-ish scale of the free parameters drawn when a term has no explicit values
DEFAULT_SCALE = {"age": 0.4, "region": 0.1, "deprivation": 0.15, "gender": 0.2, "aad": 0.05,
                 "ns": -0.08, "interaction": 0.03}


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape and true parameters of a synthetic panel.

    ``coefficients`` maps a term to its free-parameter values (in design
    order); terms left out are drawn at random from the seed.  Random-walk
    terms are simulated from ``psi`` and ``sigma2_kappa`` instead.
    ``extra_covariates`` adds pure-noise covariates keyed like AAD.
    """

    n_age: int = 4
    n_region: int = 3
    n_deprivation: int | None = 5
    n_years: int = 10
    first_year: int = 2001
    first_age: int = 55
    cause: str = "lung"
    gender: str = "female"
    terms: tuple[str, ...] = FEMALE_LUNG_TERMS
    coefficients: Mapping[str, tuple[float, ...]] = field(default_factory=dict)
    intercept: float = -7.0
    sigma2: float = 0.0068
    psi: Mapping[str, float] = field(default_factory=lambda: {"period": -0.02, "period:aad": 0.004})
    sigma2_kappa: Mapping[str, float] = field(default_factory=lambda: {"period": 4e-4, "period:aad": 1e-4})
    exposure: float = 1e5
    exposure_spread: float = 0.2
    extra_covariates: tuple[str, ...] = ()
    ns_lead_years: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "extra_covariates", tuple(self.extra_covariates))
        object.__setattr__(self, "coefficients", {k: tuple(float(x) for x in np.atleast_1d(v))
                                                  for k, v in dict(self.coefficients).items()})
        if min(self.n_age, self.n_region, self.n_years) < 1:
            raise SchemaViolation("level counts must be positive")
        if self.n_region > len(ENGLISH_REGIONS):
            raise SchemaViolation("at most nine regions")
        if self.sigma2 < 0 or any(v < 0 for v in self.sigma2_kappa.values()):
            raise SchemaViolation("variances must be non-negative")
        if not self.exposure > 0:
            raise SchemaViolation("exposure must be positive")
        vals = [self.intercept, self.sigma2, *self.psi.values(), *self.sigma2_kappa.values()]
        vals += [x for v in self.coefficients.values() for x in v]
        if not np.all(np.isfinite(vals)):
            raise SchemaViolation("generator parameters must be finite")

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(self.cause, self.gender, self.terms)

    def schema(self) -> PanelSchema:
        ages = tuple(AgeBand.parse(f"{self.first_age + 5 * i}-{self.first_age + 5 * i + 4}")
                     for i in range(self.n_age))
        return PanelSchema(self.cause, ages, ENGLISH_REGIONS[: self.n_region], (self.gender,),
                           (self.first_year, self.first_year + self.n_years - 1), self.n_deprivation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["terms"] = list(self.terms)
        d["extra_covariates"] = list(self.extra_covariates)
        d["coefficients"] = {k: list(v) for k, v in self.coefficients.items()}
        d["psi"] = dict(self.psi)
        d["sigma2_kappa"] = dict(self.sigma2_kappa)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "GeneratorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SchemaViolation(f"unknown generator keys {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def read(cls, path: str | Path) -> "GeneratorConfig":
        path = Path(path)
        if path.suffix == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:
                import tomli as tomllib
            with path.open("rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))


@dataclass
class Synthetic:
    panel: MortalityPanel
    covariates: CovariateTable
    truth: dict
    config: GeneratorConfig
    log_rate: np.ndarray | None = field(default=None, repr=False)  # latent z per cell, panel order

    @property
    def spec(self) -> ModelSpec:
        return self.config.spec

    def write(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.panel.to_csv(d / "panel.csv")
        self.panel.schema.write_json(d / "schema.json")
        self.covariates.save(d / "covariates")
        self.spec.write(d / "spec.json")
        (d / "generator.json").write_text(json.dumps(self.config.to_dict(), indent=2, sort_keys=True) + "\n")
        (d / "truth.json").write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n")
        if self.log_rate is not None:
            self.panel.keys().assign(log_rate=self.log_rate).to_csv(d / "truth_log_rate.csv", index=False,
                                                                    float_format="%.17g")


def _covariates(cfg: GeneratorConfig, keys: pd.DataFrame, rng: np.random.Generator) -> CovariateTable:
    has_dep = cfg.n_deprivation is not None
    strata = ["gender"] + (["deprivation"] if has_dep else []) + ["region"]
    sk = keys[strata].drop_duplicates().sort_values(strata).reset_index(drop=True)
    items = {}
    aad = sk.assign(value=70.0 + 1.5 * rng.standard_normal(len(sk)))
    items["aad"] = Covariate("aad", tuple(strata), aad)
    # lagged smoking data reaches well past the panel, as real NS series do
    years = pd.DataFrame({"year": range(cfg.first_year, cfg.first_year + cfg.n_years + cfg.ns_lead_years)})
    ak = keys[["gender", "age_group"]].drop_duplicates().merge(years, how="cross")
    ak = ak.sort_values(["gender", "age_group", "year"]).reset_index(drop=True)
    trend = 0.45 + 0.012 * (ak["year"] - cfg.first_year) + 0.03 * (ak["age_group"] - 1)
    ns = ak.assign(value=np.clip(trend + 0.02 * rng.standard_normal(len(ak)), 0.01, 0.99))
    items["ns"] = Covariate("ns", ("gender", "age_group", "year"), ns)
    for name in cfg.extra_covariates:
        items[name] = Covariate(name, tuple(strata), sk.assign(value=rng.standard_normal(len(sk))))
    return CovariateTable(items)


def generate(cfg: GeneratorConfig) -> Synthetic:
    """Simulate a panel from the model's generative direction."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.seed)))
    schema = cfg.schema()
    dims = schema.dims
    grids = [schema.levels(d) for d in dims]
    keys = pd.MultiIndex.from_product(grids, names=dims).to_frame(index=False)
    E = cfg.exposure * np.exp(cfg.exposure_spread * rng.standard_normal(len(keys)))
    E = np.round(E, 6)
    covs = _covariates(cfg, keys, rng)

    placeholder = keys.assign(deaths=0, exposure=E)
    design = build_design(cfg.spec, MortalityPanel(placeholder, schema, dims), covs)
    beta = np.zeros(design.n_coef)
    kappa_paths = {}
    for b in design.blocks:
        if b.term in cfg.coefficients:
            v = np.asarray(cfg.coefficients[b.term], dtype=float)
            if v.size != b.size:
                raise SchemaViolation(f"term {b.term!r} needs {b.size} values, got {v.size}")
            beta[b.slice] = v
        elif b.is_kappa:
            m = b.size
            steps = cfg.psi.get(b.term, 0.0) + np.sqrt(cfg.sigma2_kappa.get(b.term, 0.0)) * rng.standard_normal(m)
            beta[b.slice] = np.cumsum(steps)
        elif b.term == "intercept":
            beta[b.slice] = cfg.intercept
        elif ":" in b.term:
            beta[b.slice] = DEFAULT_SCALE["interaction"] * rng.standard_normal(b.size)
        elif b.factors[0] in ("age", "region", "deprivation", "gender"):
            beta[b.slice] = DEFAULT_SCALE[b.term] * rng.standard_normal(b.size)
        else:
            # numeric slope: fixed sign, jittered magnitude
            scale = DEFAULT_SCALE.get(b.term, 0.05)
            beta[b.slice] = scale * (1.0 + 0.2 * rng.standard_normal(b.size))
        if b.is_kappa:
            kappa_paths[b.term] = np.concatenate([[0.0], beta[b.slice]]).tolist()
    mu = design.X @ beta
    z = mu + np.sqrt(cfg.sigma2) * rng.standard_normal(len(mu))
    D = rng.poisson(E * np.exp(z))
    raw = keys.assign(deaths=D, exposure=E)
    panel = frame_from_records(raw, schema)
    truth = {
        "beta": dict(zip(design.columns, beta.tolist())),
        "beta_vector": beta.tolist(),
        "sigma2": cfg.sigma2,
        "psi": dict(cfg.psi),
        "sigma2_kappa": dict(cfg.sigma2_kappa),
        "kappa_paths": kappa_paths,
        "spec": cfg.spec.to_dict(),
        "covariate_moments": {n: [c.mean, c.sd] for n, c in design.covariates.items.items()
                              if c.mean is not None},
    }
    return Synthetic(panel, covs, truth, cfg, z)


# --- oracles -----------------------------------------------------------------

@dataclass(frozen=True)
class GridPosterior:
    x: np.ndarray
    density: np.ndarray  # normalised, integrates to 1 by the trapezoid rule
    cdf_values: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.trapezoid(self.x * self.density, self.x))

    @property
    def sd(self) -> float:
        m = self.mean
        return float(np.sqrt(np.trapezoid((self.x - m) ** 2 * self.density, self.x)))

    @property
    def mode(self) -> float:
        return float(self.x[np.argmax(self.density)])

    def cdf(self, v) -> np.ndarray:
        return np.interp(v, self.x, self.cdf_values, left=0.0, right=1.0)

    def ks_distance(self, samples) -> float:
        s = np.sort(np.asarray(samples, dtype=float))
        n = s.size
        F = self.cdf(s)
        return float(max(np.max(np.arange(1, n + 1) / n - F), np.max(F - np.arange(n) / n)))


def grid_posterior(logdens: Callable[[np.ndarray], np.ndarray], lo: float, hi: float,
                   n: int = 10_000, retries: int = 3, edge_tol: float = 1e-12) -> GridPosterior:
    """Normalised density of a 1-D log density on an ``n``-point grid.

    If the grid truncates noticeable mass, the interval is doubled around its
    centre and the evaluation retried.
    """
    for _ in range(retries + 1):
        x = np.linspace(lo, hi, n)
        with np.errstate(over="ignore", invalid="ignore"):
            ld = np.asarray(logdens(x), dtype=float)
        finite = np.isfinite(ld)
        if finite.any():
            top = ld[finite].max()
            dens = np.where(finite, np.exp(ld - top), 0.0)
            if dens[0] < edge_tol and dens[-1] < edge_tol and np.count_nonzero(dens > 1e-3) > 20:
                area = np.trapezoid(dens, x)
                dens = dens / area
                cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(x))])
                return GridPosterior(x, dens, cdf / cdf[-1])
            if np.count_nonzero(dens > 1e-3) <= 20 and dens[0] < edge_tol and dens[-1] < edge_tol:
                # mass too concentrated: zoom in on it
                keep = np.flatnonzero(dens > edge_tol)
                lo, hi = x[max(keep[0] - 1, 0)], x[min(keep[-1] + 1, n - 1)]
                continue
        c, w = 0.5 * (lo + hi), hi - lo
        lo, hi = c - w, c + w
    raise OracleFailure("posterior grid could not be fitted to the mass")


def _gh_loglik(D, E, mu, sigma2, n_nodes=40):
    """log ∫ Poisson(D | E e^z) Normal(z | mu, sigma2) dz by adaptive Gauss-Hermite.

    ``mu`` may be any shape broadcastable against the cell arrays.
    """
    D = np.asarray(D, dtype=float)
    E = np.asarray(E, dtype=float)
    const = D * np.log(E) - special.gammaln(D + 1)
    if sigma2 == 0:
        return D * mu - E * np.exp(mu) + const
    # mode of the integrand in z by Newton
    z = np.broadcast_to(np.log((D + 0.5) / E), np.broadcast(mu, D).shape).copy()
    for _ in range(50):
        g = D - E * np.exp(z) - (z - mu) / sigma2
        h = -E * np.exp(z) - 1.0 / sigma2
        step = g / h
        z = z - step
        if np.max(np.abs(step)) < 1e-12:
            break
    c = E * np.exp(z) + 1.0 / sigma2
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    scale = np.sqrt(2.0 / c)
    zz = z[..., None] + scale[..., None] * x
    g = D[..., None] * zz - E[..., None] * np.exp(zz) - 0.5 * (zz - np.asarray(mu)[..., None]) ** 2 / sigma2
    m = g.max(axis=-1, keepdims=True)
    val = np.log(np.sum(w * np.exp(x * x + g - m), axis=-1)) + m[..., 0]
    return val + np.log(scale) - 0.5 * np.log(2 * np.pi * sigma2) + const


def oracle_posterior_1d(deaths, exposure, sigma2: float = 0.0, prior_mean: float = 0.0,
                        prior_var: float | None = None, x=None, offset=None,
                        n: int = 10_000) -> GridPosterior:
    """Posterior of a single coefficient ``b`` with ``mu_i = x_i b + offset_i``.

    The latent log-rates are integrated out cell by cell.  ``prior_var=None``
    means a flat prior.
    """
    D = np.asarray(deaths, dtype=float)
    E = np.asarray(exposure, dtype=float)
    if D.size > 5:
        raise SchemaViolation("the 1-D oracle is meant for at most five cells")
    x = np.ones_like(D) if x is None else np.asarray(x, dtype=float)
    off = np.zeros_like(D) if offset is None else np.asarray(offset, dtype=float)

    def logdens(b):
        mu = b[:, None] * x[None, :] + off[None, :]
        ll = _gh_loglik(D[None, :], E[None, :], mu, sigma2).sum(axis=1)
        if prior_var is not None:
            ll = ll - 0.5 * (b - prior_mean) ** 2 / prior_var
        return ll

    # rough centre and width from a pooled Poisson fit
    xm = np.mean(x) if np.mean(x) != 0 else 1.0
    centre = (np.log((D.sum() + 0.5) / E.sum()) - off.mean()) / xm
    width = 10.0 * (1.0 / np.sqrt(D.sum() + 1.0) + np.sqrt(sigma2)) / abs(xm) + 1.0
    return grid_posterior(logdens, centre - width, centre + width, n=n)


def poisson_glm(X, deaths, exposure, iters: int = 100, tol: float = 1e-12):
    """Maximum-likelihood Poisson log-linear fit by iteratively reweighted least squares."""
    X = np.asarray(X, dtype=float)
    D = np.asarray(deaths, dtype=float)
    E = np.asarray(exposure, dtype=float)
    beta = np.linalg.lstsq(X, np.log((D + 0.5) / E), rcond=None)[0]
    for _ in range(iters):
        lam = E * np.exp(X @ beta)
        H = (X * lam[:, None]).T @ X
        step = np.linalg.solve(H, X.T @ (D - lam))
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    lam = E * np.exp(X @ beta)
    cov = np.linalg.inv((X * lam[:, None]).T @ X)
    return beta, cov
