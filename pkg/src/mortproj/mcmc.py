"""Posterior sampling for the Poisson-lognormal model.

    D_i ~ Poisson(E_i exp(z_i)),   z_i ~ Normal(x_i' beta, sigma2)

Ordinary coefficients get independent Normal priors.  Each random-walk block
(year effect, year-by-covariate effect) has its first year fixed at zero and
increments ``Normal(psi_k, s_k)``, with ``psi_k ~ Normal(psi0, s_k / m)`` where
``m`` is the number of increments and ``s_k ~ InvGamma``.

One sweep updates, in order:

1. every ``z_i`` by adaptive random-walk Metropolis (independent per cell);
2. ``beta | z`` by an exact Gaussian draw;
3. ``beta`` again with the residuals ``z - X beta`` held fixed (a
   non-centred Metropolis move driven by the Poisson likelihood, which keeps
   mixing fast when ``sigma2`` is small);
4. ``sigma2 | z, beta`` inverse-gamma, then a non-centred log-scale move;
5. ``psi_k`` Gaussian and ``s_k`` inverse-gamma for each random-walk block.

The same engine samples the tempered family
``p_t ∝ (likelihood × prior)^t × reference^(1-t)`` used for marginal
likelihoods.  ``t = 1`` is the posterior.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, special

from .errors import ConvergenceWarning, DiagnosticsUnavailable, InitFailure, SchemaViolation

log = logging.getLogger(__name__)

LOG2PI = float(np.log(2 * np.pi))


@dataclass(frozen=True)
class PriorSet:
    beta_mean: float = 0.0
    beta_var: float = 1e4
    sigma2_shape: float = 1.0
    sigma2_rate: float = 0.1
    kappa_shape: float = 1.0
    kappa_rate: float = 0.001
    psi_mean: float = 0.0
    # drift prior variance is s_k / psi_divisor; None uses the number of increments
    psi_divisor: float | None = None

    def __post_init__(self):
        for name in ("beta_var", "sigma2_shape", "sigma2_rate", "kappa_shape", "kappa_rate"):
            if not getattr(self, name) > 0:
                raise SchemaViolation(f"prior hyperparameter {name} must be positive")
        if self.psi_divisor is not None and not self.psi_divisor > 0:
            raise SchemaViolation("psi_divisor must be positive")


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    iters: int = 20_000
    burnin: int = 10_000
    thin: int = 10
    seed: int | None = None
    fixed_sigma2: float | None = None
    z_bounds: tuple[float, float] = (-30.0, 0.0)
    target_accept: float = 0.44
    noncentred: bool = True
    store_latent: bool | None = None  # None: store when small enough
    threads: int = 1
    rhat_threshold: float = 1.1
    hessian_refresh: int = 50

    def __post_init__(self):
        if self.seed is None:
            raise SchemaViolation("a seed is required")
        if not (self.iters > self.burnin >= 0) or self.thin < 1 or self.chains < 1:
            raise SchemaViolation("need iters > burnin >= 0, thin >= 1, chains >= 1")
        if self.fixed_sigma2 is not None and not self.fixed_sigma2 > 0:
            raise SchemaViolation("fixed_sigma2 must be positive")

    @property
    def kept(self) -> int:
        return (self.iters - self.burnin) // self.thin


# --- problem definition -----------------------------------------------------

@dataclass
class Problem:
    """Numerical form of a model: design, data and prior.

    With ``y`` given, the latent layer is observed (a Gaussian linear model);
    this toy mode exists for exact-evidence checks of the engine.
    """

    X: np.ndarray
    deaths: np.ndarray | None
    exposure: np.ndarray | None
    kappa: tuple[tuple[int, int], ...] = ()
    priors: PriorSet = field(default_factory=PriorSet)
    y: np.ndarray | None = None
    prior_mean: np.ndarray | None = None  # per column, overrides priors.beta_mean
    prior_var: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=float)
        n, p = self.X.shape
        if self.y is None:
            self.deaths = np.asarray(self.deaths, dtype=float)
            self.exposure = np.asarray(self.exposure, dtype=float)
        else:
            self.y = np.asarray(self.y, dtype=float)
        if self.prior_mean is None:
            self.prior_mean = np.full(p, self.priors.beta_mean)
        if self.prior_var is None:
            self.prior_var = np.full(p, self.priors.beta_var)
        self.fixed = np.ones(p, dtype=bool)
        for a, b in self.kappa:
            self.fixed[a:b] = False

    @property
    def gaussian(self) -> bool:
        return self.y is not None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def psi_div(self, k: int) -> float:
        a, b = self.kappa[k]
        return self.priors.psi_divisor if self.priors.psi_divisor is not None else float(b - a)

    @classmethod
    def from_design(cls, design, priors: PriorSet | None = None) -> "Problem":
        priors = priors or PriorSet()
        kappa = tuple((b.start, b.stop) for b in design.kappa_blocks() if b.size > 0)
        return cls(design.X, design.deaths, design.exposure, kappa, priors)


@dataclass
class State:
    z: np.ndarray
    beta: np.ndarray
    sigma2: float
    psi: np.ndarray
    s: np.ndarray

    def copy(self) -> "State":
        return State(self.z.copy(), self.beta.copy(), float(self.sigma2), self.psi.copy(), self.s.copy())


# --- densities ---------------------------------------------------------------

def _log_invgamma(x, a, b):
    return a * np.log(b) - special.gammaln(a) - (a + 1) * np.log(x) - b / x


def _diff(v: np.ndarray) -> np.ndarray:
    """Increments of a path whose first (fixed) value is zero."""
    return np.diff(v, prepend=0.0)


def log_likelihood(prob: Problem, st: State) -> float:
    """Observation log density, with all constants."""
    if prob.gaussian:
        mu = prob.X @ st.beta
        r = prob.y - mu
        return float(-0.5 * prob.n * (LOG2PI + np.log(st.sigma2)) - 0.5 * r @ r / st.sigma2)
    D, E = prob.deaths, prob.exposure
    return float(np.sum(D * (st.z + np.log(E)) - E * np.exp(st.z) - special.gammaln(D + 1)))


def log_prior(prob: Problem, st: State, fixed_sigma2: bool) -> float:
    """Joint prior of (z, beta, sigma2, psi, s) with all constants."""
    pr = prob.priors
    out = 0.0
    if not prob.gaussian:
        r = st.z - prob.X @ st.beta
        out += -0.5 * prob.n * (LOG2PI + np.log(st.sigma2)) - 0.5 * r @ r / st.sigma2
    f = prob.fixed
    d = st.beta[f] - prob.prior_mean[f]
    out += float(np.sum(-0.5 * (LOG2PI + np.log(prob.prior_var[f])) - 0.5 * d * d / prob.prior_var[f]))
    for k, (a, b) in enumerate(prob.kappa):
        m = b - a
        inc = _diff(st.beta[a:b]) - st.psi[k]
        s = st.s[k]
        out += -0.5 * m * (LOG2PI + np.log(s)) - 0.5 * inc @ inc / s
        vpsi = s / prob.psi_div(k)
        out += -0.5 * (LOG2PI + np.log(vpsi)) - 0.5 * (st.psi[k] - pr.psi_mean) ** 2 / vpsi
        out += _log_invgamma(s, pr.kappa_shape, pr.kappa_rate)
    if not fixed_sigma2:
        out += _log_invgamma(st.sigma2, pr.sigma2_shape, pr.sigma2_rate)
    return float(out)


@dataclass
class Reference:
    """Tractable approximation to the posterior used as the path start.

    ``z | beta`` is Normal(X beta + eps_mean, eps_var) cell by cell; the other
    blocks are independent Gaussian or inverse-gamma factors.
    """

    beta_mean: np.ndarray
    beta_prec: np.ndarray
    eps_mean: np.ndarray | None
    eps_var: np.ndarray | None
    sigma2_shape: float | None
    sigma2_rate: float | None
    psi_mean: np.ndarray
    psi_var: np.ndarray
    s_shape: np.ndarray
    s_rate: np.ndarray

    def __post_init__(self):
        self.beta_chol = linalg.cholesky(self.beta_prec, lower=True)
        self._logdet = 2 * np.sum(np.log(np.diag(self.beta_chol)))

    def logpdf(self, prob: Problem, st: State) -> float:
        d = st.beta - self.beta_mean
        q = self.beta_chol.T @ d
        out = -0.5 * (prob.p * LOG2PI - self._logdet) - 0.5 * q @ q
        if self.eps_mean is not None:
            r = st.z - prob.X @ st.beta - self.eps_mean
            out += np.sum(-0.5 * (LOG2PI + np.log(self.eps_var)) - 0.5 * r * r / self.eps_var)
        if self.sigma2_shape is not None:
            out += _log_invgamma(st.sigma2, self.sigma2_shape, self.sigma2_rate)
        for k in range(len(self.psi_mean)):
            out += -0.5 * (LOG2PI + np.log(self.psi_var[k])) - 0.5 * (st.psi[k] - self.psi_mean[k]) ** 2 / self.psi_var[k]
            out += _log_invgamma(st.s[k], self.s_shape[k], self.s_rate[k])
        return float(out)

    def sample(self, prob: Problem, rng: np.random.Generator, sigma2: float | None = None) -> State:
        beta = self.beta_mean + linalg.solve_triangular(self.beta_chol.T, rng.standard_normal(prob.p), lower=False)
        K = len(self.psi_mean)
        psi = self.psi_mean + np.sqrt(self.psi_var) * rng.standard_normal(K)
        s = self.s_rate / rng.gamma(self.s_shape)
        s2 = sigma2 if self.sigma2_shape is None else self.sigma2_rate / rng.gamma(self.sigma2_shape)
        if self.eps_mean is not None:
            z = prob.X @ beta + self.eps_mean + np.sqrt(self.eps_var) * rng.standard_normal(prob.n)
        else:
            z = prob.y.copy()
        return State(z, beta, float(s2), psi, s)


def _ig_moments(mean: float, var: float, inflate: float) -> tuple[float, float]:
    var = max(var * inflate, 1e-300)
    a = mean * mean / var + 2.0
    return a, mean * (a - 1.0)


def fit_reference(draws: "PosteriorDraws", prob: Problem, inflate: float = 1.5) -> Reference:
    """Moment-matched reference distribution from posterior draws."""
    B = draws.beta.reshape(-1, prob.p)
    mean = B.mean(axis=0)
    cov = np.atleast_2d(np.cov(B, rowvar=False)) * inflate
    cov += np.eye(prob.p) * 1e-10 * max(1.0, float(np.trace(cov)) / max(prob.p, 1))
    prec = np.linalg.inv(cov)
    prec = 0.5 * (prec + prec.T)
    eps_mean = eps_var = None
    if not prob.gaussian:
        eps_mean = draws.eps_mean.copy()
        eps_var = np.maximum(draws.eps_var * inflate, 1e-12)
    s2a = s2b = None
    if draws.meta.get("fixed_sigma2") is None:
        s2 = draws.sigma2.ravel()
        s2a, s2b = _ig_moments(float(s2.mean()), float(s2.var()), inflate)
    K = draws.psi.shape[-1]
    psi = draws.psi.reshape(-1, K) if K else np.zeros((1, 0))
    ss = draws.sigma2_kappa.reshape(-1, K) if K else np.zeros((1, 0))
    sa, sb = np.empty(K), np.empty(K)
    for k in range(K):
        sa[k], sb[k] = _ig_moments(float(ss[:, k].mean()), float(ss[:, k].var()), inflate)
    return Reference(mean, prec, eps_mean, eps_var, s2a, s2b, psi.mean(axis=0),
                     np.maximum(psi.var(axis=0) * inflate, 1e-300), sa, sb)


# --- one chain ----------------------------------------------------------------

@dataclass
class ChainOutput:
    beta: np.ndarray
    sigma2: np.ndarray
    psi: np.ndarray
    s: np.ndarray
    z: np.ndarray | None
    integrand: np.ndarray | None
    eps_sum: np.ndarray | None
    eps_sumsq: np.ndarray | None
    accept: dict
    state: State


class _Sweeper:
    def __init__(self, prob: Problem, cfg: SamplerConfig, t: float = 1.0, ref: Reference | None = None):
        if t < 1.0 and ref is None:
            raise SchemaViolation("tempering below 1 needs a reference distribution")
        self.prob, self.cfg, self.t, self.ref = prob, cfg, float(t), ref
        X = prob.X
        self.XtX = X.T @ X
        self.fixed_s2 = cfg.fixed_sigma2 is not None
        self.lo, self.hi = cfg.z_bounds
        if not prob.gaussian:
            self.logE = np.log(prob.exposure)
        self.XtWqX = None
        if ref is not None and t < 1.0:
            self.ref_lin = ref.beta_prec @ ref.beta_mean
            if ref.eps_var is not None:
                self.Wq = 1.0 / ref.eps_var
                self.XtWqX = (X * self.Wq[:, None]).T @ X
        self.K = len(prob.kappa)
        self.Dm = {}
        for k, (a, b) in enumerate(prob.kappa):
            m = b - a
            self.Dm[k] = np.eye(m) - np.eye(m, k=-1)
        self.fixed_prec = np.where(prob.fixed, 1.0 / prob.prior_var, 0.0)
        self.fixed_lin = np.where(prob.fixed, prob.prior_mean / prob.prior_var, 0.0)

    # prior precision and linear term of beta given (psi, s)
    def _beta_prior(self, st: State) -> tuple[np.ndarray, np.ndarray]:
        Q = np.diag(self.fixed_prec)
        lin = self.fixed_lin.copy()
        for k, (a, b) in enumerate(self.prob.kappa):
            D = self.Dm[k]
            Q[a:b, a:b] += D.T @ D / st.s[k]
            lin[b - 1] += st.psi[k] / st.s[k]
        return Q, lin

    def _zlogp(self, z, mu, st: State) -> np.ndarray:
        E = self.prob.exposure
        D = self.prob.deaths
        t = self.t
        out = t * (D * z - E * np.exp(z) - 0.5 * (z - mu) ** 2 / st.sigma2)
        if t < 1.0:
            r = z - mu - self.ref.eps_mean
            out -= (1 - t) * 0.5 * r * r / self.ref.eps_var
        return out

    def update_z(self, st: State, rng, adapt_gain: float | None):
        mu = self.prob.X @ st.beta
        prop = st.z + self.zstep * rng.standard_normal(self.prob.n)
        ok = (prop >= self.lo) & (prop <= self.hi)
        cur = self._zlogp(st.z, mu, st)
        new = np.where(ok, self._zlogp(np.where(ok, prop, st.z), mu, st), -np.inf)
        acc = np.log(rng.uniform(size=self.prob.n)) < new - cur
        st.z = np.where(acc, prop, st.z)
        if adapt_gain is not None:
            self.zstep *= np.exp(adapt_gain * (acc - self.cfg.target_accept))
        return acc

    def update_beta(self, st: State, rng):
        t = self.t
        X = self.prob.X
        Q0, l0 = self._beta_prior(st)
        target = self.prob.y if self.prob.gaussian else st.z
        P = t * (self.XtX / st.sigma2 + Q0)
        b = t * (X.T @ target / st.sigma2 + l0)
        if t < 1.0:
            P += (1 - t) * self.ref.beta_prec
            b += (1 - t) * self.ref_lin
            if self.XtWqX is not None:
                P += (1 - t) * self.XtWqX
                b += (1 - t) * (X.T @ (self.Wq * (st.z - self.ref.eps_mean)))
        L = linalg.cholesky(P, lower=True, check_finite=False)
        mean = linalg.cho_solve((L, True), b, check_finite=False)
        st.beta = mean + linalg.solve_triangular(L.T, rng.standard_normal(self.prob.p), lower=False,
                                                 check_finite=False)

    # non-centred beta move ------------------------------------------------
    def refresh_hessian(self, st: State):
        X = self.prob.X
        w = self.prob.exposure * np.exp(st.z)
        self.XtWX = (X * w[:, None]).T @ X

    def _nc_logp_grad(self, beta, eps, Q0, l0):
        t = self.t
        X = self.prob.X
        eta = X @ beta + eps
        lam = self.prob.exposure * np.exp(eta)
        D = self.prob.deaths
        lp = t * (np.sum(D * eta - lam) - 0.5 * beta @ Q0 @ beta + l0 @ beta)
        g = t * (X.T @ (D - lam) - Q0 @ beta + l0)
        if t < 1.0:
            d = beta - self.ref.beta_mean
            lp -= (1 - t) * 0.5 * d @ self.ref.beta_prec @ d
            g -= (1 - t) * (self.ref.beta_prec @ d)
        return lp, g, eta

    def update_beta_nc(self, st: State, rng, adapt_gain: float | None) -> bool:
        t = self.t
        X = self.prob.X
        Q0, l0 = self._beta_prior(st)
        H = t * (self.XtWX + Q0)
        if t < 1.0:
            H = H + (1 - t) * self.ref.beta_prec
        try:
            L = linalg.cholesky(H, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return False
        eps = st.z - X @ st.beta
        d = self.nc_delta
        c = d * (2 - d)
        lp0, g0, _ = self._nc_logp_grad(st.beta, eps, Q0, l0)
        m0 = st.beta + d * linalg.cho_solve((L, True), g0, check_finite=False)
        prop = m0 + np.sqrt(c) * linalg.solve_triangular(L.T, rng.standard_normal(self.prob.p), lower=False,
                                                          check_finite=False)
        lp1, g1, eta1 = self._nc_logp_grad(prop, eps, Q0, l0)
        acc = False
        if np.all((eta1 >= self.lo) & (eta1 <= self.hi)) and np.isfinite(lp1):
            m1 = prop + d * linalg.cho_solve((L, True), g1, check_finite=False)
            r_fwd = L.T @ (prop - m0)
            r_bwd = L.T @ (st.beta - m1)
            log_r = lp1 - lp0 - 0.5 * (r_bwd @ r_bwd - r_fwd @ r_fwd) / c
            if np.log(rng.uniform()) < log_r:
                st.beta = prop
                st.z = eta1
                acc = True
        else:
            rng.uniform()
        if adapt_gain is not None:
            self.nc_delta = float(np.clip(self.nc_delta * np.exp(adapt_gain * (acc - 0.5)), 1e-3, 1.0))
        return acc

    # variances --------------------------------------------------------------
    def update_sigma2(self, st: State, rng):
        if self.fixed_s2:
            return
        pr = self.prob.priors
        t = self.t
        target = self.prob.y if self.prob.gaussian else st.z
        r = target - self.prob.X @ st.beta
        shape = t * (pr.sigma2_shape + 0.5 * self.prob.n)
        rate = t * (pr.sigma2_rate + 0.5 * r @ r)
        if t < 1.0:
            shape += (1 - t) * self.ref.sigma2_shape
            rate += (1 - t) * self.ref.sigma2_rate
        st.sigma2 = float(rate / rng.gamma(shape))

    def _nc_sigma_logp(self, log_s2, mu, etil):
        t = self.t
        pr = self.prob.priors
        s2 = np.exp(log_s2)
        z = mu + np.sqrt(s2) * etil
        if np.any((z < self.lo) | (z > self.hi)):
            return -np.inf, z
        D, E = self.prob.deaths, self.prob.exposure
        lp = t * (np.sum(D * z - E * np.exp(z)) + _log_invgamma(s2, pr.sigma2_shape, pr.sigma2_rate))
        if t < 1.0:
            r = z - mu - self.ref.eps_mean
            lp += (1 - t) * (-0.5 * np.sum(r * r / self.ref.eps_var) + 0.5 * self.prob.n * log_s2
                             + _log_invgamma(s2, self.ref.sigma2_shape, self.ref.sigma2_rate))
        return lp + log_s2, z

    def update_sigma2_nc(self, st: State, rng, adapt_gain: float | None) -> bool:
        mu = self.prob.X @ st.beta
        etil = (st.z - mu) / np.sqrt(st.sigma2)
        cur = np.log(st.sigma2)
        lp0, _ = self._nc_sigma_logp(cur, mu, etil)
        new = cur + self.s2step * rng.standard_normal()
        lp1, z1 = self._nc_sigma_logp(new, mu, etil)
        acc = bool(np.log(rng.uniform()) < lp1 - lp0)
        if acc:
            st.sigma2 = float(np.exp(new))
            st.z = z1
        if adapt_gain is not None:
            self.s2step *= np.exp(adapt_gain * (acc - self.cfg.target_accept))
        return acc

    def update_kappa_hyper(self, st: State, rng):
        pr = self.prob.priors
        t = self.t
        for k, (a, b) in enumerate(self.prob.kappa):
            m = b - a
            inc = _diff(st.beta[a:b])
            div = self.prob.psi_div(k)
            s = st.s[k]
            prec = t * (m + div) / s
            lin = t * (inc.sum() + div * pr.psi_mean) / s
            if t < 1.0:
                prec += (1 - t) / self.ref.psi_var[k]
                lin += (1 - t) * self.ref.psi_mean[k] / self.ref.psi_var[k]
            st.psi[k] = lin / prec + rng.standard_normal() / np.sqrt(prec)
            dev = inc - st.psi[k]
            shape = t * (pr.kappa_shape + 0.5 * m + 0.5)
            rate = t * (pr.kappa_rate + 0.5 * dev @ dev + 0.5 * div * (st.psi[k] - pr.psi_mean) ** 2)
            if t < 1.0:
                shape += (1 - t) * self.ref.s_shape[k]
                rate += (1 - t) * self.ref.s_rate[k]
            st.s[k] = rate / rng.gamma(shape)

    def log_integrand(self, st: State) -> float:
        lj = log_likelihood(self.prob, st) + log_prior(self.prob, st, self.fixed_s2)
        return lj - self.ref.logpdf(self.prob, st)

    def run(self, st: State, rng, n_iter: int, burnin: int, thin: int, store_z: bool,
            record_integrand: bool = False) -> ChainOutput:
        prob, cfg = self.prob, self.cfg
        poisson = not prob.gaussian
        nc = cfg.noncentred and poisson
        if poisson:
            mu = prob.X @ st.beta
            info = self.t * (prob.exposure * np.exp(st.z) + 1.0 / st.sigma2)
            if self.t < 1.0:
                info = info + (1 - self.t) / self.ref.eps_var
            self.zstep = 2.4 / np.sqrt(info)
            del mu
        self.nc_delta = 1.0
        self.s2step = 0.1
        if nc:
            self.refresh_hessian(st)
        kept = (n_iter - burnin) // thin
        out_beta = np.empty((kept, prob.p))
        out_s2 = np.empty(kept)
        out_psi = np.empty((kept, self.K))
        out_s = np.empty((kept, self.K))
        out_z = np.empty((kept, prob.n)) if (store_z and poisson) else None
        out_h = np.empty(kept) if record_integrand else None
        eps_sum = np.zeros(prob.n) if poisson else None
        eps_sq = np.zeros(prob.n) if poisson else None
        counts = {"z": 0.0, "beta_nc": 0, "sigma2_nc": 0}
        n_post = 0
        j = 0
        for it in range(n_iter):
            adapting = it < burnin
            gain = (it + 1) ** -0.6 if adapting else None
            if poisson:
                acc = self.update_z(st, rng, gain)
            self.update_beta(st, rng)
            if nc:
                if adapting and it % cfg.hessian_refresh == 0:
                    self.refresh_hessian(st)
                a_nc = self.update_beta_nc(st, rng, gain)
            self.update_sigma2(st, rng)
            if nc and not self.fixed_s2:
                a_s2 = self.update_sigma2_nc(st, rng, gain)
            self.update_kappa_hyper(st, rng)
            if not adapting:
                n_post += 1
                if poisson:
                    counts["z"] += acc.mean()
                if nc:
                    counts["beta_nc"] += a_nc
                    if not self.fixed_s2:
                        counts["sigma2_nc"] += a_s2
                if (it - burnin + 1) % thin == 0 and j < kept:
                    out_beta[j] = st.beta
                    out_s2[j] = st.sigma2
                    out_psi[j] = st.psi
                    out_s[j] = st.s
                    if out_z is not None:
                        out_z[j] = st.z
                    if out_h is not None:
                        out_h[j] = self.log_integrand(st)
                    if poisson:
                        e = st.z - prob.X @ st.beta
                        eps_sum += e
                        eps_sq += e * e
                    j += 1
        accept = {k: (v / n_post if n_post else float("nan")) for k, v in counts.items()}
        if not nc:
            accept.pop("beta_nc")
            accept.pop("sigma2_nc")
        elif self.fixed_s2:
            accept.pop("sigma2_nc")
        if not poisson:
            accept.pop("z", None)
        return ChainOutput(out_beta, out_s2, out_psi, out_s, out_z, out_h, eps_sum, eps_sq, accept, st)


# --- initialisation ------------------------------------------------------------

def initial_state(prob: Problem, cfg: SamplerConfig, rng: np.random.Generator, jitter: float = 0.05) -> State:
    """Ridge fit of log crude rates on the non-random-walk columns."""
    lo, hi = cfg.z_bounds
    if prob.gaussian:
        y0 = prob.y
    else:
        y0 = np.log((prob.deaths + 0.5) / prob.exposure)
    X = prob.X[:, prob.fixed]
    beta = np.zeros(prob.p)
    if X.shape[1]:
        A = X.T @ X + 1e-6 * np.eye(X.shape[1]) * max(1.0, np.trace(X.T @ X) / X.shape[1])
        beta[prob.fixed] = np.linalg.solve(A, X.T @ y0)
    beta[prob.fixed] += jitter * rng.standard_normal(int(prob.fixed.sum()))
    K = len(prob.kappa)
    s2 = cfg.fixed_sigma2 if cfg.fixed_sigma2 is not None else 0.01
    if prob.gaussian:
        z = prob.y.copy()
    else:
        span = hi - lo
        z = np.clip(y0 + 0.01 * rng.standard_normal(prob.n), lo + 1e-9 * span, hi - 1e-9 * span)
    st = State(z, beta, float(s2), np.zeros(K), np.full(K, 0.001))
    lp = log_likelihood(prob, st) + log_prior(prob, st, cfg.fixed_sigma2 is not None)
    if not np.isfinite(lp):
        raise InitFailure("log posterior is not finite at the initial state")
    return st


def chain_rngs(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.Philox(ss)) for ss in np.random.SeedSequence(seed).spawn(n)]


def _store_z(prob: Problem, cfg: SamplerConfig) -> bool:
    if cfg.store_latent is not None:
        return cfg.store_latent
    return prob.n * cfg.kept * cfg.chains <= 5_000_000


def _run_one(args) -> ChainOutput:
    prob, cfg, c = args
    rng = chain_rngs(cfg.seed, cfg.chains)[c]
    st = initial_state(prob, cfg, rng)
    return _Sweeper(prob, cfg).run(st, rng, cfg.iters, cfg.burnin, cfg.thin, _store_z(prob, cfg))


# --- posterior container -------------------------------------------------------

@dataclass
class PosteriorDraws:
    beta: np.ndarray  # (chains, draws, coef)
    sigma2: np.ndarray  # (chains, draws)
    psi: np.ndarray  # (chains, draws, blocks)
    sigma2_kappa: np.ndarray  # (chains, draws, blocks)
    z: np.ndarray | None
    eps_mean: np.ndarray | None
    eps_var: np.ndarray | None
    columns: tuple[str, ...]
    kappa_terms: tuple[str, ...]
    meta: dict
    report: dict | None = None

    @property
    def n_chains(self) -> int:
        return self.beta.shape[0]

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0] * self.beta.shape[1]

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((self.n_draws,) + a.shape[2:])

    def scalars(self) -> dict[str, np.ndarray]:
        """Every scalar parameter as a (chains, draws) array."""
        out = {c: self.beta[..., j] for j, c in enumerate(self.columns)}
        out["sigma2"] = self.sigma2
        for k, name in enumerate(self.kappa_terms):
            out[f"psi[{name}]"] = self.psi[..., k]
            out[f"sigma2_kappa[{name}]"] = self.sigma2_kappa[..., k]
        return out

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("beta", "sigma2", "psi", "sigma2_kappa", "z", "eps_mean", "eps_var"):
            arr = getattr(self, name)
            if arr is not None:
                np.save(d / f"{name}.npy", np.ascontiguousarray(arr), allow_pickle=False)
        meta = {"columns": list(self.columns), "kappa_terms": list(self.kappa_terms),
                "meta": self.meta, "report": self.report}
        (d / "draws.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=_jsonable) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "PosteriorDraws":
        d = Path(directory)
        meta = json.loads((d / "draws.json").read_text())

        def opt(name):
            p = d / f"{name}.npy"
            return np.load(p, allow_pickle=False) if p.exists() else None

        return cls(opt("beta"), opt("sigma2"), opt("psi"), opt("sigma2_kappa"), opt("z"),
                   opt("eps_mean"), opt("eps_var"), tuple(meta["columns"]), tuple(meta["kappa_terms"]),
                   meta["meta"], meta.get("report"))


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _combine(outs: Sequence[ChainOutput], prob: Problem, cfg: SamplerConfig, columns, kappa_terms,
             extra_meta: dict | None = None) -> PosteriorDraws:
    beta = np.stack([o.beta for o in outs])
    s2 = np.stack([o.sigma2 for o in outs])
    psi = np.stack([o.psi for o in outs])
    s = np.stack([o.s for o in outs])
    z = np.stack([o.z for o in outs]) if outs[0].z is not None else None
    eps_mean = eps_var = None
    if outs[0].eps_sum is not None:
        n = sum(len(o.sigma2) for o in outs)
        tot = sum(o.eps_sum for o in outs)
        sq = sum(o.eps_sumsq for o in outs)
        eps_mean = tot / n
        eps_var = np.maximum(sq / n - eps_mean**2, 0.0)
    meta = {"seed": cfg.seed, "chains": cfg.chains, "iters": cfg.iters, "burnin": cfg.burnin,
            "thin": cfg.thin, "fixed_sigma2": cfg.fixed_sigma2, "z_bounds": list(cfg.z_bounds),
            "noncentred": cfg.noncentred, "priors": asdict(prob.priors),
            "accept": [o.accept for o in outs]}
    if extra_meta:
        meta.update(extra_meta)
    return PosteriorDraws(beta, s2, psi, s, z, eps_mean, eps_var, tuple(columns), tuple(kappa_terms), meta)


def sample_problem(prob: Problem, cfg: SamplerConfig, columns: Sequence[str] | None = None,
                   kappa_terms: Sequence[str] | None = None, diagnose: bool = True,
                   extra_meta: dict | None = None) -> PosteriorDraws:
    columns = columns or [f"b{j}" for j in range(prob.p)]
    kappa_terms = kappa_terms or [f"k{j}" for j in range(len(prob.kappa))]
    jobs = [(prob, cfg, c) for c in range(cfg.chains)]
    if cfg.threads > 1 and cfg.chains > 1:
        with ProcessPoolExecutor(max_workers=min(cfg.threads, cfg.chains)) as ex:
            outs = list(ex.map(_run_one, jobs))
    else:
        outs = [_run_one(j) for j in jobs]
    draws = _combine(outs, prob, cfg, columns, kappa_terms, extra_meta)
    if diagnose:
        draws.report = diagnostics(draws)
        bad = {k: v for k, v in (draws.report["rhat"] or {}).items() if v is not None and v > cfg.rhat_threshold}
        draws.meta["converged"] = not bad
        if bad:
            worst = max(bad, key=bad.get)
            warnings.warn(f"{len(bad)} parameters have split-Rhat above {cfg.rhat_threshold} "
                          f"(worst {worst}: {bad[worst]:.3f})", ConvergenceWarning, stacklevel=2)
    return draws


def sample(spec, panel, covariates, priors: PriorSet | None, config: SamplerConfig) -> PosteriorDraws:
    """Fit ``spec`` to ``panel`` and return posterior draws with diagnostics."""
    from .spec import build_design

    design = build_design(spec, panel, covariates)
    prob = Problem.from_design(design, priors)
    kappa = [b.term for b in design.kappa_blocks() if b.size > 0]
    draws = sample_problem(prob, config, design.columns, kappa,
                           extra_meta={"spec": spec.to_dict(), "years": list(design.years)})
    draws.design = design
    return draws


def fitted_rate(draws: PosteriorDraws, x_row: np.ndarray) -> dict:
    """Posterior summary of ``exp(mu + sigma2 / 2)`` for one design row."""
    mu = draws.flat("beta") @ np.asarray(x_row, dtype=float)
    theta = np.exp(mu + 0.5 * draws.flat("sigma2"))
    lo, hi = np.quantile(theta, [0.025, 0.975])
    return {"mean": float(theta.mean()), "lo95": float(lo), "hi95": float(hi)}


def fitted_rates(draws: PosteriorDraws, X: np.ndarray) -> np.ndarray:
    """Per-draw fitted rates for every row of ``X`` (draws x cells)."""
    return np.exp(draws.flat("beta") @ np.asarray(X).T + 0.5 * draws.flat("sigma2")[:, None])


# --- diagnostics -----------------------------------------------------------------

def _autocorr(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    f = np.fft.rfft(x - x.mean(axis=-1, keepdims=True), n=2 * n)
    ac = np.fft.irfft(f * np.conj(f), n=2 * n)[..., :n]
    return ac / n


def ess(x: np.ndarray) -> float:
    """Effective sample size over (chains, draws) with Geyer's initial monotone sequence."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = _autocorr(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    var_plus = W * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if not var_plus > 0:
        return float(m * n)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, truncated at the first non-positive pair, then made monotone
    pairs = rho[: 2 * (n // 2)].reshape(-1, 2).sum(axis=1)
    stop = np.flatnonzero(pairs <= 0)
    pairs = pairs[: stop[0]] if stop.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)


def split_rhat(x: np.ndarray) -> float:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    if m < 2:
        raise DiagnosticsUnavailable("split-Rhat needs at least two chains")
    h = n // 2
    if h < 2:
        raise DiagnosticsUnavailable("too few draws per chain for split-Rhat")
    parts = np.concatenate([x[:, :h], x[:, n - h:]], axis=0)
    means = parts.mean(axis=1)
    W = parts.var(axis=1, ddof=1).mean()
    B = h * means.var(ddof=1)
    if W <= 0:
        return 1.0 if B <= 0 else float("inf")
    var_plus = (h - 1) / h * W + B / h
    return float(np.sqrt(var_plus / W))


def diagnostics(draws: PosteriorDraws) -> dict:
    """Split-Rhat and ESS per scalar parameter plus Metropolis acceptance rates."""
    rhat, ess_ = {}, {}
    rhat_error = None
    for name, arr in draws.scalars().items():
        ess_[name] = ess(arr)
        try:
            rhat[name] = split_rhat(arr)
        except DiagnosticsUnavailable as exc:
            rhat_error = exc.code
            rhat[name] = None
    accept = {}
    for c, acc in enumerate(draws.meta.get("accept", [])):
        for k, v in acc.items():
            accept.setdefault(k, []).append(v)
    return {"rhat": None if rhat_error else rhat, "ess": ess_, "accept": accept, "rhat_error": rhat_error}
