"""Model comparison: DIC, marginal likelihood and greedy forward selection.

The log marginal likelihood is computed by thermodynamic integration along
the path ``p_t ∝ (likelihood × prior)^t × q^(1-t)``, where ``q`` is a
normalised Gaussian/inverse-gamma approximation fitted to a pilot posterior
run.  Then

    log Z = ∫_0^1 E_t[log likelihood + log prior - log q] dt,

and the integrand has low variance along the whole path.  Starting the path
at the prior instead is hopeless with Normal(0, 1e4) coefficient priors: the
likelihood at prior draws is astronomically small.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import special

from .core import display
from .errors import DICFailure, MarginalUnstable, SchemaViolation
from .mcmc import (PosteriorDraws, PriorSet, Problem, SamplerConfig, State, _Sweeper, ess,
                   fit_reference, initial_state, sample_problem)
from .spec import CovariateTable, ModelSpec, build_design

log = logging.getLogger(__name__)


# --- DIC -------------------------------------------------------------------------

def _stable_mean(a: np.ndarray, axis: int = 0) -> np.ndarray:
    """Mean that does not depend on the order of entries along ``axis``."""
    return np.sort(a, axis=axis).mean(axis=axis)


def _nodes(n_nodes: int, seed: int) -> np.ndarray:
    half = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed))).standard_normal(n_nodes // 2)
    return np.concatenate([half, -half])


def observed_loglik(prob: Problem, beta: np.ndarray, sigma2: np.ndarray, nodes: np.ndarray,
                    chunk: int = 64) -> np.ndarray:
    """Observed-data log likelihood per draw, latent rates integrated by Monte Carlo."""
    beta = np.atleast_2d(beta)
    sigma2 = np.atleast_1d(sigma2)
    out = np.empty(beta.shape[0])
    if prob.gaussian:
        mu = beta @ prob.X.T
        r = prob.y[None, :] - mu
        return -0.5 * prob.n * (np.log(2 * np.pi) + np.log(sigma2)) - 0.5 * np.sum(r * r, axis=1) / sigma2
    D, E = prob.deaths, prob.exposure
    const = D * np.log(E) - special.gammaln(D + 1)
    logk = np.log(len(nodes))
    for s in range(0, beta.shape[0], chunk):
        mu = beta[s:s + chunk] @ prob.X.T  # (c, n)
        sd = np.sqrt(sigma2[s:s + chunk])[:, None, None]
        z = mu[:, :, None] + sd * nodes[None, None, :]
        lp = D[None, :, None] * z - E[None, :, None] * np.exp(z)
        cell = special.logsumexp(lp, axis=2) - logk + const[None, :]
        out[s:s + chunk] = np.sort(cell, axis=1).sum(axis=1)
    return out


@dataclass(frozen=True)
class DICResult:
    dic: float
    mean_deviance: float
    plugin_deviance: float
    p_d: float


def dic(draws: PosteriorDraws, prob: Problem, n_nodes: int = 64, seed: int = 20240101) -> DICResult:
    """DIC = -4 E[log f(D | beta, sigma2)] + 2 log f(D | posterior means)."""
    B = draws.flat("beta")
    s2 = draws.flat("sigma2")
    nodes = _nodes(n_nodes, seed)
    ll = observed_loglik(prob, B, s2, nodes)
    if not np.all(np.isfinite(ll)):
        raise DICFailure("non-finite likelihood in at least one draw")
    mean_ll = float(np.sort(ll).mean())
    plug = float(observed_loglik(prob, _stable_mean(B)[None, :], np.array([_stable_mean(s2)]), nodes)[0])
    if not np.isfinite(plug):
        raise DICFailure("non-finite likelihood at the posterior mean")
    return DICResult(-4 * mean_ll + 2 * plug, -2 * mean_ll, -2 * plug, -2 * mean_ll + 2 * plug)


# --- marginal likelihood -------------------------------------------------------------

@dataclass(frozen=True)
class MarginalConfig:
    seed: int
    rungs: int = 30
    power: float = 5.0
    draws_per_rung: int = 2000
    burnin_per_rung: int = 200
    thin: int = 1
    pilot_chains: int = 2
    pilot_iters: int = 4000
    pilot_burnin: int = 2000
    pilot_thin: int = 2
    inflate: float = 1.5
    fixed_sigma2: float | None = None
    monotone_tol: float = 4.0  # allowed decrease, in combined standard errors

    def ladder(self) -> np.ndarray:
        return (np.arange(self.rungs + 1) / self.rungs) ** self.power

    def pilot(self) -> SamplerConfig:
        return SamplerConfig(chains=self.pilot_chains, iters=self.pilot_iters, burnin=self.pilot_burnin,
                             thin=self.pilot_thin, seed=self.seed, fixed_sigma2=self.fixed_sigma2)


@dataclass
class MarginalResult:
    log_marginal: float
    se: float
    temperatures: np.ndarray
    means: np.ndarray
    ses: np.ndarray
    pilot: PosteriorDraws = field(repr=False)


def _trapezoid_weights(t: np.ndarray) -> np.ndarray:
    w = np.zeros_like(t)
    dt = np.diff(t)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def log_marginal_problem(prob: Problem, config: MarginalConfig, pilot: PosteriorDraws | None = None) -> MarginalResult:
    pcfg = config.pilot()
    if pilot is None:
        pilot = sample_problem(prob, pcfg, diagnose=False)
    ref = fit_reference(pilot, prob, config.inflate)
    temps = config.ladder()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([config.seed, 1])))
    run_cfg = replace(pcfg, chains=1)
    means, ses = np.empty(len(temps)), np.empty(len(temps))
    st = None
    fixed_s2 = config.fixed_sigma2
    for i, t in enumerate(temps):
        if t == 0.0:
            sw = _Sweeper(prob, run_cfg, 0.0, ref)
            h = np.empty(config.draws_per_rung)
            for j in range(config.draws_per_rung):
                st = ref.sample(prob, rng, fixed_s2)
                h[j] = sw.log_integrand(st)
            ess_i = float(len(h))
        else:
            if st is None:
                st = initial_state(prob, run_cfg, rng)
            st = _clip_state(st, prob, run_cfg)
            sw = _Sweeper(prob, run_cfg, float(t), ref)
            n_iter = config.burnin_per_rung + config.draws_per_rung * config.thin
            out = sw.run(st, rng, n_iter, config.burnin_per_rung, config.thin, store_z=False,
                         record_integrand=True)
            st = out.state
            h = out.integrand
            ess_i = ess(h[None, :])
        if not np.all(np.isfinite(h)):
            raise MarginalUnstable(f"non-finite path integrand at t={t:.3g}")
        means[i] = h.mean()
        ses[i] = h.std(ddof=1) / np.sqrt(max(ess_i, 1.0))
    for i in range(len(temps) - 1):
        drop = means[i] - means[i + 1]
        allowed = config.monotone_tol * np.hypot(ses[i], ses[i + 1]) + 1e-9 * max(1.0, abs(means[i]))
        if drop > allowed:
            raise MarginalUnstable(
                f"path integrand decreases between t={temps[i]:.3g} and t={temps[i + 1]:.3g} "
                f"by {drop:.3g} (allowed {allowed:.3g})")
    w = _trapezoid_weights(temps)
    return MarginalResult(float(w @ means), float(np.sqrt(np.sum((w * ses) ** 2))), temps, means, ses, pilot)


def _clip_state(st: State, prob: Problem, cfg: SamplerConfig) -> State:
    st = st.copy()
    if not prob.gaussian:
        lo, hi = cfg.z_bounds
        st.z = np.clip(st.z, lo, hi)
    return st


def log_marginal(spec: ModelSpec, panel, covariates: CovariateTable | None, priors: PriorSet | None,
                 config: MarginalConfig) -> MarginalResult:
    """log P(D | model) with its Monte Carlo standard error."""
    design = build_design(spec, panel, covariates)
    prob = Problem.from_design(design, priors)
    return log_marginal_problem(prob, config)


# --- forward selection -------------------------------------------------------------

@dataclass(frozen=True)
class SelectionConfig:
    seed: int
    marginal: MarginalConfig | None = None
    threshold: float = 3.0
    two_stage: bool = False
    tie_se: float = 1.0
    compute_dic: bool = True


@dataclass
class SelectionTrace:
    rows: list[dict] = field(default_factory=list)
    evaluations: list[dict] = field(default_factory=list)
    final: ModelSpec | None = None

    @property
    def accepted(self) -> list[str]:
        return [r["variable_added"] for r in self.rows[1:]]

    def to_frame(self) -> pd.DataFrame:
        cols = ["variable_added", "bayes_factor", "log_bayes_factor", "marginal_loglik",
                "marginal_loglik_se", "delta_marginal_loglik", "dic"]
        return pd.DataFrame(self.rows, columns=cols)

    def to_csv(self, path: str | Path) -> None:
        df = self.to_frame()
        for c in ("bayes_factor", "marginal_loglik", "delta_marginal_loglik", "dic"):
            df[f"{c}_display"] = display(df[c], 2)
        df.to_csv(path, index=False, float_format="%.17g")


def _model_seed(seed: int, spec: ModelSpec) -> int:
    ss = np.random.SeedSequence([seed, zlib.crc32(spec.to_json().encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (2**63))


def _allowed(term: str, incumbent: Sequence[str]) -> bool:
    parts = term.split(":")
    return len(parts) == 1 or all(p in incumbent for p in parts)


def forward_select(candidates: Sequence[str], null: ModelSpec, panel, covariates: CovariateTable | None,
                   config: SelectionConfig, priors: PriorSet | None = None) -> SelectionTrace:
    """Greedy forward selection by Bayes factor.

    At each step every remaining candidate is added to the incumbent and the
    one with the largest marginal likelihood is kept if its Bayes factor
    against the incumbent exceeds ``threshold``.  Candidates within
    ``tie_se`` standard errors of the best count as tied and the earliest in
    ``candidates`` wins.  With ``two_stage`` main effects are selected first,
    then interactions whose factors were all accepted.
    """
    base = config.marginal or MarginalConfig(seed=config.seed)
    cache: dict[tuple, tuple[MarginalResult, float]] = {}

    def evaluate(spec: ModelSpec):
        key = spec.terms
        if key not in cache:
            mcfg = replace(base, seed=_model_seed(config.seed, spec))
            design = build_design(spec, panel, covariates)
            prob = Problem.from_design(design, priors)
            res = log_marginal_problem(prob, mcfg)
            d = dic(res.pilot, prob).dic if config.compute_dic else float("nan")
            cache[key] = (res, d)
        return cache[key]

    cands = [ModelSpec(null.cause, null.gender, (c,)).terms[0] for c in candidates]
    for c in cands:
        if c in null.terms:
            raise SchemaViolation(f"candidate {c!r} is already in the null model")
    trace = SelectionTrace()
    res0, dic0 = evaluate(null)
    trace.rows.append({"variable_added": "null", "bayes_factor": float("nan"), "log_bayes_factor": float("nan"),
                       "marginal_loglik": res0.log_marginal, "marginal_loglik_se": res0.se,
                       "delta_marginal_loglik": float("nan"), "dic": dic0})
    incumbent, inc_res = null, res0
    stages = [[c for c in cands if ":" not in c], [c for c in cands if ":" in c]] if config.two_stage else [cands]
    log_thr = np.log(config.threshold)
    for step_no, pool in enumerate(stages):
        remaining = list(pool)
        while remaining:
            options = [c for c in remaining if not config.two_stage or step_no == 0 or _allowed(c, incumbent.terms)]
            if not options:
                break
            scored = []
            for c in options:
                res, d = evaluate(incumbent.add(c))
                scored.append((c, res, d))
                trace.evaluations.append({"incumbent": list(incumbent.terms), "candidate": c,
                                          "marginal_loglik": res.log_marginal, "se": res.se, "dic": d})
            best = max(scored, key=lambda r: r[1].log_marginal)
            chosen = next(r for r in scored
                          if r[1].log_marginal >= best[1].log_marginal
                          - config.tie_se * np.hypot(r[1].se, best[1].se))
            c, res, d = chosen
            log_bf = res.log_marginal - inc_res.log_marginal
            if not log_bf > log_thr:
                break
            trace.rows.append({"variable_added": c, "bayes_factor": float(np.exp(log_bf)) if log_bf < 709 else float("inf"),
                               "log_bayes_factor": log_bf, "marginal_loglik": res.log_marginal,
                               "marginal_loglik_se": res.se, "delta_marginal_loglik": log_bf, "dic": d})
            incumbent, inc_res = incumbent.add(c), res
            remaining.remove(c)
    trace.final = incumbent
    return trace
