"""Command-line entry point: ``mortproj <command> ...``.

Exit codes: 0 on success, 1 on a library error (JSON payload on stderr),
2 on a usage error.  Relative input paths that do not exist are also looked
up under ``$MORTPROJ_DATA_DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .aad import build_aad_surface
from .core import (ENGLISH_REGIONS, _GENDER_ALIASES, PanelSchema, aggregate, display, load_incidence, load_panel,
                   load_standard_population)
from .errors import MortprojError, SchemaViolation
from .mcmc import PriorSet, SamplerConfig, sample
from .measures import (ScenarioConfig, apply_delay_scenario, check_scenario_support, cumulative_excess,
                       excess_tables, heatmap_table, pearson_residuals)
from .projection import (base_year_shares, frame_exposure, frozen_exposure, load_population, project_rates,
                         projection_frame, split_population)
from .run import FitRun, write_manifest
from .selection import MarginalConfig, SelectionConfig, forward_select
from .simlab import GeneratorConfig, generate
from .smoking import fit_backcast, load_smoking, reconstruct
from .spec import CovariateTable, ModelSpec, aad_covariate, ns_covariate, resolve_spec

log = logging.getLogger("mortproj")

DATA_ENV = "MORTPROJ_DATA_DIR"


def _path(p: str | None) -> Path | None:
    if p is None:
        return None
    path = Path(p)
    if not path.exists() and not path.is_absolute() and os.environ.get(DATA_ENV):
        alt = Path(os.environ[DATA_ENV]) / path
        if alt.exists():
            return alt
    return path


def _schema(arg: str | None, panel_path: Path | None, spec: ModelSpec | None = None) -> PanelSchema:
    if arg:
        p = _path(arg)
        return PanelSchema.from_json(p) if p.exists() else PanelSchema.builtin(arg)
    if panel_path is not None and (panel_path.parent / "schema.json").exists():
        return PanelSchema.from_json(panel_path.parent / "schema.json")
    if spec is not None:
        return PanelSchema.builtin(spec.cause if spec.cause == "breast" else f"{spec.cause}_{spec.gender}")
    raise SchemaViolation("no schema given and none found beside the panel")


def _covariates(args, panel, spec: ModelSpec | None) -> tuple[CovariateTable, list[Path]]:
    """Assemble covariates from a saved table and/or AAD and smoking files."""
    inputs: list[Path] = []
    cdir = _path(args.covariates) if args.covariates else None
    if cdir is None and args.panel and (_path(args.panel).parent / "covariates" / "covariates.json").exists():
        cdir = _path(args.panel).parent / "covariates"
    table = CovariateTable.load(cdir) if cdir is not None else CovariateTable({})
    if cdir is not None:
        inputs += sorted(p for p in cdir.iterdir() if p.is_file())
    if args.aad:
        from .aad import load_aad

        p = _path(args.aad)
        table = table.with_covariate(aad_covariate(load_aad(p)))
        inputs.append(p)
    if args.smoking:
        p = _path(args.smoking)
        series = load_smoking(p)
        gender = spec.gender if spec is not None else panel.levels("gender")[0]
        sub = series.frame[series.frame["gender"] == gender]
        last = int(sub["year"].max()) + args.lag if not sub.empty else panel.years[-1]
        years = range(panel.years[0], max(last, panel.years[-1]) + 1)
        table = table.with_covariate(ns_covariate(series, panel.schema, gender, years, args.lag))
        inputs.append(p)
    return table, inputs


def _sampler(args) -> SamplerConfig:
    return SamplerConfig(chains=args.chains, iters=args.iters, burnin=args.burnin, thin=args.thin,
                         seed=args.seed, fixed_sigma2=args.fixed_sigma2, threads=args.threads)


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


# --- commands ----------------------------------------------------------------------

def cmd_ingest(args) -> None:
    src = _path(args.panel)
    schema = _schema(args.schema, src)
    panel = load_panel(src, schema)
    if args.aggregate:
        panel = aggregate(panel, [d.strip() for d in args.aggregate.split(",") if d.strip()])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    panel.to_csv(out / "panel.csv")
    panel.schema.write_json(out / "schema.json")
    write_manifest(out, "ingest", _config(args), [src], extra={"n_cells": panel.n_cells})


def cmd_smoking(args) -> None:
    src = _path(args.input)
    series = load_smoking(src)
    genders = [args.gender] if args.gender else sorted(series.frame["gender"].unique())
    parts, models = [], {}
    for g in genders:
        model = fit_backcast(series, g)
        parts.append(reconstruct(model, series, (args.first, args.last)).frame)
        models[g] = model.original_scale()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df = pd.concat(parts, ignore_index=True)
    df["ns_rate_display"] = display(df["ns_rate"], 4)
    df.to_csv(out, index=False, float_format="%.17g")
    write_manifest(out, "smoking backcast", _config(args), [src], extra={"models": models})


def cmd_aad(args) -> None:
    ppath = _path(args.panel)
    schema = _schema(args.schema, ppath)
    panel = load_panel(ppath, schema)
    ipath = _path(args.incidence)
    inc = load_incidence(ipath, schema)
    std = load_standard_population(_path(args.std), schema)
    surface = build_aad_surface(inc, std, panel, region_only=args.region_only)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df = surface.averaged.copy()
    df["aad_display"] = display(df["aad"], 2)
    df.to_csv(out, index=False, float_format="%.17g")
    write_manifest(out, "aad", _config(args), [ppath, ipath, _path(args.std)],
                   extra={"aad_mean": surface.mean, "aad_sd": surface.sd})


def cmd_fit(args) -> None:
    spec = resolve_spec(str(_path(args.spec)) if _path(args.spec).exists() else args.spec)
    ppath = _path(args.panel)
    schema = _schema(args.schema, ppath, spec)
    panel = load_panel(ppath, schema)
    covs, cov_inputs = _covariates(args, panel, spec)
    draws = sample(spec, panel, covs, PriorSet(), _sampler(args))
    run = FitRun(spec, panel, draws.design.covariates, draws, draws.design)
    run.save(args.out)
    write_manifest(args.out, "fit", _config(args), [ppath, *cov_inputs], seed=args.seed,
                   extra={"spec_digest": spec.digest()})


def cmd_select(args) -> None:
    null = resolve_spec(str(_path(args.null)) if _path(args.null).exists() else args.null)
    ppath = _path(args.panel)
    schema = _schema(args.schema, ppath, null)
    panel = load_panel(ppath, schema)
    covs, cov_inputs = _covariates(args, panel, null)
    mcfg = MarginalConfig(seed=args.seed, rungs=args.rungs, draws_per_rung=args.draws_per_rung,
                          burnin_per_rung=args.burnin_per_rung, pilot_iters=args.pilot_iters,
                          pilot_burnin=args.pilot_iters // 2)
    cfg = SelectionConfig(seed=args.seed, marginal=mcfg, threshold=args.threshold, two_stage=args.two_stage)
    cands = [c.strip() for c in args.candidates.split(",") if c.strip()]
    trace = forward_select(cands, null, panel, covs, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(out)
    write_manifest(out, "select", _config(args), [ppath, *cov_inputs], seed=args.seed,
                   extra={"final_spec": trace.final.to_dict() if trace.final else None,
                          "evaluations": trace.evaluations})


def _projection_inputs(run: FitRun, args, years):
    frame = projection_frame(run.design, years)
    if args.pop:
        pop = load_population(_path(args.pop), run.panel.schema)
        if "deprivation" in frame.columns and "deprivation" not in pop.columns:
            pop = split_population(pop, base_year_shares(run.panel))
        exposure = frame_exposure(frame, pop)
    else:
        exposure = frozen_exposure(run.panel, frame)
    return frame, exposure


def _years(run: FitRun, args) -> range:
    first = run.design.years[-1] + 1
    if args.horizon < first:
        from .errors import BadHorizon

        raise BadHorizon(f"horizon {args.horizon} is not after the last fitted year {first - 1}")
    return range(first, args.horizon + 1)


def cmd_project(args) -> None:
    run = FitRun.load(_path(args.run))
    frame, exposure = _projection_inputs(run, args, _years(run, args))
    surf = project_rates(run.draws, run.design, frame, args.seed, exposure, args.max_draws,
                         carry_forward=args.carry_forward, counts=args.counts)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    surf.to_csv(out)
    write_manifest(out, "project", _config(args), [_path(args.pop)] if args.pop else [], seed=args.seed)


def cmd_scenario(args) -> None:
    run = FitRun.load(_path(args.run))
    check_scenario_support(run.spec)
    years = _years(run, args)
    frame, exposure = _projection_inputs(run, args, years)
    start = args.start_year if args.start_year is not None else years[0]
    scen = ScenarioConfig.from_name(args.delay_months, args.schedule, start)
    base = project_rates(run.draws, run.design, frame, args.seed, exposure, args.max_draws,
                         carry_forward=args.carry_forward)
    alt = apply_delay_scenario(run.draws, run.design, frame, scen, args.seed, exposure, args.max_draws,
                               carry_forward=args.carry_forward)
    report = excess_tables(alt, base)
    out = Path(args.out)
    report.write(out)
    base.to_csv(out / "baseline.csv")
    alt.to_csv(out / "scenario.csv")
    (out / "cumulative.json").write_text(json.dumps(report.cumulative, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "scenario", _config(args), [_path(args.pop)] if args.pop else [], seed=args.seed,
                   extra={"schedule": list(scen.schedule)})


def _relabel(df: pd.DataFrame, schema: PanelSchema | None) -> pd.DataFrame:
    df = df.copy()
    if "gender" in df.columns:
        df["gender"] = df["gender"].map(lambda v: _GENDER_ALIASES.get(str(v).strip().lower(), str(v)))
    for col, levels in (("region", list(schema.regions) if schema else list(ENGLISH_REGIONS)),
                        ("age_group", [b.label for b in schema.age_groups] if schema else None)):
        if col in df.columns and not pd.api.types.is_numeric_dtype(df[col]):
            if levels is None:
                raise SchemaViolation(f"labelled {col} values need --schema")
            lookup = {lab: i + 1 for i, lab in enumerate(levels)}
            bad = set(df[col]) - set(lookup)
            if bad:
                raise SchemaViolation(f"unknown {col} labels {sorted(bad)[:3]}")
            df[col] = df[col].map(lookup)
    return df


def cmd_excess(args) -> None:
    schema = _schema(args.schema, None) if args.schema else None
    opath, bpath = _path(args.observed), _path(args.baseline)
    observed = _relabel(pd.read_csv(opath), schema)
    baseline = _relabel(pd.read_csv(bpath), schema)
    years = None
    if args.years:
        lo, _, hi = args.years.partition("-")
        years = list(range(int(lo), int(hi or lo) + 1))
    table = cumulative_excess(observed, baseline, years, by=[c.strip() for c in args.by.split(",")])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, float_format="%.17g")
    write_manifest(out, "excess", _config(args), [opath, bpath])


def cmd_residuals(args) -> None:
    run = FitRun.load(_path(args.run))
    resid = pearson_residuals(run.design, run.draws)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    resid["residual_display"] = display(resid["residual"], 2)
    resid.to_csv(out, index=False, float_format="%.17g")
    write_manifest(out, "residuals", _config(args))
    if args.heatmap:
        hm = Path(args.heatmap)
        heatmap_table(resid).to_csv(hm, index=False, float_format="%.17g")
        write_manifest(hm, "residuals heatmap", _config(args))


def cmd_simlab(args) -> None:
    cpath = _path(args.config)
    cfg = GeneratorConfig.read(cpath)
    if args.seed is not None:
        cfg = GeneratorConfig.from_dict({**cfg.to_dict(), "seed": args.seed})
    syn = generate(cfg)
    syn.write(args.out)
    write_manifest(args.out, "simlab generate", _config(args), [cpath], seed=cfg.seed,
                   extra={"truth": syn.truth})


# --- parser --------------------------------------------------------------------------

def _add_covariate_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--panel", required=True, help="panel CSV")
    p.add_argument("--schema", help="schema JSON or builtin name (default: schema.json beside the panel)")
    p.add_argument("--covariates", help="saved covariate directory (default: covariates/ beside the panel)")
    p.add_argument("--aad", help="AAD CSV from the aad command")
    p.add_argument("--smoking", help="reconstructed smoking CSV")
    p.add_argument("--lag", type=int, default=20, help="smoking lag in years")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mortproj", description=__doc__.splitlines()[0])
    ap.add_argument("--threads", type=int, default=1, help="maximum worker processes")
    ap.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="maximum worker processes")
    subs = ap.add_subparsers(dest="command", required=True)

    class _Sub:
        def __init__(self, action):
            self.action = action

        def add_parser(self, name, **kw):
            return self.action.add_parser(name, parents=[common], **kw)

    sub = _Sub(subs)

    p = sub.add_parser("ingest", help="validate a panel and write it in canonical form")
    p.add_argument("--panel", required=True)
    p.add_argument("--schema", required=True, help="schema JSON or builtin name")
    p.add_argument("--aggregate", help="comma-separated dimensions to sum out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("smoking", help="smoking prevalence utilities")
    ssub = _Sub(p.add_subparsers(dest="action", required=True))
    b = ssub.add_parser("backcast", help="reconstruct yearly never-smoker prevalence")
    b.add_argument("--in", dest="input", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--gender")
    b.add_argument("--from", dest="first", type=int, default=1981)
    b.add_argument("--to", dest="last", type=int, default=2019)
    b.set_defaults(func=cmd_smoking)

    p = sub.add_parser("aad", help="average age at diagnosis covariate")
    p.add_argument("--incidence", required=True)
    p.add_argument("--panel", required=True)
    p.add_argument("--schema")
    p.add_argument("--std", help="standard population CSV (default: built-in ESP 2013)")
    p.add_argument("--region-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aad)

    p = sub.add_parser("fit", help="sample the posterior of one model")
    p.add_argument("--spec", required=True, help="builtin name such as lung_female, or a spec JSON")
    _add_covariate_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--chains", type=int, default=4)
    p.add_argument("--iters", type=int, default=20000)
    p.add_argument("--burnin", type=int, default=10000)
    p.add_argument("--thin", type=int, default=10)
    p.add_argument("--fixed-sigma2", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="forward selection by Bayes factor")
    p.add_argument("--null", required=True, help="null model spec (builtin name or JSON)")
    p.add_argument("--candidates", required=True, help="comma-separated candidate terms")
    _add_covariate_args(p)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--threshold", type=float, default=3.0)
    p.add_argument("--two-stage", action="store_true")
    p.add_argument("--rungs", type=int, default=30)
    p.add_argument("--draws-per-rung", type=int, default=2000)
    p.add_argument("--burnin-per-rung", type=int, default=200)
    p.add_argument("--pilot-iters", type=int, default=4000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    for name, fn, hlp in (("project", cmd_project, "project rates beyond the fitted years"),
                          ("scenario", cmd_scenario, "excess deaths under a diagnosis-delay scenario")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--run", required=True, help="fit output directory")
        p.add_argument("--pop", help="projected population CSV (default: last fitted year held)")
        p.add_argument("--horizon", type=int, default=2036, help="last projected year")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--max-draws", type=int)
        p.add_argument("--carry-forward", action="store_true",
                       help="reuse the last known covariate value past its coverage")
        p.add_argument("--out", required=True)
        if name == "project":
            p.add_argument("--counts", action="store_true", help="add predictive count intervals")
        else:
            p.add_argument("--delay-months", type=float, required=True)
            p.add_argument("--schedule", default="default", help="'default' or comma-separated cumulative shares")
            p.add_argument("--start-year", type=int)
        p.set_defaults(func=fn)

    p = sub.add_parser("excess", help="cumulative excess deaths against a baseline")
    p.add_argument("--observed", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--schema", help="schema for mapping labelled levels")
    p.add_argument("--years", help="year or range such as 2020-2022")
    p.add_argument("--by", default="gender,region")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_excess)

    p = sub.add_parser("residuals", help="Pearson residuals of a fitted run")
    p.add_argument("--run", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--heatmap", help="also write the age-by-year heat-map table here")
    p.set_defaults(func=cmd_residuals)

    p = sub.add_parser("simlab", help="synthetic data")
    ssub = _Sub(p.add_subparsers(dest="action", required=True))
    g = ssub.add_parser("generate", help="simulate a panel with known parameters")
    g.add_argument("--config", required=True, help="JSON or TOML generator config")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_simlab)
    return ap


def dispatch(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        args.func(args)
    except MortprojError as exc:
        sys.stderr.write(json.dumps(exc.payload(), default=str) + "\n")
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
