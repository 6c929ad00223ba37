"""Declarative model structures and design-matrix construction.

A model is a list of term names:

``intercept``
    Global level.
``age``, ``region``, ``deprivation``, ``gender``
    Categorical main effects, sum-to-zero coded by default.
``period``
    Year effect with the first observed year fixed at zero, given a
    random-walk-with-drift prior.
any other bare name (``aad``, ``ns``, ...)
    Numeric covariate, standardised over the fitting frame.
``a:b``
    Interaction; the columns are products of the codings of ``a`` and ``b``.
    ``period:<covariate>`` is a second random-walk block whose yearly value
    multiplies the covariate.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import pandas as pd

from .core import MortalityPanel
from .errors import CovariateGap, NoBuiltinSpec, SchemaViolation, SpecSingular

CATEGORICAL = ("age", "region", "deprivation", "gender")
PANEL_DIM = {"age": "age_group", "region": "region", "deprivation": "deprivation",
             "gender": "gender", "period": "year"}
SCHEMES = ("stz", "corner", "none")


@dataclass(frozen=True)
class ModelSpec:
    cause: str
    gender: str
    terms: tuple[str, ...]
    constraints: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(_canonical(t) for t in self.terms))
        object.__setattr__(self, "constraints", {k.lower(): v.lower() for k, v in dict(self.constraints).items()})
        if len(set(self.terms)) != len(self.terms):
            raise SchemaViolation("duplicate terms in model")
        if sum(t == "period" for t in self.terms) > 1:
            raise SchemaViolation("at most one period term is allowed")
        for t in self.terms:
            parts = t.split(":")
            if len(parts) > 2:
                raise SchemaViolation(f"only two-way interactions are supported: {t!r}")
            if len(parts) == 2 and parts[1] == "period":
                raise SchemaViolation(f"write period first in {t!r}")
            if len(parts) == 2 and parts[0] == parts[1]:
                raise SchemaViolation(f"self-interaction {t!r}")
        for k, v in self.constraints.items():
            if v not in SCHEMES:
                raise SchemaViolation(f"unknown constraint scheme {v!r} for {k!r}")
        if self.constraints.get("period", "corner") != "corner":
            raise SchemaViolation("the period effect only supports corner coding")

    @property
    def has_period(self) -> bool:
        return "period" in self.terms

    def kappa_terms(self) -> list[str]:
        return [t for t in self.terms if t.split(":")[0] == "period"]

    def covariates(self) -> list[str]:
        out = []
        for t in self.terms:
            for p in t.split(":"):
                if _kind(p) == "numeric" and p not in out:
                    out.append(p)
        return out

    def dimensions(self) -> set[str]:
        return {PANEL_DIM[p] for t in self.terms for p in t.split(":") if p in PANEL_DIM}

    def scheme(self, factor: str) -> str:
        if factor == "period":
            return self.constraints.get("period", "corner")
        return self.constraints.get(factor, "stz")

    def with_terms(self, terms: Sequence[str]) -> "ModelSpec":
        return ModelSpec(self.cause, self.gender, tuple(terms), self.constraints)

    def add(self, term: str) -> "ModelSpec":
        return self.with_terms(self.terms + (term,))

    def to_dict(self) -> dict:
        return {"cause": self.cause, "gender": self.gender, "terms": list(self.terms),
                "constraints": dict(sorted(self.constraints.items()))}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        try:
            return cls(d["cause"], d["gender"], tuple(d["terms"]), d.get("constraints", {}))
        except KeyError as exc:
            raise SchemaViolation(f"model spec missing field {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> "ModelSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _canonical(term: str) -> str:
    parts = [p.strip().lower() for p in term.split(":")]
    if parts == ["age_group"]:
        parts = ["age"]
    parts = ["age" if p == "age_group" else ("period" if p in ("year", "kappa") else p) for p in parts]
    if len(parts) == 2 and parts[1] == "period":
        parts = parts[::-1]
    return ":".join(parts)


def _kind(factor: str) -> str:
    if factor == "intercept":
        return "intercept"
    if factor == "period":
        return "period"
    if factor in CATEGORICAL:
        return "categorical"
    return "numeric"


_BUILTIN = {
    ("lung", "female"): ("intercept", "age", "region", "deprivation", "aad", "deprivation:age",
                         "region:age", "period", "period:aad", "region:aad", "ns"),
    ("lung", "male"): ("intercept", "age", "region", "deprivation", "aad", "deprivation:age",
                       "period", "period:aad", "region:aad", "ns"),
    ("breast", "female"): ("intercept", "age", "region", "ns", "period"),
}


def builtin_spec(cause: str, gender: str) -> ModelSpec:
    key = (cause.lower(), gender.lower())
    if key not in _BUILTIN:
        raise NoBuiltinSpec(f"no builtin model for {cause}/{gender}")
    return ModelSpec(key[0], key[1], _BUILTIN[key])


def resolve_spec(name_or_path: str) -> ModelSpec:
    """Accept ``lung_female``-style builtin names or a JSON spec file."""
    p = Path(name_or_path)
    if p.suffix == ".json" or p.exists():
        return ModelSpec.read(p)
    parts = name_or_path.lower().replace("-", "_").split("_")
    if len(parts) != 2:
        raise NoBuiltinSpec(f"cannot resolve model {name_or_path!r}")
    return builtin_spec(*parts)


# --- codings ---------------------------------------------------------------

def coding_matrix(n: int, scheme: str) -> np.ndarray:
    """Map free parameters to level effects (``n x k``)."""
    if scheme == "stz":
        return np.vstack([np.eye(n - 1), -np.ones((1, n - 1))]) if n > 1 else np.zeros((1, 0))
    if scheme == "corner":
        return np.vstack([np.zeros((1, n - 1)), np.eye(n - 1)]) if n > 1 else np.zeros((1, 0))
    if scheme == "none":
        return np.eye(n)
    raise SchemaViolation(f"unknown constraint scheme {scheme!r}")


@dataclass(frozen=True)
class Covariate:
    """A numeric covariate defined by a lookup table over some key columns.

    ``table`` has the key columns plus ``value`` (raw units).  ``mean`` and
    ``sd`` are fixed once over the fitting frame and reused for projections.
    """

    name: str
    keys: tuple[str, ...]
    table: pd.DataFrame
    mean: float | None = None
    sd: float | None = None

    def raw(self, frame: pd.DataFrame, carry_forward: bool = False) -> np.ndarray:
        cols = list(self.keys)
        missing = [c for c in cols if c not in frame.columns]
        if missing:
            raise SchemaViolation(f"covariate {self.name!r} needs key columns {missing}")
        merged = frame[cols].merge(self.table[cols + ["value"]], on=cols, how="left")
        vals = merged["value"].to_numpy(dtype=float)
        gap = np.isnan(vals)
        if gap.any() and carry_forward and "year" in cols:
            other = [c for c in cols if c != "year"]
            last = (self.table.sort_values("year").groupby(other, as_index=False).tail(1)
                    if other else self.table.sort_values("year").tail(1))
            held = frame[other].merge(last[other + ["value", "year"]], on=other, how="left") if other \
                else pd.DataFrame({"value": np.repeat(last["value"].iloc[0], len(frame)),
                                   "year": np.repeat(last["year"].iloc[0], len(frame))})
            ok = gap & (frame["year"].to_numpy() > held["year"].to_numpy())
            vals[ok] = held["value"].to_numpy(dtype=float)[ok]
            gap = np.isnan(vals)
        if gap.any():
            row = frame[cols].iloc[int(np.flatnonzero(gap)[0])].to_dict()
            raise CovariateGap(f"covariate {self.name!r} unavailable at {row}")
        return vals

    def standardised(self, frame: pd.DataFrame, shift: np.ndarray | None = None,
                     carry_forward: bool = False) -> np.ndarray:
        if self.mean is None or self.sd is None:
            raise SchemaViolation(f"covariate {self.name!r} has not been standardised")
        v = self.raw(frame, carry_forward)
        if shift is not None:
            v = v + shift
        return (v - self.mean) / self.sd

    def fitted_to(self, frame: pd.DataFrame) -> "Covariate":
        from .aad import standardise

        _, m, s = standardise(self.raw(frame))
        return Covariate(self.name, self.keys, self.table, m, s)

    def to_dict(self) -> dict:
        return {"name": self.name, "keys": list(self.keys), "mean": self.mean, "sd": self.sd}


@dataclass(frozen=True)
class CovariateTable:
    items: Mapping[str, Covariate] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.items

    def __getitem__(self, name: str) -> Covariate:
        try:
            return self.items[name]
        except KeyError:
            raise CovariateGap(f"covariate {name!r} not supplied") from None

    def with_covariate(self, cov: Covariate) -> "CovariateTable":
        d = dict(self.items)
        d[cov.name] = cov
        return CovariateTable(d)

    def fitted_to(self, frame: pd.DataFrame, names: Sequence[str] | None = None) -> "CovariateTable":
        names = list(self.items) if names is None else names
        return CovariateTable({n: (self[n].fitted_to(frame) if n in names else self.items[n])
                               for n in self.items})

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = []
        for name in sorted(self.items):
            c = self.items[name]
            c.table[list(c.keys) + ["value"]].to_csv(d / f"cov_{name}.csv", index=False, float_format="%.17g")
            meta.append(c.to_dict())
        (d / "covariates.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "CovariateTable":
        d = Path(directory)
        p = d / "covariates.json"
        if not p.exists():
            return cls({})
        items = {}
        for m in json.loads(p.read_text()):
            table = pd.read_csv(d / f"cov_{m['name']}.csv")
            items[m["name"]] = Covariate(m["name"], tuple(m["keys"]), table, m["mean"], m["sd"])
        return cls(items)


def aad_covariate(surface) -> Covariate:
    keys = tuple(surface.keys)
    t = surface.averaged[list(keys) + ["aad"]].rename(columns={"aad": "value"})
    return Covariate("aad", keys, t.reset_index(drop=True))


def ns_covariate(series, schema, gender: str, years, lag: int = 20) -> Covariate:
    """Lagged NS prevalence keyed by (gender, age_group, year)."""
    from .smoking import lagged_ns_table

    mat = lagged_ns_table(series, schema.age_groups, gender, list(years), lag)
    rows = [(gender, a + 1, int(t), mat[a, j]) for a in range(mat.shape[0]) for j, t in enumerate(years)]
    return Covariate("ns", ("gender", "age_group", "year"),
                     pd.DataFrame(rows, columns=["gender", "age_group", "year", "value"]))


# --- design ----------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    term: str
    start: int
    stop: int
    is_kappa: bool
    factors: tuple[str, ...]
    levels: tuple[tuple, ...]  # level set per categorical/period factor
    codings: tuple[np.ndarray, ...]  # per categorical/period factor

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def multiplier(self) -> str | None:
        """Covariate that multiplies a random-walk block, if any."""
        if not self.is_kappa or len(self.factors) == 1:
            return None
        return self.factors[1]


@dataclass(frozen=True)
class DesignMatrix:
    X: np.ndarray
    columns: tuple[str, ...]
    blocks: tuple[Block, ...]
    spec: ModelSpec
    covariates: CovariateTable
    keys: pd.DataFrame = field(repr=False)
    years: tuple[int, ...] = ()
    deaths: np.ndarray | None = field(default=None, repr=False)
    exposure: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_cells(self) -> int:
        return self.X.shape[0]

    @property
    def n_coef(self) -> int:
        return self.X.shape[1]

    def block(self, term: str) -> Block:
        for b in self.blocks:
            if b.term == term:
                return b
        raise KeyError(term)

    def kappa_blocks(self) -> list[Block]:
        return [b for b in self.blocks if b.is_kappa]

    def fixed_mask(self) -> np.ndarray:
        m = np.ones(self.n_coef, dtype=bool)
        for b in self.kappa_blocks():
            m[b.slice] = False
        return m

    def condition_number(self) -> float:
        s = np.linalg.svd(self.X, compute_uv=False)
        return float(s[0] / s[-1]) if s.size and s[-1] > 0 else float("inf")

    def effects(self, beta: np.ndarray) -> dict[str, np.ndarray]:
        """Level effects implied by the free coefficients.

        Works on a single vector or on a (draws, coef) array; the trailing axes
        of each result enumerate the levels of the term's factors.
        """
        beta = np.asarray(beta, dtype=float)
        out = {}
        for b in self.blocks:
            free = beta[..., b.slice]
            if not b.codings:
                out[b.term] = free[..., 0] if b.size == 1 else free
                continue
            if len(b.codings) == 1:
                out[b.term] = free @ b.codings[0].T
            else:
                k1, k2 = b.codings[0].shape[1], b.codings[1].shape[1]
                F = free.reshape(free.shape[:-1] + (k1, k2))
                out[b.term] = b.codings[0] @ F @ b.codings[1].T
        return out

    def kappa_paths(self, beta: np.ndarray) -> dict[str, np.ndarray]:
        """Full year paths (first year zero) for each random-walk block."""
        eff = self.effects(beta)
        return {b.term: eff[b.term] for b in self.kappa_blocks()}

    def rows(self, frame: pd.DataFrame, covariates: CovariateTable | None = None,
             include_kappa: bool = True, shifts: Mapping[str, np.ndarray] | None = None,
             carry_forward: bool = False) -> np.ndarray:
        """Design rows for an arbitrary key frame using the stored codings.

        Random-walk columns can only be built for observed years; pass
        ``include_kappa=False`` for projection frames and add the simulated
        paths separately.
        """
        covariates = self.covariates if covariates is None else covariates
        cols = []
        for b in self.blocks:
            if b.is_kappa and not include_kappa:
                cols.append(np.zeros((len(frame), b.size)))
                continue
            cols.append(_block_columns(b, frame, covariates, shifts, carry_forward))
        return np.hstack(cols) if cols else np.zeros((len(frame), 0))

    def multiplier_values(self, block: Block, frame: pd.DataFrame,
                          covariates: CovariateTable | None = None,
                          shifts: Mapping[str, np.ndarray] | None = None,
                          carry_forward: bool = False) -> np.ndarray:
        covariates = self.covariates if covariates is None else covariates
        name = block.multiplier
        if name is None:
            return np.ones(len(frame))
        return _factor_values(name, frame, covariates, shifts, carry_forward)


def _factor_values(name, frame, covariates, shifts, carry_forward):
    shift = None if shifts is None else shifts.get(name)
    return covariates[name].standardised(frame, shift, carry_forward)


def _level_index(factor: str, frame: pd.DataFrame, levels: tuple) -> np.ndarray:
    col = PANEL_DIM[factor]
    if col not in frame.columns:
        raise SchemaViolation(f"frame lacks the {col!r} dimension")
    lookup = {v: i for i, v in enumerate(levels)}
    try:
        return np.array([lookup[v] for v in frame[col].tolist()], dtype=int)
    except KeyError as exc:
        raise SchemaViolation(f"level {exc} of {col!r} outside the fitted level set") from None


def _block_columns(b: Block, frame, covariates, shifts, carry_forward) -> np.ndarray:
    n = len(frame)
    mats = []
    ci = 0
    for f in b.factors:
        k = _kind(f)
        if k == "intercept":
            mats.append(np.ones((n, 1)))
        elif k in ("categorical", "period"):
            idx = _level_index(f, frame, b.levels[ci])
            mats.append(b.codings[ci][idx])
            ci += 1
        else:
            mats.append(_factor_values(f, frame, covariates, shifts, carry_forward)[:, None])
    if len(mats) == 1:
        return mats[0]
    A, B = mats
    return (A[:, :, None] * B[:, None, :]).reshape(n, -1)


def select_gender(panel: MortalityPanel, gender: str) -> MortalityPanel:
    if "gender" not in panel.dims:
        return panel
    levels = panel.frame["gender"].unique().tolist()
    if levels == [gender]:
        return panel
    if gender not in levels:
        raise SchemaViolation(f"panel has no {gender!r} cells")
    df = panel.frame[panel.frame["gender"] == gender].reset_index(drop=True)
    return MortalityPanel(df, panel.schema, panel.dims)


def build_design(spec: ModelSpec, panel: MortalityPanel, covariates: CovariateTable | None = None,
                 refit_standardisation: bool = True, check_rank: bool = True) -> DesignMatrix:
    """Encode ``spec`` over the cells of ``panel`` (in frozen panel order).

    Numeric covariates are standardised over the panel's cells unless
    ``refit_standardisation`` is false, in which case stored constants are
    reused (as for projections).
    """
    covariates = covariates or CovariateTable({})
    panel = select_gender(panel, spec.gender)
    frame = panel.frame
    for d in spec.dimensions():
        if d not in panel.dims:
            raise SchemaViolation(f"model uses {d!r} but the panel lacks it")
    needed = spec.covariates()
    for name in needed:
        if name not in covariates:
            raise CovariateGap(f"covariate {name!r} not supplied")
    if refit_standardisation:
        covariates = covariates.fitted_to(frame, needed)

    years = tuple(panel.years)
    blocks, cols, names = [], [], []
    pos = 0
    for term in spec.terms:
        factors = tuple(term.split(":"))
        levels, codings = [], []
        for f in factors:
            k = _kind(f)
            if k == "categorical":
                lv = tuple(panel.levels(PANEL_DIM[f]))
                levels.append(lv)
                codings.append(coding_matrix(len(lv), spec.scheme(f)))
            elif k == "period":
                levels.append(years)
                codings.append(coding_matrix(len(years), spec.scheme("period")))
        is_kappa = factors[0] == "period"
        proto = Block(term, 0, 0, is_kappa, factors, tuple(levels), tuple(codings))
        M = _block_columns(proto, frame, covariates, None, False)
        b = Block(term, pos, pos + M.shape[1], is_kappa, factors, tuple(levels), tuple(codings))
        blocks.append(b)
        cols.append(M)
        names.extend(_column_names(b))
        pos = b.stop
    X = np.hstack(cols) if cols else np.zeros((len(frame), 0))
    X = np.ascontiguousarray(X)
    if check_rank and X.shape[1]:
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            raise SpecSingular(f"design has rank {rank} with {X.shape[1]} columns")
    keys = frame[list(panel.dims)].reset_index(drop=True)
    return DesignMatrix(X, tuple(names), tuple(blocks), spec, covariates, keys, years,
                        frame["deaths"].to_numpy(dtype=float), frame["exposure"].to_numpy(dtype=float))


def _column_names(b: Block) -> list[str]:
    parts = []
    ci = 0
    for f in b.factors:
        k = _kind(f)
        if k in ("categorical", "period"):
            lv, C = b.levels[ci], b.codings[ci]
            ci += 1
            kept = [str(lv[i]) for i in range(C.shape[0]) if C[i].any() and np.count_nonzero(C[i]) == 1
                    and C[i].max() == 1]
            parts.append([f"{f}[{x}]" for x in kept][:C.shape[1]])
        else:
            parts.append([f])
    if len(parts) == 1:
        return parts[0]
    return [f"{a}:{c}" for a in parts[0] for c in parts[1]]
