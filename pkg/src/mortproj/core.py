"""Domain types and panel ingestion.

A panel is a complete rectangular grid of death counts and exposures keyed by
(age_group, gender, deprivation, region, year).  Categorical levels are carried
as 1-based indices into the level sets declared by a :class:`PanelSchema`.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from itertools import product
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import pandas as pd

from .errors import BadExposure, GridIncomplete, SchemaViolation, StdMismatch

log = logging.getLogger(__name__)

GENDERS = ("female", "male")
CAUSES = ("lung", "breast")
# frozen cell order: gender, then lexicographic (year, region, deprivation, age)
KEY_ORDER = ("gender", "year", "region", "deprivation", "age_group")
DROPPABLE = frozenset({"deprivation", "region", "age_group"})

ENGLISH_REGIONS = (
    "North East",
    "North West",
    "Yorkshire and the Humber",
    "East Midlands",
    "West Midlands",
    "East",
    "London",
    "South East",
    "South West",
)

_GENDER_ALIASES = {"female": "female", "f": "female", "women": "female",
                   "male": "male", "m": "male", "men": "male"}


@dataclass(frozen=True)
class AgeBand:
    label: str
    lower: int
    upper: int | None  # None for an open band such as "90+"
    midpoint: float

    @classmethod
    def parse(cls, label: str, midpoint: float | None = None) -> "AgeBand":
        m = re.fullmatch(r"\s*(\d+)\s*(?:-|–|to)\s*(\d+)\s*", label)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise SchemaViolation(f"age band {label!r} has upper < lower")
        else:
            m = re.fullmatch(r"\s*(\d+)\s*\+\s*", label)
            if not m:
                raise SchemaViolation(f"cannot parse age band {label!r}")
            lo, hi = int(m.group(1)), None
        if midpoint is None:
            # round half up, so 45-54 -> 50 and 55-59 -> 57
            midpoint = float(np.floor((lo + (hi if hi is not None else lo + 4)) / 2 + 0.5))
        return cls(label.strip(), lo, hi, float(midpoint))

    def contains(self, age: float) -> bool:
        return age >= self.lower and (self.upper is None or age < self.upper + 1)


@dataclass(frozen=True)
class PanelSchema:
    """Declared level sets of a panel.

    ``deprivation_levels`` is 5 for quintile panels and ``None`` when the panel
    has no deprivation dimension.  With ``deprivation_coding="decile"`` the
    loader accepts deciles 1..10 and merges pairs (1,2)->1, (3,4)->2, ...
    """

    cause: str
    age_groups: tuple[AgeBand, ...]
    regions: tuple[str, ...]
    genders: tuple[str, ...]
    years: tuple[int, int]
    deprivation_levels: int | None = 5
    deprivation_coding: str = "quintile"

    def __post_init__(self):
        if self.cause not in CAUSES:
            raise SchemaViolation(f"unknown cause {self.cause!r}")
        if not self.age_groups or not self.regions or not self.genders:
            raise SchemaViolation("schema level sets must be non-empty")
        for g in self.genders:
            if g not in GENDERS:
                raise SchemaViolation(f"unknown gender {g!r}")
        if self.years[1] < self.years[0]:
            raise SchemaViolation("schema year range is reversed")
        if self.deprivation_coding not in ("quintile", "decile"):
            raise SchemaViolation(f"unknown deprivation coding {self.deprivation_coding!r}")

    @property
    def has_deprivation(self) -> bool:
        return self.deprivation_levels is not None

    @property
    def year_list(self) -> list[int]:
        return list(range(self.years[0], self.years[1] + 1))

    @property
    def dims(self) -> tuple[str, ...]:
        return tuple(d for d in KEY_ORDER if d != "deprivation" or self.has_deprivation)

    def midpoints(self) -> np.ndarray:
        return np.array([b.midpoint for b in self.age_groups])

    def levels(self, dim: str) -> list:
        if dim == "age_group":
            return list(range(1, len(self.age_groups) + 1))
        if dim == "region":
            return list(range(1, len(self.regions) + 1))
        if dim == "deprivation":
            return list(range(1, (self.deprivation_levels or 0) + 1))
        if dim == "gender":
            return list(self.genders)
        if dim == "year":
            return self.year_list
        raise SchemaViolation(f"unknown dimension {dim!r}")

    def with_years(self, first: int, last: int) -> "PanelSchema":
        return replace(self, years=(first, last))

    def to_dict(self) -> dict:
        return {
            "cause": self.cause,
            "age_groups": [{"label": b.label, "midpoint": b.midpoint} for b in self.age_groups],
            "regions": list(self.regions),
            "genders": list(self.genders),
            "years": list(self.years),
            "deprivation_levels": self.deprivation_levels,
            "deprivation_coding": self.deprivation_coding,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PanelSchema":
        try:
            ages = []
            for a in d["age_groups"]:
                if isinstance(a, str):
                    ages.append(AgeBand.parse(a))
                else:
                    ages.append(AgeBand.parse(a["label"], a.get("midpoint")))
            return cls(
                cause=d["cause"],
                age_groups=tuple(ages),
                regions=tuple(d.get("regions", ENGLISH_REGIONS)),
                genders=tuple(_GENDER_ALIASES.get(str(g).lower(), str(g)) for g in d["genders"]),
                years=(int(d["years"][0]), int(d["years"][1])),
                deprivation_levels=d.get("deprivation_levels", 5),
                deprivation_coding=d.get("deprivation_coding", "quintile"),
            )
        except KeyError as exc:
            raise SchemaViolation(f"schema missing field {exc}") from None

    @classmethod
    def from_json(cls, path: str | Path) -> "PanelSchema":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def builtin(cls, name: str) -> "PanelSchema":
        """Level sets used for the English cancer panels (2001-2018)."""
        if name in ("lung", "lung_female", "lung_male"):
            ages = ["45-54"] + [f"{lo}-{lo + 4}" for lo in range(55, 90, 5)]
            genders = ("male",) if name == "lung_male" else ("female",)
            return cls("lung", tuple(AgeBand.parse(a) for a in ages), ENGLISH_REGIONS,
                       genders, (2001, 2018), 5, "quintile")
        if name in ("breast", "breast_female"):
            ages = [f"{lo}-{lo + 4}" for lo in range(35, 90, 5)]
            return cls("breast", tuple(AgeBand.parse(a) for a in ages), ENGLISH_REGIONS,
                       ("female",), (2001, 2018), None, "quintile")
        raise SchemaViolation(f"no builtin schema {name!r}")


@dataclass(frozen=True)
class StratumKey:
    age_group: int | None
    gender: str | None
    deprivation: int | None
    region: int | None
    year: int


@dataclass(frozen=True)
class MortalityCell:
    key: StratumKey
    deaths: int
    exposure: float

    def __post_init__(self):
        if not self.exposure > 0:
            raise BadExposure(f"exposure must be positive at {self.key}, got {self.exposure}")
        if self.deaths < 0:
            raise SchemaViolation(f"negative deaths at {self.key}")
        if self.deaths > self.exposure:
            raise SchemaViolation(f"deaths exceed exposure at {self.key}")


def crude_rate(cell: MortalityCell) -> float:
    return cell.deaths / cell.exposure


@dataclass(frozen=True)
class MortalityPanel:
    """Validated, immutable panel.

    ``frame`` holds one row per cell in the frozen key order, with integer
    index columns for the categorical dimensions plus ``deaths`` and
    ``exposure``.  Treat it as read-only; use :meth:`to_frame` for a copy.
    """

    frame: pd.DataFrame
    schema: PanelSchema
    dims: tuple[str, ...]

    @property
    def cause(self) -> str:
        return self.schema.cause

    @property
    def has_deprivation(self) -> bool:
        return "deprivation" in self.dims

    @property
    def n_cells(self) -> int:
        return len(self.frame)

    @property
    def deaths(self) -> np.ndarray:
        return self.frame["deaths"].to_numpy(dtype=float)

    @property
    def exposure(self) -> np.ndarray:
        return self.frame["exposure"].to_numpy(dtype=float)

    @property
    def years(self) -> list[int]:
        return sorted(self.frame["year"].unique().tolist())

    def levels(self, dim: str) -> list:
        if dim not in self.dims:
            raise SchemaViolation(f"panel has no {dim!r} dimension")
        return self.schema.levels(dim) if dim != "year" else self.years

    def to_frame(self) -> pd.DataFrame:
        return self.frame.copy()

    def keys(self) -> pd.DataFrame:
        return self.frame[list(self.dims)].copy()

    def cells(self) -> Iterator[MortalityCell]:
        cols = {d: self.frame[d].to_numpy() if d in self.dims else None for d in KEY_ORDER}
        deaths = self.frame["deaths"].to_numpy()
        expo = self.frame["exposure"].to_numpy()
        for i in range(self.n_cells):
            key = StratumKey(
                age_group=int(cols["age_group"][i]) if cols["age_group"] is not None else None,
                gender=str(cols["gender"][i]) if cols["gender"] is not None else None,
                deprivation=int(cols["deprivation"][i]) if cols["deprivation"] is not None else None,
                region=int(cols["region"][i]) if cols["region"] is not None else None,
                year=int(cols["year"][i]),
            )
            yield MortalityCell(key, int(deaths[i]), float(expo[i]))

    def subset_years(self, first: int, last: int) -> "MortalityPanel":
        df = self.frame[(self.frame["year"] >= first) & (self.frame["year"] <= last)]
        return MortalityPanel(df.reset_index(drop=True), self.schema.with_years(first, last), self.dims)

    def to_csv(self, path: str | Path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.17g")


def _order(df: pd.DataFrame, dims: Iterable[str]) -> pd.DataFrame:
    cols = [d for d in KEY_ORDER if d in dims]
    return df.sort_values(cols, kind="mergesort").reset_index(drop=True)


def _map_levels(series: pd.Series, labels: list[str], dim: str) -> pd.Series:
    lookup = {lab.lower(): i + 1 for i, lab in enumerate(labels)}

    def conv(v):
        s = str(v).strip()
        if s.lower() in lookup:
            return lookup[s.lower()]
        try:
            idx = int(float(s))
        except ValueError:
            raise SchemaViolation(f"unknown {dim} level {v!r}") from None
        if not 1 <= idx <= len(labels) or float(s) != idx:
            raise SchemaViolation(f"unknown {dim} level {v!r}")
        return idx

    return series.map(conv).astype(int)


def frame_from_records(df: pd.DataFrame, schema: PanelSchema) -> MortalityPanel:
    """Validate a raw DataFrame against ``schema`` and build a panel."""
    dims = schema.dims
    required = list(dims) + ["deaths", "exposure"]
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise SchemaViolation(f"missing columns {missing}")
    extra = [c for c in df.columns if c not in required]
    if extra:
        raise SchemaViolation(f"unexpected columns {extra}")
    df = df[required].copy()

    df["age_group"] = _map_levels(df["age_group"], [b.label for b in schema.age_groups], "age_group")
    df["region"] = _map_levels(df["region"], list(schema.regions), "region")
    g = df["gender"].map(lambda v: _GENDER_ALIASES.get(str(v).strip().lower()))
    if g.isna().any() or not set(g).issubset(schema.genders):
        bad = df["gender"][g.isna() | ~g.isin(schema.genders)].iloc[0]
        raise SchemaViolation(f"unknown gender level {bad!r}")
    df["gender"] = g
    try:
        df["year"] = df["year"].astype(int)
    except (TypeError, ValueError):
        raise SchemaViolation("year column must be integer") from None
    out_of_range = ~df["year"].between(*schema.years)
    if out_of_range.any():
        raise SchemaViolation(f"year {int(df['year'][out_of_range].iloc[0])} outside {schema.years}")

    deaths = pd.to_numeric(df["deaths"], errors="coerce")
    if deaths.isna().any() or (deaths != np.round(deaths)).any():
        raise SchemaViolation("deaths must be integer counts")
    if (deaths < 0).any():
        raise SchemaViolation("deaths must be non-negative")
    df["deaths"] = deaths.astype(np.int64)
    expo = pd.to_numeric(df["exposure"], errors="coerce")
    if expo.isna().any() or (expo <= 0).any():
        bad = df[expo.isna() | (expo <= 0)].iloc[0]
        raise BadExposure(f"non-positive exposure at {dict(bad[list(dims)])}")
    df["exposure"] = expo.astype(float)

    if schema.has_deprivation:
        n_in = 2 * schema.deprivation_levels if schema.deprivation_coding == "decile" else schema.deprivation_levels
        dep = pd.to_numeric(df["deprivation"], errors="coerce")
        if dep.isna().any() or not dep.between(1, n_in).all() or (dep != np.round(dep)).any():
            raise SchemaViolation(f"deprivation levels must be integers in 1..{n_in}")
        dep = dep.astype(int)
        if schema.deprivation_coding == "decile":
            dep = (dep + 1) // 2
        df["deprivation"] = dep
        if df.duplicated(list(dims)).any() and schema.deprivation_coding == "decile":
            df = df.groupby(list(dims), as_index=False)[["deaths", "exposure"]].sum()
        schema = replace(schema, deprivation_coding="quintile")

    if df.duplicated(list(dims)).any():
        dup = df[df.duplicated(list(dims))].iloc[0]
        raise SchemaViolation(f"duplicate cell {dict(dup[list(dims)])}")
    if (df["deaths"] > df["exposure"]).any():
        raise SchemaViolation("deaths exceed exposure in at least one cell")

    present = set(map(tuple, df[list(dims)].itertuples(index=False, name=None)))
    expected = list(product(*(schema.levels(d) for d in dims)))
    if len(present) != len(expected):
        for key in expected:
            if key not in present:
                raise GridIncomplete(dict(zip(dims, key)))
    return MortalityPanel(_order(df, dims), schema, dims)


def load_panel(path: str | Path, schema: PanelSchema) -> MortalityPanel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    df = pd.read_csv(path, encoding="utf-8")
    return frame_from_records(df, schema)


def aggregate(panel: MortalityPanel, drop: Iterable[str]) -> MortalityPanel:
    """Sum deaths and exposure over the dropped dimensions."""
    drop = set(drop)
    if not drop:
        return panel
    bad = drop - DROPPABLE
    if bad:
        raise SchemaViolation(f"cannot aggregate over {sorted(bad)}")
    lacking = drop - set(panel.dims)
    if lacking:
        raise SchemaViolation(f"panel has no {sorted(lacking)} dimension")
    keep = [d for d in panel.dims if d not in drop]
    df = panel.frame.groupby(keep, as_index=False, sort=False)[["deaths", "exposure"]].sum()
    return MortalityPanel(_order(df, keep), panel.schema, tuple(keep))


@dataclass(frozen=True)
class StandardPopulation:
    weights: Mapping[int, float]  # age_group index -> standard count

    def __post_init__(self):
        for a, w in self.weights.items():
            if not w > 0:
                raise StdMismatch(f"standard weight for age group {a} is not positive")

    def array(self, age_groups: Iterable[int]) -> np.ndarray:
        out = []
        for a in age_groups:
            if a not in self.weights:
                raise StdMismatch(f"standard population lacks age group {a}")
            out.append(self.weights[a])
        return np.asarray(out, dtype=float)

    @classmethod
    def for_schema(cls, schema: PanelSchema, table: pd.DataFrame | None = None) -> "StandardPopulation":
        """Map each schema age band onto the summed 5-year standard bands it spans."""
        table = esp2013() if table is None else table
        bands = [AgeBand.parse(lab) for lab in table["age_band"]]
        counts = table["weight"].to_numpy(dtype=float)
        weights = {}
        for i, band in enumerate(schema.age_groups, start=1):
            hi = band.upper if band.upper is not None else 10_000
            inside = [k for k, b in enumerate(bands)
                      if b.lower >= band.lower and (b.upper if b.upper is not None else 10_000) <= hi]
            lo_cov = min((bands[k].lower for k in inside), default=None)
            hi_cov = max(((bands[k].upper if bands[k].upper is not None else 10_000) for k in inside), default=None)
            if lo_cov != band.lower or hi_cov != hi:
                raise StdMismatch(f"age band {band.label!r} does not align with standard bands")
            weights[i] = float(counts[inside].sum())
        return cls(weights)


def esp2013() -> pd.DataFrame:
    """European Standard Population 2013, 5-year bands summing to 100,000."""
    with resources.files("mortproj.data").joinpath("esp2013.csv").open("r", encoding="utf-8") as fh:
        return pd.read_csv(fh)


def load_standard_population(path: str | Path | None, schema: PanelSchema) -> StandardPopulation:
    table = None if path is None else pd.read_csv(path)
    return StandardPopulation.for_schema(schema, table)


@dataclass(frozen=True)
class IncidenceSurface:
    """Fitted incidence rates keyed like a panel (diagnosis year in ``year``)."""

    frame: pd.DataFrame
    schema: PanelSchema = field(repr=False)

    def __post_init__(self):
        if (self.frame["lambda_hat"] < 0).any() or self.frame["lambda_hat"].isna().any():
            raise SchemaViolation("incidence rates must be non-negative")


def load_incidence(path: str | Path, schema: PanelSchema) -> IncidenceSurface:
    df = pd.read_csv(path)
    dims = [d for d in schema.dims]
    need = dims + ["lambda_hat"]
    missing = [c for c in need if c not in df.columns]
    if missing:
        raise SchemaViolation(f"incidence file missing columns {missing}")
    df = df[need].copy()
    df["age_group"] = _map_levels(df["age_group"], [b.label for b in schema.age_groups], "age_group")
    df["region"] = _map_levels(df["region"], list(schema.regions), "region")
    df["gender"] = df["gender"].map(lambda v: _GENDER_ALIASES.get(str(v).strip().lower(), str(v)))
    df["year"] = df["year"].astype(int)
    if schema.has_deprivation:
        df["deprivation"] = df["deprivation"].astype(int)
    df["lambda_hat"] = pd.to_numeric(df["lambda_hat"], errors="coerce")
    return IncidenceSurface(_order(df, dims), schema)


def display(values, decimals: int | None = 2, sig: int | None = None) -> pd.Series:
    """Rounded text companion for a numeric column.

    Missing values become empty strings and infinities stay ``inf``.  Fixed
    notation switches to scientific beyond 1e12 (huge Bayes factors).
    """

    def fmt(x) -> str:
        x = float(x)
        if np.isnan(x):
            return ""
        if not np.isfinite(x):
            return str(x)
        if sig is not None:
            return format(x, f".{sig}g")
        return format(x, f".{decimals}e" if abs(x) >= 1e12 else f".{decimals}f")

    return pd.Series(values).map(fmt).astype(object)
