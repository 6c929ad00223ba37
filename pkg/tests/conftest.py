from __future__ import annotations

from itertools import product
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from mortproj.core import AgeBand, PanelSchema, frame_from_records

FIXTURES = Path(__file__).parent / "fixtures"


def small_schema(n_age=3, n_region=2, dep=5, years=(2001, 2004), cause="lung", gender="female",
                 coding="quintile") -> PanelSchema:
    ages = tuple(AgeBand.parse(f"{55 + 5 * i}-{59 + 5 * i}") for i in range(n_age))
    regions = ("North East", "North West", "London", "South East", "South West")[:n_region]
    return PanelSchema(cause, ages, regions, (gender,), years, dep, coding)


def raw_records(schema: PanelSchema, seed: int = 0, dep_levels: int | None = None) -> pd.DataFrame:
    rng = np.random.default_rng(seed)
    dims = schema.dims
    levels = [schema.levels(d) for d in dims]
    if dep_levels is not None:
        levels[dims.index("deprivation")] = list(range(1, dep_levels + 1))
    df = pd.DataFrame(list(product(*levels)), columns=dims)
    df["exposure"] = rng.uniform(5e4, 1.5e5, len(df)).round(3)
    df["deaths"] = rng.poisson(df["exposure"] * 1e-3)
    return df


@pytest.fixture
def schema():
    return small_schema()


@pytest.fixture
def panel(schema):
    return frame_from_records(raw_records(schema), schema)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
