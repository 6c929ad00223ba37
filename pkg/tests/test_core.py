from __future__ import annotations

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import raw_records, small_schema
from mortproj.core import (AgeBand, MortalityCell, PanelSchema, StandardPopulation, StratumKey, aggregate,
                           crude_rate, display, esp2013, frame_from_records, load_panel)
from mortproj.errors import BadExposure, GridIncomplete, SchemaViolation, StdMismatch


@pytest.mark.parametrize("label,lo,hi,mid", [("45-54", 45, 54, 50.0), ("55-59", 55, 59, 57.0),
                                             ("85-89", 85, 89, 87.0), ("90+", 90, None, 92.0)])
def test_age_band_parse(label, lo, hi, mid):
    b = AgeBand.parse(label)
    assert (b.lower, b.upper, b.midpoint) == (lo, hi, mid)


def test_age_band_rejects_garbage():
    with pytest.raises(SchemaViolation):
        AgeBand.parse("old")
    with pytest.raises(SchemaViolation):
        AgeBand.parse("60-50")


def test_builtin_schemas():
    lc = PanelSchema.builtin("lung_female")
    assert [b.label for b in lc.age_groups][:2] == ["45-54", "55-59"]
    assert len(lc.age_groups) == 8 and len(lc.regions) == 9 and lc.deprivation_levels == 5
    bc = PanelSchema.builtin("breast")
    assert len(bc.age_groups) == 11 and not bc.has_deprivation
    assert "deprivation" not in bc.dims


def test_schema_roundtrip(tmp_path, schema):
    schema.write_json(tmp_path / "s.json")
    assert PanelSchema.from_json(tmp_path / "s.json") == schema


def test_panel_accepts_labels_and_sorts(schema):
    raw = raw_records(schema).sample(frac=1.0, random_state=1)
    raw["region"] = raw["region"].map({1: "North East", 2: "north west"})
    raw["gender"] = "F"
    p = frame_from_records(raw, schema)
    assert p.n_cells == 3 * 2 * 5 * 4
    keys = p.keys()
    assert keys.equals(keys.sort_values(list(p.dims)).reset_index(drop=True))
    assert set(p.frame["gender"]) == {"female"}


def test_missing_cell_raises_with_key(schema):
    raw = raw_records(schema).iloc[1:]
    with pytest.raises(GridIncomplete) as err:
        frame_from_records(raw, schema)
    assert err.value.payload()["error"] == "GridIncomplete"


@pytest.mark.parametrize("bad", [0.0, -3.0])
def test_bad_exposure(schema, bad):
    raw = raw_records(schema)
    raw.loc[5, "exposure"] = bad
    with pytest.raises(BadExposure):
        frame_from_records(raw, schema)


def test_unknown_level_and_extra_column(schema):
    raw = raw_records(schema)
    raw["region"] = raw["region"].astype(object)
    raw.loc[0, "region"] = "Atlantis"
    with pytest.raises(SchemaViolation):
        frame_from_records(raw, schema)
    raw = raw_records(schema).assign(extra=1)
    with pytest.raises(SchemaViolation):
        frame_from_records(raw, schema)


def test_deciles_merge_to_quintiles():
    sch = small_schema(coding="decile")
    raw = raw_records(sch, dep_levels=10)
    p = frame_from_records(raw, sch)
    assert sorted(p.frame["deprivation"].unique()) == [1, 2, 3, 4, 5]
    assert p.deaths.sum() == raw["deaths"].sum()
    np.testing.assert_allclose(p.exposure.sum(), raw["exposure"].sum())


def test_csv_roundtrip(tmp_path, panel, schema):
    panel.to_csv(tmp_path / "p.csv")
    again = load_panel(tmp_path / "p.csv", schema)
    pd.testing.assert_frame_equal(again.frame, panel.frame)


def test_cell_validation():
    key = StratumKey("female", 2001, 1, 1, 1)
    assert crude_rate(MortalityCell(key, 5, 1000.0)) == 0.005
    with pytest.raises(BadExposure):
        MortalityCell(key, 1, 0.0)
    with pytest.raises(SchemaViolation):
        MortalityCell(key, 10, 5.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), drop=st.sampled_from([("deprivation",), ("region",),
                                                            ("deprivation", "region")]))
def test_aggregation_conserves_totals(seed, drop):
    sch = small_schema()
    p = frame_from_records(raw_records(sch, seed), sch)
    a = aggregate(p, drop)
    assert a.deaths.sum() == p.deaths.sum()
    assert a.exposure.sum() == pytest.approx(p.exposure.sum(), rel=1e-12)
    assert not set(drop) & set(a.dims)


def test_aggregate_rejects_core_dims(panel):
    with pytest.raises(SchemaViolation):
        aggregate(panel, ["year"])


def test_esp2013_totals():
    t = esp2013()
    assert t["weight"].sum() == 100_000
    lc = StandardPopulation.for_schema(PanelSchema.builtin("lung_female"))
    # 45-54 spans two five-year bands of 7000 each
    assert lc.weights[1] == 14_000
    bc = StandardPopulation.for_schema(PanelSchema.builtin("breast"))
    assert len(bc.weights) == 11


def test_std_misaligned_band():
    sch = PanelSchema("lung", (AgeBand.parse("47-53"),), ("North East",), ("female",), (2001, 2002), None)
    with pytest.raises(StdMismatch):
        StandardPopulation.for_schema(sch)


def test_display_formatting():
    assert list(display([1.234, -2.5, float("inf")], 2)) == ["1.23", "-2.50", "inf"]
    assert list(display([0.000123456], sig=3)) == ["0.000123"]
    assert list(display([float("nan"), 6.8e258], 2)) == ["", "6.80e+258"]
