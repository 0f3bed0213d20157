import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pedrisk import growth
from pedrisk.errors import NonPositiveInput, OutOfRange, ParseError, UnknownSex
from pedrisk.growth import (
    GrowthAssessment,
    LmsTable,
    assess,
    assess_weight_for_length,
    bmi,
    lms_z,
    percentile_from_z,
)


def test_bmi_basic():
    assert bmi(20.0, 1.0) == 20.0
    assert bmi(30.0, 1.5) == pytest.approx(30.0 / 2.25)


@pytest.mark.parametrize("w,h", [(-1.0, 1.0), (0.0, 1.0), (10.0, 0.0), (10.0, -0.5)])
def test_bmi_rejects_nonpositive(w, h):
    with pytest.raises(NonPositiveInput):
        bmi(w, h)


def test_lms_formula_identities():
    table = LmsTable([
        ("bmi_for_age", "male", 24.0, 1.0, 16.0, 0.1),
        ("bmi_for_age", "male", 36.0, 0.0, 16.0, 0.1),
    ])
    # L = 1: z = ((x/M) - 1)/S
    assert table.z("bmi_for_age", "male", 24.0, 17.6) == pytest.approx(1.0, abs=1e-12)
    # L = 0: z = ln(x/M)/S
    assert table.z("bmi_for_age", "male", 36.0, 16.0 * math.exp(0.2)) == pytest.approx(
        2.0, abs=1e-12)
    # x = M at an exact key
    assert table.z("bmi_for_age", "male", 24.0, 16.0) == pytest.approx(0.0, abs=1e-15)


def test_z_at_exact_key_matches_row_formula(lms):
    # interpolation at a table key must reduce to the raw row values
    l, m, s = lms.lms_at("bmi_for_age", "female", 36.0)
    x = 17.3
    direct = ((x / m) ** l - 1.0) / (l * s)
    assert lms.z("bmi_for_age", "female", 36.0, x) == pytest.approx(direct, abs=1e-12)


def test_percentile_from_z():
    assert percentile_from_z(0.0) == pytest.approx(50.0, abs=1e-12)
    assert percentile_from_z(1.6449) == pytest.approx(95.0, abs=0.01)
    assert percentile_from_z(-1.6449) == pytest.approx(5.0, abs=0.01)


def test_assess_labels(lms):
    _, m, _ = lms.lms_at("bmi_for_age", "male", 60.0)
    at_median = assess(lms, "male", 60.0, m)
    assert at_median.label == "normal"
    assert at_median.percentile == pytest.approx(50.0, abs=1e-9)

    high = lms.value_at_z("bmi_for_age", "male", 60.0, 2.0)
    assert assess(lms, "male", 60.0, high).label == "obese"

    with pytest.raises(OutOfRange):
        assess(lms, "male", 300.0, 16.0)
    with pytest.raises(UnknownSex):
        assess(lms, "unknown", 60.0, 16.0)


def test_assess_monotone_in_bmi(lms):
    values = np.linspace(12.0, 30.0, 40)
    pcts = [assess(lms, "female", 48.0, v).percentile for v in values]
    assert all(a < b for a, b in zip(pcts, pcts[1:]))


@given(age=st.floats(min_value=24.0, max_value=240.0),
       z=st.floats(min_value=-3.0, max_value=3.0),
       sex=st.sampled_from(["female", "male"]))
@settings(max_examples=60, deadline=None)
def test_inverse_round_trip(age, z, sex):
    from pedrisk.config import default_data_path
    from pedrisk.growth import load_lms_table

    table = load_lms_table(default_data_path("lms_demo.psv"))
    x = table.value_at_z("bmi_for_age", sex, age, z)
    assert table.z("bmi_for_age", sex, age, x) == pytest.approx(z, abs=1e-9)


def test_obesity_boundary_bisection(lms):
    # the bmi where the percentile crosses 95 must split obese/non-obese cleanly
    for sex in ("female", "male"):
        for age in (30.0, 75.0, 150.0):
            lo, hi = 10.0, 45.0
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                if assess(lms, sex, age, mid).percentile >= 95.0:
                    hi = mid
                else:
                    lo = mid
            assert assess(lms, sex, age, hi).label == "obese"
            assert assess(lms, sex, age, lo).label != "obese"
            assert hi - lo < 1e-10


def test_weight_for_length_properties(lms):
    _, m, _ = lms.lms_at("weight_for_length", "male", 75.0)
    mid = assess_weight_for_length(lms, "male", 75.0, m)
    assert mid.percentile == pytest.approx(50.0, abs=1e-9)
    weights = np.linspace(6.0, 16.0, 30)
    pcts = [assess_weight_for_length(lms, "male", 75.0, w).percentile for w in weights]
    assert all(a < b for a, b in zip(pcts, pcts[1:]))
    direct = lms.z("weight_for_length", "male", 87.0, 11.9)
    assert isinstance(direct, float)


def test_table_validation():
    with pytest.raises(ParseError):
        LmsTable([("bmi_for_age", "male", 24.0, -1.0, -5.0, 0.1)])  # M <= 0
    with pytest.raises(ParseError):
        LmsTable([
            ("bmi_for_age", "male", 24.0, -1.0, 16.0, 0.1),
            ("bmi_for_age", "male", 24.0, -1.0, 16.1, 0.1),  # duplicate key
        ])
    with pytest.raises(ParseError):
        growth.load_lms_table(__file__)  # not a table file


def test_table_save_load_round_trip(lms, tmp_path):
    path = tmp_path / "lms.psv"
    lms.save(path)
    again = growth.load_lms_table(path)
    assert again.to_text() == lms.to_text()


def test_reference_percentile_curves(lms):
    curves = growth.reference_percentile_curves(lms, "bmi_for_age", "male",
                                                percentiles=(5, 50, 95), n_points=10)
    assert set(curves) == {5, 50, 95}
    for p, pts in curves.items():
        assert len(pts) == 10
    # curves must be ordered: p5 < p50 < p95 everywhere
    for (k5, v5), (_, v50), (_, v95) in zip(curves[5], curves[50], curves[95]):
        assert v5 < v50 < v95
