import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pedrisk.errors import (
    DuplicateCode,
    InsufficientData,
    NotFitted,
    ParseError,
)
from pedrisk.registry import (
    QuantizationSpec,
    fit_cohort_quantiles,
    load_registry,
    quantize,
)


def test_demo_registry_counts_match_header(registry):
    # the loader already validates the header; re-check the totals directly
    text = registry.to_text().splitlines()
    header = text[0]
    assert header.startswith("#domains")
    counts = dict(tok.split("=") for tok in header.split()[1:])
    assert registry.counts_by_domain["condition"] == int(counts["cond"])
    assert registry.counts_by_domain["family_history"] == int(counts["famhx"])
    assert registry.counts_by_domain["medication"] == int(counts["med"])
    assert registry.counts_by_domain["measurement"] == int(counts["meas"])
    assert sum(registry.counts_by_domain.values()) == len(registry.entries)


def test_map_code(registry):
    assert registry.map_code("SNOMED", "195967001") == 0
    assert registry.map_code("LOINC", "29463-7") == 29
    assert registry.map_code("RxNorm", "6902") == 21  # second code of a med group
    assert registry.map_code("SNOMED", "ZZZ") is None
    # pure function
    assert registry.map_code("SNOMED", "ZZZ") is None


def test_duplicate_code_rejected(tmp_path):
    path = tmp_path / "reg.psv"
    path.write_text(
        "#domains cond=2 famhx=0 med=0 meas=0\n"
        "0|condition|A|SNOMED:111|quant=none\n"
        "1|condition|B|SNOMED:111|quant=none\n")
    with pytest.raises(DuplicateCode):
        load_registry(path)


def test_empty_registry_with_header(tmp_path):
    path = tmp_path / "reg.psv"
    path.write_text("#domains cond=0 famhx=0 med=0 meas=0\n")
    reg = load_registry(path)
    assert len(reg.entries) == 0


def test_header_count_mismatch(tmp_path):
    path = tmp_path / "reg.psv"
    path.write_text("#domains cond=2 famhx=0 med=0 meas=0\n"
                    "0|condition|A|SNOMED:1|quant=none\n")
    with pytest.raises(ParseError):
        load_registry(path)


def test_non_dense_ids_rejected(tmp_path):
    path = tmp_path / "reg.psv"
    path.write_text("#domains cond=1 famhx=0 med=0 meas=0\n"
                    "3|condition|A|SNOMED:1|quant=none\n")
    with pytest.raises(ParseError):
        load_registry(path)


def test_quantize_boundaries():
    spec = QuantizationSpec(mode="fixed_edges", edges=(10.0, 20.0))
    assert quantize(spec, 5.0) == 0
    assert quantize(spec, 10.0) == 1      # value == edge advances the bin
    assert quantize(spec, 99.0) == 2


def test_quantize_requires_fit():
    spec = QuantizationSpec(mode="cohort_quantiles", quantile_count=5)
    with pytest.raises(NotFitted):
        quantize(spec, 1.0)


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=2, max_size=20,
                unique=True).map(sorted),
       st.floats(min_value=-2e6, max_value=2e6),
       st.floats(min_value=0.0, max_value=1e5))
@settings(max_examples=100, deadline=None)
def test_quantize_monotone(edges, a, delta):
    spec = QuantizationSpec(mode="fixed_edges", edges=tuple(edges))
    assert quantize(spec, a) <= quantize(spec, a + delta)


def _measurement_registry(tmp_path, quant="q4"):
    path = tmp_path / "reg.psv"
    path.write_text("#domains cond=0 famhx=0 med=0 meas=1\n"
                    f"0|measurement|Thing|LOINC:x-1|quant={quant}@u\n")
    return load_registry(path)


def test_fit_quantiles_linear_interpolation(tmp_path):
    reg = _measurement_registry(tmp_path, "q4")
    fitted = fit_cohort_quantiles(reg, {0: np.arange(1.0, 101.0)})
    edges = fitted.spec(0).quantization.edges
    assert edges == pytest.approx((25.75, 50.5, 75.25))
    assert fitted.fitted


def test_fit_quantiles_median(tmp_path):
    reg = _measurement_registry(tmp_path, "q2")
    fitted = fit_cohort_quantiles(reg, {0: np.array([0.0, 10.0])})
    assert fitted.spec(0).quantization.edges == pytest.approx((5.0,))


def test_fit_quantiles_insufficient(tmp_path):
    reg = _measurement_registry(tmp_path, "q4")
    with pytest.raises(InsufficientData):
        fit_cohort_quantiles(reg, {0: np.full(50, 7.0)})
    with pytest.raises(InsufficientData):
        fit_cohort_quantiles(reg, {})


def test_input_id_expansion(tmp_path):
    path = tmp_path / "reg.psv"
    path.write_text("#domains cond=1 famhx=0 med=0 meas=1\n"
                    "0|condition|A|SNOMED:1|quant=none\n"
                    "1|measurement|M|LOINC:y-1|quant=10.0,20.0@u\n")
    reg = load_registry(path)
    assert reg.input_vocab_size == 1 + 3
    assert reg.input_id(0, 0) == 0
    assert reg.input_id(1, 0) == 1
    assert reg.input_id(1, 2) == 3
    assert reg.owner_of(0) == (0, 0)
    assert reg.owner_of(3) == (1, 2)


def test_unfitted_registry_has_no_input_ids(tmp_path):
    reg = _measurement_registry(tmp_path, "q4")
    with pytest.raises(NotFitted):
        _ = reg.input_vocab_size


def test_serialization_round_trip_and_fingerprint(registry, tmp_path):
    path = tmp_path / "reg.psv"
    registry.save(path)
    again = load_registry(path)
    assert again.to_text() == registry.to_text()
    assert again.fingerprint() == registry.fingerprint()
    # any content change must move the fingerprint
    fitted = fit_cohort_quantiles(registry, {
        fid: np.linspace(0, 100, 120) for fid in range(len(registry.entries))
        if registry.spec(fid).quantization is not None
        and registry.spec(fid).quantization.mode == "cohort_quantiles"
    })
    assert fitted.fingerprint() != registry.fingerprint()
