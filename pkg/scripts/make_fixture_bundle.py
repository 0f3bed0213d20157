#!/usr/bin/env python3
"""Regenerate src/pedrisk/data/fixture_bundle.json.

The fixture is one synthetic 4-year-old (history truncated at 54 months) used
by the service/CLI tests and as the demo input for `pedrisk predict`.
"""
import json
from dataclasses import replace
from datetime import timedelta
from pathlib import Path

from pedrisk.config import default_data_path
from pedrisk.growth import load_lms_table
from pedrisk.registry import load_registry
from pedrisk.synth import SynthConfig, generate, to_fhir_bundle

OUT = Path(__file__).resolve().parents[1] / "src" / "pedrisk" / "data" / "fixture_bundle.json"


def main():
    registry = load_registry(default_data_path("demo_registry.psv"))
    lms = load_lms_table(default_data_path("lms_demo.psv"))
    cfg = SynthConfig(n_patients=12, seed=404,
                      planted_features=((0, 4.0), (13, 4.0)), carrier_rate=0.6)
    cohort = generate(cfg, registry, lms)
    # pick a patient with known sex, a planted carrier, and some conditions
    record = None
    for candidate, truth in cohort:
        if candidate.sex in ("female", "male") and any(truth.carriers.values()):
            record = candidate
            break
    assert record is not None
    cutoff = int(54 * 30.4375)
    events = tuple(e for e in record.events if e.age_days <= cutoff)
    record = replace(record, patient_id="fixture-child-1", events=events,
                     extracted_at=record.birth_date + timedelta(days=cutoff + 7))
    bundle = to_fhir_bundle(record)
    OUT.write_text(json.dumps(bundle, indent=1), encoding="utf-8")
    print(f"wrote {OUT}: {len(events)} events, last age "
          f"{events[-1].age_days / 365.25:.2f}y, sex={record.sex}")


if __name__ == "__main__":
    main()
