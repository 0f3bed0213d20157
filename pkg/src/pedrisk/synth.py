"""Deterministic synthetic pediatric cohorts with a configurable planted risk signal.

Each patient gets a latent obesity propensity (base rate shifted by the
log-odds of any planted features they carry) and a BMI trajectory built in
z-space: the z-score starts near birth at a partially informative level and
relaxes toward a per-patient set point, then maps through the LMS reference
to raw measurements. Obesity labels therefore agree with the trajectory by
construction, and the planted features plus early growth measurements carry
the learnable signal.

All randomness is driven by per-patient child seeds of the config seed, so
cohorts are bit-reproducible and planted-multiplier sweeps reuse the same
underlying draws (which makes carrier prevalence monotone in the multiplier).
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .errors import UnknownPlantedFeature
from .fhir_ingest import ClinicalEvent, PatientRecord, parse_bundle, to_patient_record
from .growth import (
    BMI_FOR_AGE,
    WEIGHT_FOR_LENGTH,
    LmsTable,
    Z_OBESE,
    assess,
    percentile_from_z,
)
from .registry import FeatureRegistry

WELL_CHILD_MONTHS = (1, 2, 4, 6, 9, 12, 18, 24)
DAYS_PER_MONTH = 30.4375

LOINC_WEIGHT = "29463-7"
LOINC_HEIGHT = "8302-2"
LOINC_BMI = "39156-5"
LOINC_WFL_PCT = "77606-2"
LOINC_BMI_PCT = "59576-9"
LOINC_HGB = "718-7"
LOINC_GLUCOSE = "2345-7"

# type 1 diabetes, cancer, sickle cell disorder, developmental delay
DEFAULT_EXCLUSION_CODES = (
    ("SNOMED", "46635009"),
    ("SNOMED", "363346000"),
    ("SNOMED", "417357006"),
    ("SNOMED", "248290002"),
)

# median height-for-age anchors (months, cm); female scaled slightly down
_HEIGHT_ANCHORS = np.array([
    (0, 50.0), (1, 54.0), (2, 57.0), (4, 62.0), (6, 66.0), (9, 71.0),
    (12, 75.0), (18, 81.5), (24, 87.0), (36, 95.0), (48, 102.5), (60, 109.5),
    (72, 115.5), (84, 121.5), (96, 127.5), (108, 133.0), (120, 138.0),
    (132, 143.5), (144, 149.5),
])


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int
    seed: int = 0
    base_obesity_rate: float = 0.12
    planted_features: tuple[tuple[int, float], ...] = ()
    carrier_rate: float = 0.3
    max_age_years: int = 10
    bmi_noise_sigma: float = 0.06
    sites: tuple[str, ...] = ("site_a", "site_b")
    birth_year_range: tuple[int, int] = (2012, 2017)
    skew_days: int = 180
    background_event_rate: float = 0.02
    lab_rate: float = 0.35
    truncate_rate: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.base_obesity_rate < 1.0:
            raise ValueError(f"base_obesity_rate {self.base_obesity_rate} outside (0, 1)")
        if not 0.0 < self.carrier_rate < 1.0:
            raise ValueError(f"carrier_rate {self.carrier_rate} outside (0, 1)")
        if any(m <= 0 for _, m in self.planted_features):
            raise ValueError("planted odds multipliers must be positive")


@dataclass
class GroundTruth:
    propensity: float
    target_obese: bool
    carriers: dict[int, bool]
    site: str
    index_year: int
    # (window_years, horizon_years) -> (obese_label, bmi_value)
    labels: dict[tuple[int, int], tuple[bool, float]] = field(default_factory=dict)


def visit_months(max_age_years: int) -> tuple[int, ...]:
    annual = tuple(range(36, 12 * max_age_years + 1, 12))
    return WELL_CHILD_MONTHS + annual


def median_height_cm(sex: str, age_months: float) -> float:
    h = float(np.interp(age_months, _HEIGHT_ANCHORS[:, 0], _HEIGHT_ANCHORS[:, 1]))
    return h * (0.985 if sex == "female" else 1.0)


def _background_feature_ids(registry: FeatureRegistry, planted: set[int],
                            exclusions: set[tuple[str, str]]) -> list[int]:
    out = []
    for spec in registry.entries:
        if spec.domain == "measurement" or spec.feature_id in planted:
            continue
        if any(code in exclusions for code in spec.codes):
            continue
        out.append(spec.feature_id)
    return out


def generate(config: SynthConfig, registry: FeatureRegistry,
             lms: LmsTable) -> list[tuple[PatientRecord, GroundTruth]]:
    """Generate the cohort; deterministic in (config, registry, lms)."""
    for fid, _ in config.planted_features:
        if not 0 <= fid < len(registry.entries):
            raise UnknownPlantedFeature(f"feature id {fid} not in registry")
        if registry.spec(fid).domain == "measurement":
            raise UnknownPlantedFeature(f"feature id {fid} is a measurement; plant a "
                                        "presence-style feature")

    exclusions = set(DEFAULT_EXCLUSION_CODES)
    planted_ids = {fid for fid, _ in config.planted_features}
    background = _background_feature_ids(registry, planted_ids, exclusions)
    base_logit = math.log(config.base_obesity_rate / (1.0 - config.base_obesity_rate))
    months_all = visit_months(config.max_age_years)

    seeds = np.random.SeedSequence(config.seed).spawn(config.n_patients)
    cohort = []
    for i in range(config.n_patients):
        rng = np.random.default_rng(seeds[i])
        patient_id = f"synth-{config.seed}-{i:05d}"

        sex = "female" if rng.random() < 0.49 else "male"
        race = str(rng.choice(["white", "black", "asian", "other", "unknown"],
                              p=[0.42, 0.28, 0.07, 0.15, 0.08]))
        ethnicity = str(rng.choice(["hispanic", "non_hispanic", "unknown"],
                                   p=[0.22, 0.72, 0.06]))
        insurance = str(rng.choice(["private", "public"], p=[0.52, 0.48]))
        region = f"{rng.integers(100, 1000):03d}"
        site = str(rng.choice(list(config.sites)))
        year = int(rng.integers(config.birth_year_range[0], config.birth_year_range[1] + 1))
        birth = date(year, 1, 1) + timedelta(days=int(rng.integers(0, 365)))

        truncated = rng.random() < config.truncate_rate
        truncate_month = int(rng.choice([36, 48]))
        months = tuple(m for m in months_all if not truncated or m <= truncate_month)

        carriers = {fid: bool(rng.random() < config.carrier_rate)
                    for fid, _ in config.planted_features}
        logit = base_logit + sum(math.log(mult) for fid, mult in config.planted_features
                                 if carriers[fid])
        propensity = 1.0 / (1.0 + math.exp(-logit))
        target = bool(rng.random() < propensity)
        z_final = float(rng.uniform(1.9, 2.5) if target else rng.uniform(-1.3, 1.1))
        # early growth tracks a noisy projection of the set point, so the first
        # two years are informative but never determinative of the outcome
        z_early = 0.45 * z_final + float(rng.normal(0.0, 0.60))

        def z_mean(m: float) -> float:
            early = z_early * (min(m, 24.0) / 24.0) ** 0.7
            if m <= 24:
                return early
            if m >= 36:
                return z_final
            frac = (m - 24.0) / 12.0
            return (1.0 - frac) * early + frac * z_final

        phi = 0.8
        eps = 0.0
        z_at: dict[int, float] = {}
        for m in months:
            eps = phi * eps + rng.normal(0.0, config.bmi_noise_sigma * math.sqrt(1 - phi * phi))
            z_at[m] = z_mean(m) + eps

        events: list[ClinicalEvent] = []

        def place(month: int, domain: str, system: str, code: str,
                  value: float | None = None, unit: str | None = None):
            events.append(ClinicalEvent(
                age_days=int(round(month * DAYS_PER_MONTH)), domain=domain,
                code_system=system, code=code, value=value, unit=unit))

        for m in months:
            height = median_height_cm(sex, m) * (1.0 + rng.normal(0.0, 0.01))
            z = z_at[m]
            if m < 24:
                length = min(max(height, 45.0), 103.5)
                weight = lms.value_at_z(WEIGHT_FOR_LENGTH, sex, length, z)
                place(m, "measurement", "LOINC", LOINC_HEIGHT, length, "cm")
                place(m, "measurement", "LOINC", LOINC_WEIGHT, weight, "kg")
                place(m, "measurement", "LOINC", LOINC_WFL_PCT,
                      percentile_from_z(z), "%")
            else:
                bmi_value = lms.value_at_z(BMI_FOR_AGE, sex, float(m), z)
                weight = bmi_value * (height / 100.0) ** 2
                place(m, "measurement", "LOINC", LOINC_HEIGHT, height, "cm")
                place(m, "measurement", "LOINC", LOINC_WEIGHT, weight, "kg")
                place(m, "measurement", "LOINC", LOINC_BMI, bmi_value, "kg/m2")
                place(m, "measurement", "LOINC", LOINC_BMI_PCT,
                      percentile_from_z(z), "%")
            if rng.random() < config.lab_rate:
                place(m, "measurement", "LOINC", LOINC_HGB,
                      float(rng.normal(12.0, 1.2)), "g/dL")
            if rng.random() < config.lab_rate:
                place(m, "measurement", "LOINC", LOINC_GLUCOSE,
                      float(rng.normal(88.0, 8.0)), "mg/dL")

        # planted features always consume one visit draw each, carriers emit
        infancy = [m for m in months if m <= 18]
        for fid, _ in config.planted_features:
            visit = int(rng.integers(0, len(infancy))) if infancy else 0
            if carriers[fid] and infancy:
                spec = registry.spec(fid)
                system, code = spec.codes[0]
                place(infancy[visit], spec.domain, system, code)

        if background:
            hits = rng.random((len(months), len(background))) < config.background_event_rate
            for vi, m in enumerate(months):
                for bi in np.nonzero(hits[vi])[0]:
                    spec = registry.spec(background[int(bi)])
                    system, code = spec.codes[vi % len(spec.codes)]
                    place(m, spec.domain, system, code)

        # rare complex-condition patients to exercise the eligibility filter
        excl_roll = rng.random()
        excl_pick = int(rng.integers(0, len(DEFAULT_EXCLUSION_CODES)))
        if excl_roll < 0.02:
            system, code = DEFAULT_EXCLUSION_CODES[excl_pick]
            place(months[min(3, len(months) - 1)], "condition", system, code)

        events.sort()
        record = PatientRecord(
            patient_id=patient_id, birth_date=birth, sex=sex, race=race,
            ethnicity=ethnicity, insurance=insurance, region=region,
            events=tuple(events),
            extracted_at=birth + timedelta(days=int(round(12 * config.max_age_years
                                                          * DAYS_PER_MONTH)) + 1),
        )

        truth = GroundTruth(propensity=propensity, target_obese=target,
                            carriers=carriers, site=site, index_year=birth.year)
        for window in range(2, 8):
            for horizon in (1, 2, 3):
                label_month = 12 * (window + horizon)
                if label_month not in z_at:
                    continue
                bmi_value = lms.value_at_z(BMI_FOR_AGE, sex, float(label_month),
                                           z_at[label_month])
                result = assess(lms, sex, float(label_month), bmi_value)
                truth.labels[(window, horizon)] = (result.label == "obese", bmi_value)
        cohort.append((record, truth))
    return cohort


def apply_eligibility(cohort, exclusion_codes=DEFAULT_EXCLUSION_CODES):
    """Keep records with >= 5 years of data, >= 1 recorded BMI (direct or from a
    weight+height pair), and none of the exclusion conditions."""
    from .fhir_ingest import bmi_history

    exclusions = set(exclusion_codes)

    def record_of(item):
        return item[0] if isinstance(item, tuple) else item

    kept = []
    for item in cohort:
        record = record_of(item)
        if not record.events or record.events[-1].age_days < 1826:
            continue
        if any((e.code_system, e.code) in exclusions for e in record.events):
            continue
        if not bmi_history(record):
            continue
        kept.append(item)
    return kept


def skew_dates(record: PatientRecord, seed: int) -> PatientRecord:
    """Privacy skew: one uniform offset in [-180, +180] days per patient applied
    to the birth date (and hence every event date); ages are untouched."""
    digest = hashlib.sha256(f"{seed}:{record.patient_id}".encode()).digest()
    span = 2 * 180 + 1
    offset = int.from_bytes(digest[:8], "big") % span - 180
    delta = timedelta(days=offset)
    return replace(record, birth_date=record.birth_date + delta,
                   extracted_at=record.extracted_at + delta)


# --- FHIR serialization --------------------------------------------------------

_SYSTEM_URI = {
    "SNOMED": "http://snomed.info/sct",
    "RxNorm": "http://www.nlm.nih.gov/research/umls/rxnorm",
    "CPT": "http://www.ama-assn.org/go/cpt",
    "LOINC": "http://loinc.org",
}
_RACE_OMB = {"asian": "2028-9", "black": "2054-5", "white": "2106-3", "other": "2131-1"}
_ETH_OMB = {"hispanic": "2135-2", "non_hispanic": "2186-5"}
_RACE_EXT = "http://hl7.org/fhir/us/core/StructureDefinition/us-core-race"
_ETH_EXT = "http://hl7.org/fhir/us/core/StructureDefinition/us-core-ethnicity"


def _coding(system: str, code: str) -> dict:
    return {"coding": [{"system": _SYSTEM_URI.get(system, f"urn:pedrisk:{system}"),
                        "code": code}]}


def to_fhir_bundle(record: PatientRecord) -> dict:
    """One R4 collection bundle that round-trips through parse + normalize."""
    pid = record.patient_id
    subject = {"reference": f"Patient/{pid}"}
    patient: dict = {
        "resourceType": "Patient",
        "id": pid,
        "gender": record.sex if record.sex in ("female", "male") else "unknown",
        "birthDate": record.birth_date.isoformat(),
    }
    extensions = []
    if record.race in _RACE_OMB:
        extensions.append({"url": _RACE_EXT, "extension": [
            {"url": "ombCategory",
             "valueCoding": {"system": "urn:oid:2.16.840.1.113883.6.238",
                             "code": _RACE_OMB[record.race]}}]})
    if record.ethnicity in _ETH_OMB:
        extensions.append({"url": _ETH_EXT, "extension": [
            {"url": "ombCategory",
             "valueCoding": {"system": "urn:oid:2.16.840.1.113883.6.238",
                             "code": _ETH_OMB[record.ethnicity]}}]})
    if extensions:
        patient["extension"] = extensions
    if record.region != "unknown":
        patient["address"] = [{"postalCode": f"{record.region}00"}]

    entries = [{"fullUrl": f"urn:uuid:{pid}", "resource": patient}]
    if record.insurance in ("private", "public"):
        entries.append({"fullUrl": f"urn:uuid:{pid}-cov", "resource": {
            "resourceType": "Coverage", "id": f"{pid}-cov", "status": "active",
            "beneficiary": subject,
            "type": {"coding": [{"system": "urn:pedrisk:payer",
                                 "code": record.insurance}]},
        }})

    for n, e in enumerate(record.events):
        when = (record.birth_date + timedelta(days=e.age_days)).isoformat()
        rid = f"{pid}-e{n}"
        if e.domain == "measurement":
            resource = {
                "resourceType": "Observation", "id": rid, "status": "final",
                "subject": subject, "code": _coding(e.code_system, e.code),
                "effectiveDateTime": when,
                "valueQuantity": {"value": e.value, "unit": e.unit},
            }
        elif e.domain == "condition":
            resource = {"resourceType": "Condition", "id": rid, "subject": subject,
                        "code": _coding(e.code_system, e.code), "onsetDateTime": when}
        elif e.domain == "medication":
            resource = {"resourceType": "MedicationRequest", "id": rid,
                        "status": "active", "intent": "order", "subject": subject,
                        "medicationCodeableConcept": _coding(e.code_system, e.code),
                        "authoredOn": when}
        elif e.domain == "procedure":
            resource = {"resourceType": "Procedure", "id": rid, "status": "completed",
                        "subject": subject, "code": _coding(e.code_system, e.code),
                        "performedDateTime": when}
        else:
            resource = {"resourceType": "FamilyMemberHistory", "id": rid,
                        "status": "completed", "patient": subject, "date": when,
                        "relationship": {"text": "family member"},
                        "condition": [{"code": _coding(e.code_system, e.code)}]}
        entries.append({"fullUrl": f"urn:uuid:{rid}", "resource": resource})

    return {
        "resourceType": "Bundle",
        "type": "collection",
        "timestamp": record.extracted_at.isoformat(),
        "entry": entries,
    }


def to_fhir_bundles(cohort) -> list[dict]:
    def record_of(item):
        return item[0] if isinstance(item, tuple) else item

    return [to_fhir_bundle(record_of(item)) for item in cohort]


def round_trip(record: PatientRecord) -> PatientRecord:
    """serialize -> parse -> normalize; used by the round-trip contract tests."""
    return to_patient_record(parse_bundle(json.dumps(to_fhir_bundle(record))))


# --- on-disk cohort layout ------------------------------------------------------

def write_cohort(out_dir, cohort, skew_seed: int | None = None) -> None:
    """One bundle file per patient plus a manifest of site/index-year strata."""
    out = Path(out_dir)
    (out / "bundles").mkdir(parents=True, exist_ok=True)
    lines = ["patient_id|site|index_year"]
    for record, truth in cohort:
        if skew_seed is not None:
            record = skew_dates(record, skew_seed)
        bundle = to_fhir_bundle(record)
        (out / "bundles" / f"{record.patient_id}.json").write_text(
            json.dumps(bundle, indent=1), encoding="utf-8")
        lines.append(f"{record.patient_id}|{truth.site}|{record.birth_date.year}")
    (out / "manifest.psv").write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_cohort(in_dir) -> list[tuple[PatientRecord, dict]]:
    """Parse bundles back into records; strata come from the manifest."""
    root = Path(in_dir)
    strata: dict[str, dict] = {}
    manifest = (root / "manifest.psv").read_text(encoding="utf-8").splitlines()
    for line in manifest[1:]:
        if not line.strip():
            continue
        pid, site, year = line.split("|")
        strata[pid] = {"site": site, "index_year": int(year)}
    cohort = []
    for path in sorted((root / "bundles").glob("*.json")):
        record = to_patient_record(parse_bundle(path.read_bytes()))
        meta = strata.get(record.patient_id, {"site": "unknown", "index_year": 0})
        cohort.append((record, meta))
    return cohort
