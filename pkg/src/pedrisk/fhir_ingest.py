"""FHIR R4 ingestion: bundle parsing, server fetch, and record normalization.

Two entry paths produce the same typed resource set: `parse_bundle` for posted
JSON bundles and `fetch_patient_everything` for pulling a patient from a FHIR
endpoint (with pagination). `to_patient_record` then normalizes either into
the canonical internal `PatientRecord`.

Date-field precedence when extracting the clinical date:
  Observation            effectiveDateTime, else issued
  Condition              onsetDateTime, else recordedDate
  MedicationRequest      authoredOn
  Procedure              performedDateTime, else performedPeriod.start
  FamilyMemberHistory    date (the recording date; family conditions have no
                         child-age semantics, so the recording age is used)
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import date, timedelta

import requests

from .errors import (
    MalformedDocument,
    MissingDate,
    MissingPatient,
    MultiplePatients,
    NegativeAge,
    NotFound,
    PaginationLoop,
    SchemaViolation,
    Transport,
    Unauthorized,
)

CLINICAL_TYPES = ("Observation", "Condition", "MedicationRequest", "Procedure",
                  "FamilyMemberHistory")
FETCH_TYPES = CLINICAL_TYPES + ("Coverage",)

SYSTEM_URIS = {
    "http://snomed.info/sct": "SNOMED",
    "http://www.nlm.nih.gov/research/umls/rxnorm": "RxNorm",
    "http://www.ama-assn.org/go/cpt": "CPT",
    "http://loinc.org": "LOINC",
}
URI_FOR_SYSTEM = {v: k for k, v in SYSTEM_URIS.items()}

RACE_EXTENSION = "http://hl7.org/fhir/us/core/StructureDefinition/us-core-race"
ETHNICITY_EXTENSION = "http://hl7.org/fhir/us/core/StructureDefinition/us-core-ethnicity"
OMB_RACE = {"2028-9": "asian", "2054-5": "black", "2106-3": "white", "2131-1": "other"}
OMB_ETHNICITY = {"2135-2": "hispanic", "2186-5": "non_hispanic"}

DOMAIN_FOR_TYPE = {
    "Observation": "measurement",
    "Condition": "condition",
    "MedicationRequest": "medication",
    "Procedure": "procedure",
    "FamilyMemberHistory": "family_history",
}


@dataclass(frozen=True, order=True)
class ClinicalEvent:
    age_days: int
    domain: str
    code_system: str
    code: str
    value: float | None = None
    unit: str | None = None


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    birth_date: date
    sex: str
    race: str
    ethnicity: str
    insurance: str
    region: str
    events: tuple[ClinicalEvent, ...]
    extracted_at: date


@dataclass
class FhirResourceSet:
    patient: dict
    observations: list[dict] = field(default_factory=list)
    conditions: list[dict] = field(default_factory=list)
    medication_requests: list[dict] = field(default_factory=list)
    procedures: list[dict] = field(default_factory=list)
    family_histories: list[dict] = field(default_factory=list)
    coverages: list[dict] = field(default_factory=list)
    source: str = "posted_bundle"
    timestamp: date | None = None
    skipped_unknown_type: int = 0
    rejected_foreign_subject: int = 0

    def counts(self) -> dict[str, int]:
        return {
            "observations": len(self.observations),
            "conditions": len(self.conditions),
            "medication_requests": len(self.medication_requests),
            "procedures": len(self.procedures),
            "family_histories": len(self.family_histories),
            "coverages": len(self.coverages),
        }


# --- shared assembly ---------------------------------------------------------

_LIST_FOR_TYPE = {
    "Observation": "observations",
    "Condition": "conditions",
    "MedicationRequest": "medication_requests",
    "Procedure": "procedures",
    "FamilyMemberHistory": "family_histories",
    "Coverage": "coverages",
}


def _reference_id(resource: dict) -> str | None:
    """Trailing id of the subject/patient/beneficiary reference, if any."""
    for key in ("subject", "patient", "beneficiary"):
        ref = resource.get(key)
        if isinstance(ref, dict):
            target = ref.get("reference")
            if isinstance(target, str) and target:
                tail = target.rsplit("/", 1)[-1]
                return tail.rsplit(":", 1)[-1] if target.startswith("urn:") else tail
    return None


def _validate_patient(patient: dict) -> None:
    birth = patient.get("birthDate")
    if not isinstance(birth, str):
        raise SchemaViolation("Patient.birthDate is required")
    _parse_fhir_date(birth, "Patient.birthDate")
    if not isinstance(patient.get("id"), str) or not patient["id"]:
        raise SchemaViolation("Patient.id is required")


def _assemble(resources: list[dict], source: str, timestamp: date | None) -> FhirResourceSet:
    patients = [r for r in resources if r.get("resourceType") == "Patient"]
    if not patients:
        raise MissingPatient("no Patient resource present")
    if len(patients) > 1:
        raise MultiplePatients(f"{len(patients)} Patient resources present")
    patient = patients[0]
    _validate_patient(patient)

    out = FhirResourceSet(patient=patient, source=source, timestamp=timestamp)
    for resource in resources:
        rtype = resource.get("resourceType")
        if rtype == "Patient":
            continue
        bucket = _LIST_FOR_TYPE.get(rtype)
        if bucket is None:
            out.skipped_unknown_type += 1
            continue
        ref = _reference_id(resource)
        if ref != patient["id"]:
            out.rejected_foreign_subject += 1
            continue
        getattr(out, bucket).append(resource)
    return out


def parse_bundle(raw: bytes | str) -> FhirResourceSet:
    """Parse a posted FHIR R4 Bundle into a typed resource set.

    Total on arbitrary bytes: raises only typed errors. Unknown resource
    types are counted and skipped; resources referencing a different patient
    are counted and rejected.
    """
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedDocument(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("resourceType") != "Bundle":
        raise SchemaViolation("top-level resource must be a Bundle")
    version = doc.get("fhirVersion")
    if isinstance(version, str) and not version.startswith("4"):
        raise SchemaViolation(f"only FHIR R4 is supported, got {version}")

    timestamp: date | None = None
    ts = doc.get("timestamp")
    if isinstance(ts, str):
        try:
            timestamp = _parse_fhir_date(ts, "Bundle.timestamp")
        except SchemaViolation:
            timestamp = None

    entries = doc.get("entry", [])
    if not isinstance(entries, list):
        raise SchemaViolation("Bundle.entry must be a list")
    resources = []
    for entry in entries:
        if isinstance(entry, dict) and isinstance(entry.get("resource"), dict):
            resources.append(entry["resource"])
    return _assemble(resources, source="posted_bundle", timestamp=timestamp)


# --- server fetch -------------------------------------------------------------

def fetch_patient_everything(
    server_base_url: str,
    patient_id: str,
    auth_token: str | None = None,
    session: requests.Session | None = None,
    timeout: float = 10.0,
    max_pages: int = 1000,
) -> FhirResourceSet:
    """Pull one patient plus the clinical resource types, following pagination.

    Issues a Patient read then one search per resource type, walking
    Bundle.link rel="next" chains to exhaustion. A repeated page URL raises
    PaginationLoop rather than spinning.
    """
    if not patient_id:
        raise NotFound("empty patient id")
    sess = session or requests.Session()
    headers = {"Accept": "application/fhir+json"}
    if auth_token:
        headers["Authorization"] = f"Bearer {auth_token}"
    base = server_base_url.rstrip("/")

    def get_json(url: str) -> dict:
        try:
            resp = sess.get(url, headers=headers, timeout=timeout)
        except requests.RequestException as exc:
            raise Transport(f"GET {url}: {exc}") from None
        if resp.status_code == 404:
            raise NotFound(f"GET {url}: 404")
        if resp.status_code in (401, 403):
            raise Unauthorized(f"GET {url}: {resp.status_code}", status_code=resp.status_code)
        if resp.status_code != 200:
            raise Transport(f"GET {url}: HTTP {resp.status_code}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedDocument(f"GET {url}: invalid JSON: {exc}") from None

    resources: list[dict] = [get_json(f"{base}/Patient/{patient_id}")]
    for rtype in FETCH_TYPES:
        url: str | None = f"{base}/{rtype}?patient={patient_id}"
        seen: set[str] = set()
        pages = 0
        while url is not None:
            if url in seen:
                raise PaginationLoop(f"page link repeated: {url}")
            seen.add(url)
            pages += 1
            if pages > max_pages:
                raise PaginationLoop(f"more than {max_pages} pages for {rtype}")
            page = get_json(url)
            for entry in page.get("entry", []) or []:
                resource = entry.get("resource")
                if isinstance(resource, dict) and resource.get("resourceType") == rtype:
                    resources.append(resource)
            url = _next_link(page, base)
    return _assemble(resources, source="fetched", timestamp=None)


def _next_link(bundle: dict, base: str) -> str | None:
    for link in bundle.get("link", []) or []:
        if isinstance(link, dict) and link.get("relation") == "next":
            target = link.get("url")
            if isinstance(target, str) and target:
                return target if target.startswith("http") else f"{base}/{target.lstrip('/')}"
    return None


# --- normalization ------------------------------------------------------------

def _parse_fhir_date(text: str, where: str) -> date:
    """Accept date or dateTime, keeping just the calendar date."""
    token = text[:10]
    try:
        return date.fromisoformat(token)
    except ValueError:
        raise SchemaViolation(f"{where}: bad date {text!r}") from None


def _event_date(resource: dict, rtype: str) -> date:
    fields_by_type = {
        "Observation": ("effectiveDateTime", "issued"),
        "Condition": ("onsetDateTime", "recordedDate"),
        "MedicationRequest": ("authoredOn",),
        "Procedure": ("performedDateTime",),
        "FamilyMemberHistory": ("date",),
    }
    for name in fields_by_type[rtype]:
        value = resource.get(name)
        if isinstance(value, str):
            return _parse_fhir_date(value, f"{rtype}.{name}")
    if rtype == "Procedure":
        period = resource.get("performedPeriod")
        if isinstance(period, dict) and isinstance(period.get("start"), str):
            return _parse_fhir_date(period["start"], "Procedure.performedPeriod.start")
    raise MissingDate(f"{rtype} has no usable clinical date")


def _primary_coding(concept: dict | None) -> tuple[str, str] | None:
    if not isinstance(concept, dict):
        return None
    for coding in concept.get("coding", []) or []:
        if isinstance(coding, dict) and coding.get("code"):
            system = SYSTEM_URIS.get(coding.get("system", ""), "local")
            return system, str(coding["code"])
    return None


def _age_days(event_date: date, birth: date) -> int:
    days = (event_date - birth).days
    if days < 0:
        raise NegativeAge(f"event on {event_date} predates birth {birth}")
    return days


def _patient_demographics(patient: dict) -> dict[str, str]:
    gender = patient.get("gender")
    sex = gender if gender in ("female", "male") else "unknown"

    race, ethnicity = "unknown", "unknown"
    for ext in patient.get("extension", []) or []:
        if not isinstance(ext, dict):
            continue
        url = ext.get("url")
        table = OMB_RACE if url == RACE_EXTENSION else (
            OMB_ETHNICITY if url == ETHNICITY_EXTENSION else None)
        if table is None:
            continue
        for sub in ext.get("extension", []) or []:
            coding = sub.get("valueCoding") if isinstance(sub, dict) else None
            if isinstance(coding, dict) and coding.get("code") in table:
                value = table[coding["code"]]
                if url == RACE_EXTENSION:
                    race = value
                else:
                    ethnicity = value

    region = "unknown"
    for addr in patient.get("address", []) or []:
        postal = addr.get("postalCode") if isinstance(addr, dict) else None
        if isinstance(postal, str) and len(postal) >= 3:
            region = postal[:3]
            break
    return {"sex": sex, "race": race, "ethnicity": ethnicity, "region": region}


def _insurance_class(coverages: list[dict]) -> str:
    for coverage in coverages:
        concept = coverage.get("type")
        if not isinstance(concept, dict):
            continue
        tokens = [c.get("code", "") for c in concept.get("coding", []) or []]
        tokens.append(concept.get("text", ""))
        joined = " ".join(str(t).lower() for t in tokens)
        if any(word in joined for word in ("public", "medicaid", "chip", "medicare")):
            return "public"
        if joined.strip():
            return "private"
    return "unknown"


def to_patient_record(resources: FhirResourceSet) -> PatientRecord:
    """Normalize a resource set into the canonical internal record.

    Every clinical resource becomes one ClinicalEvent (FamilyMemberHistory
    contributes one event per listed condition); events are sorted by a
    canonical key so arrival order never matters.
    """
    patient = resources.patient
    birth = _parse_fhir_date(patient["birthDate"], "Patient.birthDate")
    demo = _patient_demographics(patient)

    events: list[ClinicalEvent] = []

    for obs in resources.observations:
        coding = _primary_coding(obs.get("code"))
        if coding is None:
            raise SchemaViolation("Observation without code")
        quantity = obs.get("valueQuantity")
        if not isinstance(quantity, dict) or not isinstance(quantity.get("value"), (int, float)):
            continue  # component-only or coded observations carry no scalar
        events.append(ClinicalEvent(
            age_days=_age_days(_event_date(obs, "Observation"), birth),
            domain="measurement",
            code_system=coding[0],
            code=coding[1],
            value=float(quantity["value"]),
            unit=quantity.get("unit"),
        ))

    simple = (
        (resources.conditions, "Condition", "code"),
        (resources.medication_requests, "MedicationRequest", "medicationCodeableConcept"),
        (resources.procedures, "Procedure", "code"),
    )
    for bucket, rtype, code_field in simple:
        for resource in bucket:
            coding = _primary_coding(resource.get(code_field))
            if coding is None:
                raise SchemaViolation(f"{rtype} without {code_field}")
            events.append(ClinicalEvent(
                age_days=_age_days(_event_date(resource, rtype), birth),
                domain=DOMAIN_FOR_TYPE[rtype],
                code_system=coding[0],
                code=coding[1],
            ))

    for fmh in resources.family_histories:
        recorded = _age_days(_event_date(fmh, "FamilyMemberHistory"), birth)
        for condition in fmh.get("condition", []) or []:
            coding = _primary_coding(condition.get("code") if isinstance(condition, dict) else None)
            if coding is None:
                continue
            events.append(ClinicalEvent(
                age_days=recorded,
                domain="family_history",
                code_system=coding[0],
                code=coding[1],
            ))

    events.sort()
    last_event = birth if not events else birth + timedelta(days=events[-1].age_days)
    extracted = resources.timestamp or last_event
    if extracted < last_event:
        extracted = last_event

    return PatientRecord(
        patient_id=patient["id"],
        birth_date=birth,
        sex=demo["sex"],
        race=demo["race"],
        ethnicity=demo["ethnicity"],
        insurance=_insurance_class(resources.coverages),
        region=demo["region"],
        events=tuple(events),
        extracted_at=extracted,
    )


def age_years(record: PatientRecord) -> float:
    """Age at the latest clinical event, in years."""
    if not record.events:
        return 0.0
    return record.events[-1].age_days / 365.25


def bmi_history(record: PatientRecord) -> list[tuple[int, float, float | None]]:
    """(age_days, bmi, weight_kg) points from BMI observations or weight+height pairs.

    Direct BMI observations (LOINC 39156-5) win; otherwise weight (29463-7)
    and height (8302-2) measured at the same age are combined.
    """
    bmi_direct: dict[int, float] = {}
    weights: dict[int, float] = {}
    heights: dict[int, float] = {}
    for e in record.events:
        if e.domain != "measurement" or e.value is None:
            continue
        if e.code_system == "LOINC" and e.code == "39156-5":
            bmi_direct[e.age_days] = e.value
        elif e.code_system == "LOINC" and e.code == "29463-7":
            weights[e.age_days] = e.value
        elif e.code_system == "LOINC" and e.code == "8302-2":
            heights[e.age_days] = e.value
    points = []
    ages = sorted(set(bmi_direct) | (set(weights) & set(heights)))
    for age in ages:
        if age in bmi_direct:
            points.append((age, bmi_direct[age], weights.get(age)))
        else:
            h_m = heights[age] / 100.0
            if h_m > 0 and weights[age] > 0:
                points.append((age, weights[age] / (h_m * h_m), weights[age]))
    return points
