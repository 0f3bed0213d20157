import json
from datetime import date

import pytest

from pedrisk.errors import (
    MalformedDocument,
    MissingDate,
    MissingPatient,
    MultiplePatients,
    NegativeAge,
    NotFound,
    PaginationLoop,
    PedriskError,
    SchemaViolation,
    Transport,
    Unauthorized,
)
from pedrisk.fhir_ingest import (
    fetch_patient_everything,
    parse_bundle,
    to_patient_record,
)

from .mock_fhir import MockFhirServer


def bundle_of(*resources, timestamp="2023-06-01"):
    return json.dumps({
        "resourceType": "Bundle", "type": "collection", "timestamp": timestamp,
        "entry": [{"resource": r} for r in resources],
    })


PATIENT = {"resourceType": "Patient", "id": "p1", "gender": "male",
           "birthDate": "2018-01-01"}


def obs(code="29463-7", when="2018-01-31", value=5.1, pid="p1"):
    return {"resourceType": "Observation", "id": f"o-{code}-{when}",
            "subject": {"reference": f"Patient/{pid}"},
            "code": {"coding": [{"system": "http://loinc.org", "code": code}]},
            "effectiveDateTime": when,
            "valueQuantity": {"value": value, "unit": "kg"}}


def condition(code="195967001", when="2018-03-01", pid="p1"):
    return {"resourceType": "Condition", "id": f"c-{code}",
            "subject": {"reference": f"Patient/{pid}"},
            "code": {"coding": [{"system": "http://snomed.info/sct", "code": code}]},
            "onsetDateTime": when}


class TestParseBundle:
    def test_counts(self):
        rs = parse_bundle(bundle_of(PATIENT, obs(), obs(code="8302-2"), condition()))
        assert rs.counts()["observations"] == 2
        assert rs.counts()["conditions"] == 1
        assert rs.skipped_unknown_type == 0

    def test_empty_bundle_missing_patient(self):
        assert_raises = pytest.raises(MissingPatient)
        with assert_raises:
            parse_bundle(json.dumps({"resourceType": "Bundle", "type": "collection"}))

    def test_invalid_json(self):
        with pytest.raises(MalformedDocument):
            parse_bundle(b"{")

    def test_not_utf8(self):
        with pytest.raises(MalformedDocument):
            parse_bundle(b"\xff\xfe\x00" + b"junk")

    def test_multiple_patients(self):
        with pytest.raises(MultiplePatients):
            parse_bundle(bundle_of(PATIENT, dict(PATIENT, id="p2")))

    def test_missing_birthdate(self):
        with pytest.raises(SchemaViolation):
            parse_bundle(bundle_of({"resourceType": "Patient", "id": "p1"}))

    def test_not_a_bundle(self):
        with pytest.raises(SchemaViolation):
            parse_bundle(json.dumps(PATIENT))

    def test_stu3_rejected(self):
        doc = json.loads(bundle_of(PATIENT))
        doc["fhirVersion"] = "3.0.2"
        with pytest.raises(SchemaViolation):
            parse_bundle(json.dumps(doc))

    def test_unknown_types_counted(self):
        rs = parse_bundle(bundle_of(PATIENT, {"resourceType": "Device", "id": "d"}))
        assert rs.skipped_unknown_type == 1

    def test_foreign_subject_rejected(self):
        rs = parse_bundle(bundle_of(PATIENT, obs(pid="someone-else")))
        assert rs.rejected_foreign_subject == 1
        assert rs.counts()["observations"] == 0

    def test_fuzz_total_on_mutations(self, fixture_bundle_bytes):
        # parse_bundle returns a value or a typed error, never crashes
        import random

        rnd = random.Random(1234)
        base = bytearray(fixture_bundle_bytes)
        for _ in range(2000):
            mutated = bytearray(base)
            for _ in range(rnd.randint(1, 8)):
                pos = rnd.randrange(len(mutated))
                op = rnd.random()
                if op < 0.4:
                    mutated[pos] = rnd.randrange(256)
                elif op < 0.7:
                    del mutated[pos]
                else:
                    mutated.insert(pos, rnd.randrange(256))
            try:
                parse_bundle(bytes(mutated))
            except PedriskError:
                pass


class TestToPatientRecord:
    def test_age_arithmetic(self):
        rs = parse_bundle(bundle_of(PATIENT, obs(when="2018-01-31")))
        record = to_patient_record(rs)
        assert len(record.events) == 1
        assert record.events[0].age_days == 30
        assert record.events[0].value == 5.1

    def test_empty_events(self):
        record = to_patient_record(parse_bundle(bundle_of(PATIENT)))
        assert record.events == ()
        assert record.birth_date == date(2018, 1, 1)

    def test_negative_age(self):
        with pytest.raises(NegativeAge):
            to_patient_record(parse_bundle(bundle_of(PATIENT, condition(when="2017-12-01"))))

    def test_missing_date(self):
        c = condition()
        del c["onsetDateTime"]
        with pytest.raises(MissingDate):
            to_patient_record(parse_bundle(bundle_of(PATIENT, c)))

    def test_condition_recorded_date_fallback(self):
        c = condition()
        del c["onsetDateTime"]
        c["recordedDate"] = "2018-05-01"
        record = to_patient_record(parse_bundle(bundle_of(PATIENT, c)))
        assert record.events[0].age_days == 120

    def test_events_sorted_nonnegative(self):
        rs = parse_bundle(bundle_of(PATIENT, obs(when="2019-01-01"), condition(),
                                    obs(code="8302-2", when="2018-02-01", value=60.0)))
        record = to_patient_record(rs)
        ages = [e.age_days for e in record.events]
        assert ages == sorted(ages)
        assert all(a >= 0 for a in ages)

    def test_family_history_uses_recording_date(self):
        fmh = {"resourceType": "FamilyMemberHistory", "id": "f1",
               "patient": {"reference": "Patient/p1"}, "date": "2018-02-01",
               "condition": [{"code": {"coding": [
                   {"system": "http://snomed.info/sct", "code": "160303001"}]}}]}
        record = to_patient_record(parse_bundle(bundle_of(PATIENT, fmh)))
        assert record.events[0].domain == "family_history"
        assert record.events[0].age_days == 31

    def test_coverage_classifies_insurance(self):
        cov = {"resourceType": "Coverage", "id": "cv",
               "beneficiary": {"reference": "Patient/p1"},
               "type": {"coding": [{"code": "medicaid"}]}}
        record = to_patient_record(parse_bundle(bundle_of(PATIENT, cov)))
        assert record.insurance == "public"
        bare = to_patient_record(parse_bundle(bundle_of(PATIENT)))
        assert bare.insurance == "unknown"

    def test_unknown_sex_kept(self):
        p = dict(PATIENT)
        p["gender"] = "other"
        record = to_patient_record(parse_bundle(bundle_of(p)))
        assert record.sex == "unknown"


class TestFetch:
    @pytest.fixture()
    def server(self, fixture_bundle):
        with MockFhirServer(page_size=2) as srv:
            srv.load_bundle(fixture_bundle)
            yield srv

    def test_fetch_merges_pages(self, fixture_bundle, server):
        pid = next(e["resource"]["id"] for e in fixture_bundle["entry"]
                   if e["resource"]["resourceType"] == "Patient")
        rs = fetch_patient_everything(server.base_url, pid)
        expected_obs = sum(1 for e in fixture_bundle["entry"]
                           if e["resource"]["resourceType"] == "Observation")
        assert rs.counts()["observations"] == expected_obs
        assert rs.source == "fetched"

    def test_fetch_pagination_exact_counts(self):
        with MockFhirServer(page_size=2) as srv:
            srv.add_patient(PATIENT, [obs(when=f"2018-02-{d:02d}") for d in range(1, 7)])
            rs = fetch_patient_everything(srv.base_url, "p1")
            assert rs.counts()["observations"] == 6

    def test_fetch_not_found(self):
        with MockFhirServer() as srv:
            srv.add_patient(PATIENT, [])
            with pytest.raises(NotFound):
                fetch_patient_everything(srv.base_url, "ghost")

    def test_fetch_pagination_loop(self):
        with MockFhirServer(page_size=2, loop_type="Observation") as srv:
            srv.add_patient(PATIENT, [obs(when=f"2018-02-{d:02d}") for d in range(1, 7)])
            with pytest.raises(PaginationLoop):
                fetch_patient_everything(srv.base_url, "p1")

    def test_fetch_unauthorized(self):
        with MockFhirServer(require_token="sekrit") as srv:
            srv.add_patient(PATIENT, [])
            with pytest.raises(Unauthorized):
                fetch_patient_everything(srv.base_url, "p1")
            rs = fetch_patient_everything(srv.base_url, "p1", auth_token="sekrit")
            assert rs.patient["id"] == "p1"

    def test_fetch_unreachable(self):
        with pytest.raises(Transport):
            fetch_patient_everything("http://127.0.0.1:9/fhir", "p1", timeout=0.5)

    def test_fetched_equals_posted(self, fixture_bundle, fixture_bundle_bytes, server):
        pid = next(e["resource"]["id"] for e in fixture_bundle["entry"]
                   if e["resource"]["resourceType"] == "Patient")
        via_post = to_patient_record(parse_bundle(fixture_bundle_bytes))
        via_get = to_patient_record(fetch_patient_everything(server.base_url, pid))
        assert via_get.events == via_post.events
        assert via_get.patient_id == via_post.patient_id
        assert via_get.insurance == via_post.insurance
