"""Shared prediction path behind the CLI `predict` and the REST endpoints.

Both interfaces build the document through `predict_from_record` and emit it
with `canonical_json`, so equivalent inputs produce byte-identical results.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import Ineligible, NonPositiveInput, OutOfRange, UnknownSex
from .fhir_ingest import PatientRecord, bmi_history
from .growth import BMI_FOR_AGE, LmsTable, load_lms_table, percentile_from_z
from .model import ModelWeights, forward, load, rank_risk_factors
from .registry import FeatureRegistry, load_registry
from .sequencer import (
    DemographicCardinalities,
    build_sequence,
    encode_demographics,
    make_schedule,
)

SUPPORTED_WINDOWS = (2, 3, 4, 5, 6, 7)
DISCLAIMER_ID = "research-demo-not-clinical-advice"
SCHEMA_VERSION = "v1"


@dataclass
class PredictorContext:
    weights: ModelWeights
    registry: FeatureRegistry
    lms: LmsTable
    schedule: object
    cards: DemographicCardinalities
    top_k: int = 5


def load_context(weights_path, registry_path, lms_path, top_k: int = 5) -> PredictorContext:
    """Load the frozen registry + weights, pinning the registry fingerprint."""
    registry = load_registry(registry_path)
    weights = load(weights_path, expected_fingerprint=registry.fingerprint())
    segments = weights.meta.get("schedule_segments")
    schedule = make_schedule([tuple(s) for s in segments]) if segments else make_schedule()
    cards_meta = weights.meta.get("cards")
    if cards_meta:
        cards = DemographicCardinalities(
            sexes=tuple(cards_meta["sexes"]), races=tuple(cards_meta["races"]),
            ethnicities=tuple(cards_meta["ethnicities"]),
            insurances=tuple(cards_meta["insurances"]),
            region_buckets=int(cards_meta["region_buckets"]),
            max_window_years=int(cards_meta["max_window_years"]))
    else:
        cards = DemographicCardinalities()
    return PredictorContext(weights=weights, registry=registry,
                            lms=load_lms_table(lms_path), schedule=schedule, cards=cards,
                            top_k=top_k)


def _round(x, digits: int = 6):
    return None if x is None else round(float(x), digits)


def _history_percentile(ctx: PredictorContext, record: PatientRecord,
                        age_days: int, bmi_value: float):
    if record.sex not in ("female", "male"):
        return None
    months = age_days / 30.4375
    lo, hi = ctx.lms.key_range(BMI_FOR_AGE, record.sex)
    if not lo <= months <= hi:
        return None
    try:
        z = ctx.lms.z(BMI_FOR_AGE, record.sex, months, bmi_value)
    except (OutOfRange, NonPositiveInput, UnknownSex):
        return None
    return percentile_from_z(z)


def _height_extrapolator(record: PatientRecord):
    """Linear height trend from the last two height observations, slope clamped
    non-negative; used only to translate BMI predictions into weight points."""
    heights = [(e.age_days, e.value) for e in record.events
               if e.domain == "measurement" and e.code == "8302-2" and e.value]
    if not heights:
        return lambda age_days: None
    heights.sort()
    t_last, h_last = heights[-1]
    slope = 0.0
    if len(heights) >= 2:
        t_prev, h_prev = heights[-2]
        if t_last > t_prev:
            slope = max(0.0, (h_last - h_prev) / (t_last - t_prev))
    return lambda age_days: min(h_last + slope * max(0.0, age_days - t_last), 200.0)


def predict_from_record(ctx: PredictorContext, record: PatientRecord) -> dict:
    """Run the full pipeline for one record and shape the versioned response.

    The response deliberately omits race, ethnicity, and address-derived
    fields: the UI shows identity and dates only.
    """
    if not record.events:
        raise Ineligible("record has no clinical events")
    age_days = record.events[-1].age_days
    window = int(age_days // 365.25)
    if window < SUPPORTED_WINDOWS[0] or window > SUPPORTED_WINDOWS[-1]:
        raise Ineligible(
            f"age {age_days / 365.25:.1f}y outside supported windows "
            f"{SUPPORTED_WINDOWS[0]}-{SUPPORTED_WINDOWS[-1]}y")
    history = bmi_history(record)
    if not history:
        raise Ineligible("no BMI history (need a BMI observation or a "
                         "weight+height pair)")

    sequence = build_sequence(record, ctx.registry, ctx.schedule, window)
    demo = encode_demographics(record, window, ctx.cards)
    output = forward(ctx.weights, sequence, demo)
    factors = rank_risk_factors(output, sequence, ctx.registry, ctx.top_k)
    conformal = ctx.weights.meta.get("conformal") or {}
    half_widths = conformal.get("half_widths", [None, None, None])
    height_at = _height_extrapolator(record)

    history_points = []
    for h_age, bmi_value, weight in history:
        history_points.append({
            "age_years": _round(h_age / 365.25),
            "bmi": _round(bmi_value),
            "weight_kg": _round(weight),
            "percentile": _round(_history_percentile(ctx, record, h_age, bmi_value)),
        })

    horizons = []
    predicted_points = []
    for h in (1, 2, 3):
        risk = float(output.prob_obese[h - 1])
        bmi_pred = float(output.bmi_pred[h - 1])
        age_years = window + h
        pct = None
        if record.sex in ("female", "male") and bmi_pred > 0:
            try:
                z = ctx.lms.z(BMI_FOR_AGE, record.sex, age_years * 12.0, bmi_pred)
                pct = percentile_from_z(z)
            except (OutOfRange, NonPositiveInput, UnknownSex):
                pct = None
        half_width = half_widths[h - 1] if h - 1 < len(half_widths) else None
        horizons.append({
            "offset_years": h,
            "age_years": age_years,
            "risk": _round(risk),
            "bmi_pred": _round(bmi_pred),
            "conformal_half_width": _round(half_width),
            "percentile_pred": _round(pct),
        })
        height_cm = height_at(age_years * 365.25)
        weight_pred = None
        weight_half_width = None
        if height_cm:
            weight_pred = bmi_pred * (height_cm / 100.0) ** 2
            if half_width is not None:
                weight_half_width = half_width * (height_cm / 100.0) ** 2
        predicted_points.append({
            "age_years": age_years,
            "bmi": _round(bmi_pred),
            "weight_kg": _round(weight_pred),
            "percentile": _round(pct),
            "half_width": _round(half_width),
            "half_width_weight": _round(weight_half_width),
            "risk": _round(risk),
        })

    return {
        "schema_version": SCHEMA_VERSION,
        "patient_id": record.patient_id,
        "as_of_age_years": window,
        "model_version": ctx.weights.meta.get("model_version", "uninitialized"),
        "registry_fingerprint": ctx.weights.meta.get("registry_fingerprint", ""),
        "disclaimer_id": DISCLAIMER_ID,
        "horizons": horizons,
        "trajectory": {"history": history_points, "predicted": predicted_points},
        "risk_factors": [
            {"label": label, "domain": domain, "score": _round(score)}
            for label, domain, score in factors
        ],
    }


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
