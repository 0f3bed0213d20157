"""Cohort splitting, labeling, class balancing, the training loop, and evaluation.

Labels come from the record itself: a horizon is labeled when a BMI point
exists within two months of the target age (window + horizon years), assessed
against the growth reference. Splits are patient-level, conformal residuals
come from the validation split only, and everything is seed-deterministic.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SingleClass, TooSmall
from .fhir_ingest import PatientRecord, bmi_history
from .growth import BMI_FOR_AGE, OBESE_PERCENTILE, LmsTable, WEIGHT_FOR_LENGTH, percentile_from_z
from .metrics import auroc, bootstrap_ci, conformal_interval, net_benefit
from .model import (
    AdamState,
    Batch,
    ModelConfig,
    ModelWeights,
    backward_and_step,
    init,
)
from .model.net import eval_loss, make_batch, predict_batch
from .registry import FeatureRegistry, fit_cohort_quantiles
from .sequencer import (
    DAYS_PER_MONTH,
    BinSchedule,
    DemographicCardinalities,
    build_sequence,
    encode_demographics,
)

LABEL_TOLERANCE_DAYS = 62
NET_BENEFIT_THRESHOLDS = (0.2, 0.4, 0.6)
PACKAGE_VERSION = "0.1.0"


@dataclass
class LabeledExample:
    patient_id: str
    window: int
    sequence: object
    demo: object
    label_obese: tuple[bool | None, bool | None, bool | None]
    label_bmi: tuple[float | None, float | None, float | None]
    mask: tuple[bool, bool, bool]
    strata: dict


@dataclass
class TrainConfig:
    windows: tuple[int, ...] = (2, 3, 4, 5, 6, 7)
    epochs: int = 50
    batch_size: int = 64
    lr: float = 2e-3
    patience: int = 5
    min_delta: float = 1e-4
    undersample_ratio: float = 1.0
    conformal_alpha: float = 0.1
    bootstrap_reps: int = 100
    seed: int = 0


# --- labeling -------------------------------------------------------------------

def _nearest_bmi(points, target_days: int):
    best = None
    for age_days, bmi_value, _ in points:
        gap = abs(age_days - target_days)
        if gap <= LABEL_TOLERANCE_DAYS and (best is None or gap < best[0]):
            best = (gap, age_days, bmi_value)
    return best


def _wfl_category(record: PatientRecord, lms: LmsTable) -> str:
    """Last weight-for-length status before age two, three categories."""
    if record.sex not in ("female", "male"):
        return "wfl_unknown"
    weights: dict[int, float] = {}
    lengths: dict[int, float] = {}
    for e in record.events:
        if e.domain != "measurement" or e.value is None or e.age_days >= 730:
            continue
        if e.code == "29463-7":
            weights[e.age_days] = e.value
        elif e.code == "8302-2":
            lengths[e.age_days] = e.value
    for age in sorted(set(weights) & set(lengths), reverse=True):
        length = lengths[age]
        lo, hi = lms.key_range(WEIGHT_FOR_LENGTH, record.sex)
        if not lo <= length <= hi:
            continue
        z = lms.z(WEIGHT_FOR_LENGTH, record.sex, length, weights[age])
        pct = percentile_from_z(z)
        if pct >= 95:
            return "wfl_very_high"
        if pct >= 85:
            return "wfl_high"
        return "wfl_normal"
    return "wfl_unknown"


def build_examples(
    cohort: list[tuple[PatientRecord, dict]],
    registry: FeatureRegistry,
    schedule: BinSchedule,
    cards: DemographicCardinalities,
    lms: LmsTable,
    windows=(2, 3, 4, 5, 6, 7),
) -> list[LabeledExample]:
    """One example per (patient, window) with at least one labeled horizon."""
    examples = []
    for record, meta in cohort:
        points = bmi_history(record)
        span_days = record.events[-1].age_days if record.events else 0
        wfl = _wfl_category(record, lms)
        for window in windows:
            if span_days < window * 365.25:
                continue
            labels_o: list[bool | None] = [None, None, None]
            labels_b: list[float | None] = [None, None, None]
            mask = [False, False, False]
            if record.sex in ("female", "male"):
                for h in (1, 2, 3):
                    target = int(round(12 * (window + h) * DAYS_PER_MONTH))
                    hit = _nearest_bmi(points, target)
                    if hit is None:
                        continue
                    _, age_days, bmi_value = hit
                    months = age_days / DAYS_PER_MONTH
                    lo, hi = lms.key_range(BMI_FOR_AGE, record.sex)
                    if not lo <= months <= hi:
                        continue
                    z = lms.z(BMI_FOR_AGE, record.sex, months, bmi_value)
                    labels_o[h - 1] = percentile_from_z(z) >= OBESE_PERCENTILE
                    labels_b[h - 1] = bmi_value
                    mask[h - 1] = True
            if not any(mask):
                continue
            examples.append(LabeledExample(
                patient_id=record.patient_id,
                window=window,
                sequence=build_sequence(record, registry, schedule, window),
                demo=encode_demographics(record, window, cards),
                label_obese=tuple(labels_o),
                label_bmi=tuple(labels_b),
                mask=tuple(mask),
                strata={
                    "sex": record.sex, "race": record.race,
                    "ethnicity": record.ethnicity, "payer": record.insurance,
                    "wfl": wfl, "site": meta.get("site", "unknown"),
                    "index_year": meta.get("index_year", 0),
                },
            ))
    return examples


# --- splitting and balancing -------------------------------------------------

def split(cohort: list, seed: int) -> tuple[list, list, list]:
    """Patient-level 80:20 train/test with 5% of train peeled off as validation."""
    n = len(cohort)
    if n < 20:
        raise TooSmall(f"cohort of {n} patients cannot be split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_test = int(round(0.2 * n))
    n_val = int(round(0.05 * (n - n_test)))
    test = [cohort[i] for i in order[:n_test]]
    val = [cohort[i] for i in order[n_test:n_test + n_val]]
    train = [cohort[i] for i in order[n_test + n_val:]]
    return train, val, test


def undersample(examples: list[LabeledExample], target_ratio: float = 1.0,
                seed: int = 0) -> list[LabeledExample]:
    """Randomly drop majority-class (non-obese at horizon 1) examples until the
    majority:minority ratio is at most target_ratio."""
    pos = [e for e in examples if e.mask[0] and e.label_obese[0]]
    neg = [e for e in examples if e.mask[0] and e.label_obese[0] is False]
    rest = [e for e in examples if not e.mask[0]]
    if not pos or not neg:
        raise SingleClass(f"{len(pos)} positive / {len(neg)} negative at horizon 1")
    majority, minority = (neg, pos) if len(neg) >= len(pos) else (pos, neg)
    limit = int(math.floor(target_ratio * len(minority)))
    if len(majority) <= limit:
        return examples
    rng = np.random.default_rng(seed)
    keep_idx = set(rng.choice(len(majority), size=limit, replace=False).tolist())
    kept_majority = [e for i, e in enumerate(majority) if i in keep_idx]
    kept = set(map(id, kept_majority)) | set(map(id, minority)) | set(map(id, rest))
    return [e for e in examples if id(e) in kept]


def _batches(examples: list[LabeledExample], batch_size: int, order=None):
    idx = range(len(examples)) if order is None else order
    chunk: list[LabeledExample] = []
    for i in idx:
        chunk.append(examples[i])
        if len(chunk) == batch_size:
            yield chunk
            chunk = []
    if chunk:
        yield chunk


def _to_batch(chunk: list[LabeledExample]) -> Batch:
    return make_batch(
        [e.sequence for e in chunk],
        [e.demo for e in chunk],
        label_obese=[[float(v) if v is not None else 0.0 for v in e.label_obese]
                     for e in chunk],
        label_bmi=[[v if v is not None else 0.0 for v in e.label_bmi] for e in chunk],
        mask=[[float(m) for m in e.mask] for e in chunk],
    )


def score_examples(weights: ModelWeights, examples: list[LabeledExample],
                   batch_size: int = 256):
    """Eval-mode scores for a pile of examples: (probs (n, 3), bmi (n, 3))."""
    probs, bmi = [], []
    for chunk in _batches(examples, batch_size):
        p, b = predict_batch(weights, _to_batch(chunk))
        probs.append(p)
        bmi.append(b)
    if not probs:
        return np.zeros((0, 3)), np.zeros((0, 3))
    return np.vstack(probs), np.vstack(bmi)


# --- evaluation -----------------------------------------------------------------

@dataclass
class EvalReport:
    cells: dict = field(default_factory=dict)       # (window, horizon) -> metrics
    subgroups: dict = field(default_factory=dict)   # key -> category -> auroc
    temporal: dict = field(default_factory=dict)    # horizon -> auroc (latest year)
    geographic: dict = field(default_factory=dict)  # site -> horizon -> auroc
    metadata: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "cells": {f"{w}-{h}": m for (w, h), m in sorted(self.cells.items())},
            "subgroups": self.subgroups,
            "temporal": self.temporal,
            "geographic": self.geographic,
            "metadata": self.metadata,
            "flags": self.flags,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1, sort_keys=True),
                              encoding="utf-8")

    def metrics_table(self) -> str:
        """Flat table, one block per task, windows as rows and horizons as columns."""
        windows = sorted({w for w, _ in self.cells})
        lines = ["task|input_years|next_1yr|next_2yr|next_3yr"]
        for task, key, fmt in (
            ("classification_auroc", "auroc", "{:.3f}"),
            ("regression_mae", "mae", "{:.3f}"),
        ):
            for w in windows:
                row = [task, f"0-{w}"]
                for h in (1, 2, 3):
                    cell = self.cells.get((w, h), {})
                    value = cell.get(key)
                    extra = cell.get("auroc_ci") if key == "auroc" else (
                        [cell.get("conformal_half_width")] * 2)
                    if value is None:
                        row.append("na")
                    elif key == "auroc" and extra and extra[0] is not None:
                        row.append(f"{value:.3f} ({extra[0]:.3f}-{extra[1]:.3f})")
                    elif key == "mae" and extra and extra[0] is not None:
                        row.append(f"{value:.3f} ({extra[0]:.3f})")
                    else:
                        row.append(fmt.format(value))
                lines.append("|".join(row))
        return "\n".join(lines) + "\n"


def _safe_auroc(scores, labels):
    labels = np.asarray(labels, dtype=bool)
    if labels.size == 0 or labels.all() or not labels.any():
        return None
    return auroc(scores, labels)


def evaluate(weights: ModelWeights, examples: list[LabeledExample],
             bootstrap_reps: int = 100, seed: int = 0,
             with_subgroups: bool = True) -> EvalReport:
    """Metrics per (input window, horizon) plus subgroup, temporal, and
    geographic slices on the held-out examples."""
    report = EvalReport()
    if not examples:
        raise TooSmall("no examples to evaluate")
    probs, bmi = score_examples(weights, examples)
    half_widths = (weights.meta.get("conformal") or {}).get("half_widths", [None] * 3)

    windows = sorted({e.window for e in examples})
    for window in windows:
        sel = [i for i, e in enumerate(examples) if e.window == window]
        for h in (1, 2, 3):
            idx = [i for i in sel if examples[i].mask[h - 1]]
            if not idx:
                continue
            y = np.array([examples[i].label_obese[h - 1] for i in idx], dtype=bool)
            s = probs[idx, h - 1]
            y_bmi = np.array([examples[i].label_bmi[h - 1] for i in idx])
            p_bmi = bmi[idx, h - 1]
            cell = {
                "n": len(idx),
                "prevalence": float(y.mean()),
                "auroc": _safe_auroc(s, y),
                "auroc_ci": None,
                "mae": float(np.mean(np.abs(p_bmi - y_bmi))),
                "conformal_half_width": half_widths[h - 1],
                "net_benefit": {str(pt): net_benefit(s, y, pt)
                                for pt in NET_BENEFIT_THRESHOLDS},
            }
            if cell["auroc"] is not None and len(idx) >= 10:
                try:
                    cell["auroc_ci"] = list(bootstrap_ci(
                        auroc, s, y, reps=bootstrap_reps, seed=seed + window * 10 + h))
                except Exception:
                    report.flags.append(f"bootstrap_degenerate_w{window}_h{h}")
            if cell["auroc"] is not None and cell["auroc"] < 0.5:
                report.flags.append(f"auroc_below_chance_w{window}_h{h}")
            report.cells[(window, h)] = cell

    # pooled horizon-1 slices over all windows
    def pooled_auroc(indices):
        idx = [i for i in indices if examples[i].mask[0]]
        if not idx:
            return None
        return _safe_auroc(probs[idx, 0],
                           [examples[i].label_obese[0] for i in idx])

    if with_subgroups:
        for key in ("sex", "race", "ethnicity", "payer", "wfl"):
            categories = sorted({e.strata.get(key, "unknown") for e in examples})
            report.subgroups[key] = {}
            for cat in categories:
                value = pooled_auroc([i for i, e in enumerate(examples)
                                      if e.strata.get(key) == cat])
                if value is not None:
                    report.subgroups[key][cat] = value

        years = sorted({e.strata.get("index_year", 0) for e in examples})
        if years:
            latest = years[-1]
            for h in (1, 2, 3):
                idx = [i for i, e in enumerate(examples)
                       if e.strata.get("index_year") == latest and e.mask[h - 1]]
                if idx:
                    value = _safe_auroc(probs[idx, h - 1],
                                        [examples[i].label_obese[h - 1] for i in idx])
                    if value is not None:
                        report.temporal[str(h)] = value
            report.metadata["temporal_holdout_year"] = latest

        for site in sorted({e.strata.get("site", "unknown") for e in examples}):
            by_h = {}
            for h in (1, 2, 3):
                idx = [i for i, e in enumerate(examples)
                       if e.strata.get("site") == site and e.mask[h - 1]]
                if idx:
                    value = _safe_auroc(probs[idx, h - 1],
                                        [examples[i].label_obese[h - 1] for i in idx])
                    if value is not None:
                        by_h[str(h)] = value
            if by_h:
                report.geographic[site] = by_h

    report.metadata.update({
        "n_examples": len(examples),
        "n_patients": len({e.patient_id for e in examples}),
        "windows": windows,
        "seed": seed,
        "model_version": weights.meta.get("model_version", "uninitialized"),
    })
    return report


# --- measurement collection for quantile fitting --------------------------------

def collect_measurements(cohort, registry: FeatureRegistry) -> dict[int, np.ndarray]:
    values: dict[int, list[float]] = {}
    for record, _ in cohort:
        for e in record.events:
            if e.domain != "measurement" or e.value is None:
                continue
            fid = registry.map_code(e.code_system, e.code)
            if fid is None:
                continue
            values.setdefault(fid, []).append(e.value)
    return {fid: np.asarray(v) for fid, v in values.items()}


# --- training loop ----------------------------------------------------------------

def train(
    cohort: list[tuple[PatientRecord, dict]],
    registry: FeatureRegistry,
    lms: LmsTable,
    schedule: BinSchedule,
    cards: DemographicCardinalities,
    train_cfg: TrainConfig,
    model_overrides: dict | None = None,
    callbacks=None,
):
    """Full pipeline: split, fit quantiles, build examples, undersample, train
    with early stopping, conformal calibration on validation, evaluate on test.

    Returns (weights, report, fitted_registry).
    """
    train_pat, val_pat, test_pat = split(cohort, train_cfg.seed)
    fitted = fit_cohort_quantiles(registry, collect_measurements(train_pat, registry))

    train_ex = build_examples(train_pat, fitted, schedule, cards, lms, train_cfg.windows)
    val_ex = build_examples(val_pat, fitted, schedule, cards, lms, train_cfg.windows)
    test_ex = build_examples(test_pat, fitted, schedule, cards, lms, train_cfg.windows)
    if not train_ex or not val_ex or not test_ex:
        raise TooSmall("a split produced no labeled examples")
    train_ex = undersample(train_ex, train_cfg.undersample_ratio, train_cfg.seed)

    overrides = dict(model_overrides or {})
    overrides.setdefault("seed", train_cfg.seed)
    config = ModelConfig(
        vocab_size=fitted.input_vocab_size,
        demo_cardinalities=cards.as_tuple(),
        **overrides,
    )
    weights = init(config)
    opt = AdamState.for_weights(weights, seed=train_cfg.seed + 1)
    shuffle_rng = np.random.default_rng(train_cfg.seed + 2)

    val_batches = [_to_batch(c) for c in _batches(val_ex, 256)]

    def val_loss_of(w):
        losses = [eval_loss(w, b) * b.size for b in val_batches]
        return float(sum(losses) / sum(b.size for b in val_batches))

    best_val = math.inf
    best_weights = weights.copy()
    stale = 0
    epochs_run = 0
    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(train_ex))
        losses = []
        for chunk in _batches(train_ex, train_cfg.batch_size, order):
            _, step_metrics = backward_and_step(weights, _to_batch(chunk), opt,
                                                train_cfg.lr)
            losses.append(step_metrics["loss"])
        current_val = val_loss_of(weights)
        epochs_run = epoch + 1
        if callbacks:
            callbacks(epoch, float(np.mean(losses)), current_val)
        if current_val < best_val - train_cfg.min_delta:
            best_val = current_val
            best_weights = weights.copy()
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    weights = best_weights

    # split-conformal calibration from validation residuals, never test
    half_widths: list[float | None] = []
    val_probs, val_bmi = score_examples(weights, val_ex)
    for h in (1, 2, 3):
        idx = [i for i, e in enumerate(val_ex) if e.mask[h - 1]]
        residuals = [abs(val_bmi[i, h - 1] - val_ex[i].label_bmi[h - 1]) for i in idx]
        try:
            half_widths.append(conformal_interval(residuals, train_cfg.conformal_alpha))
        except Exception:
            half_widths.append(None)

    fingerprint = fitted.fingerprint()
    weights.meta.update({
        "registry_fingerprint": fingerprint,
        "model_version": f"pedrisk-{PACKAGE_VERSION}+{fingerprint[:8]}s{train_cfg.seed}",
        "conformal": {"alpha": train_cfg.conformal_alpha, "half_widths": half_widths},
        "schedule_segments": [list(s) for s in schedule.segments],
        "cards": {
            "sexes": list(cards.sexes), "races": list(cards.races),
            "ethnicities": list(cards.ethnicities), "insurances": list(cards.insurances),
            "region_buckets": cards.region_buckets,
            "max_window_years": cards.max_window_years,
        },
        "windows": list(train_cfg.windows),
        "training": {"epochs_run": epochs_run, "best_val_loss": best_val,
                     "n_train_examples": len(train_ex)},
    })

    report = evaluate(weights, test_ex, bootstrap_reps=train_cfg.bootstrap_reps,
                      seed=train_cfg.seed)
    report.metadata["n_train_examples"] = len(train_ex)
    report.metadata["n_val_examples"] = len(val_ex)
    return weights, report, fitted
