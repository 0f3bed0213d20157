"""Growth-chart math: BMI, LMS z-scores and percentiles, weight-status labels.

Reference data is an LMS table (Box-Cox power L, median M, coefficient of
variation S) keyed by age in months (bmi_for_age) or recumbent length in cm
(weight_for_length). Table files are pipe-delimited rows
``metric|sex|key|L|M|S`` sorted by key within each (metric, sex) curve.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonPositiveInput, OutOfRange, ParseError, UnknownSex

BMI_FOR_AGE = "bmi_for_age"
WEIGHT_FOR_LENGTH = "weight_for_length"
METRICS = (BMI_FOR_AGE, WEIGHT_FOR_LENGTH)

LABEL_NORMAL = "normal"
LABEL_OVERWEIGHT = "overweight"
LABEL_OBESE = "obese"

OBESE_PERCENTILE = 95.0
OVERWEIGHT_PERCENTILE = 85.0

# z such that the standard normal CDF equals 0.95
Z_OBESE = 1.6448536269514722


@dataclass(frozen=True)
class GrowthAssessment:
    value: float
    z: float
    percentile: float
    label: str


def bmi(weight_kg: float, height_m: float) -> float:
    """Body mass index, weight(kg) / height(m)^2."""
    if weight_kg <= 0 or height_m <= 0:
        raise NonPositiveInput(f"weight={weight_kg}, height={height_m}")
    return weight_kg / (height_m * height_m)


def percentile_from_z(z: float) -> float:
    """Standard normal CDF times 100."""
    return 50.0 * (1.0 + math.erf(z / math.sqrt(2.0)))


def label_from_percentile(p: float) -> str:
    if p >= OBESE_PERCENTILE:
        return LABEL_OBESE
    if p >= OVERWEIGHT_PERCENTILE:
        return LABEL_OVERWEIGHT
    return LABEL_NORMAL


class LmsTable:
    """Immutable (metric, sex) -> sorted LMS curve container."""

    def __init__(self, rows):
        curves: dict[tuple[str, str], list[tuple[float, float, float, float]]] = {}
        for metric, sex, key, l, m, s in rows:
            if metric not in METRICS:
                raise ParseError(f"unknown metric {metric!r}")
            if m <= 0 or s <= 0:
                raise ParseError(f"M and S must be positive at {metric}/{sex}/{key}")
            curves.setdefault((metric, sex), []).append((key, l, m, s))
        self._curves: dict[tuple[str, str], tuple[np.ndarray, ...]] = {}
        for curve_key, pts in curves.items():
            keys = np.array([p[0] for p in pts], dtype=np.float64)
            if not np.all(np.diff(keys) > 0):
                raise ParseError(f"keys not strictly increasing for {curve_key}")
            self._curves[curve_key] = (
                keys,
                np.array([p[1] for p in pts], dtype=np.float64),
                np.array([p[2] for p in pts], dtype=np.float64),
                np.array([p[3] for p in pts], dtype=np.float64),
            )

    def _curve(self, metric: str, sex: str):
        if sex not in ("female", "male"):
            raise UnknownSex(f"sex={sex!r}")
        try:
            return self._curves[(metric, sex)]
        except KeyError:
            raise UnknownSex(f"no {metric} curve for sex={sex!r}") from None

    def key_range(self, metric: str, sex: str) -> tuple[float, float]:
        keys = self._curve(metric, sex)[0]
        return float(keys[0]), float(keys[-1])

    def lms_at(self, metric: str, sex: str, key: float) -> tuple[float, float, float]:
        """L, M, S linearly interpolated between the bracketing rows."""
        keys, ls, ms, ss = self._curve(metric, sex)
        if key < keys[0] or key > keys[-1]:
            raise OutOfRange(f"{metric} key {key} outside [{keys[0]}, {keys[-1]}]")
        return (
            float(np.interp(key, keys, ls)),
            float(np.interp(key, keys, ms)),
            float(np.interp(key, keys, ss)),
        )

    def z(self, metric: str, sex: str, key: float, x: float) -> float:
        """LMS z-score: ((x/M)^L - 1)/(L*S) for L != 0, ln(x/M)/S for L = 0."""
        if x <= 0:
            raise NonPositiveInput(f"measurement {x} must be positive")
        l, m, s = self.lms_at(metric, sex, key)
        if l == 0.0:
            return math.log(x / m) / s
        return ((x / m) ** l - 1.0) / (l * s)

    def value_at_z(self, metric: str, sex: str, key: float, z: float) -> float:
        """Inverse of :meth:`z`: the measurement sitting at a given z-score."""
        l, m, s = self.lms_at(metric, sex, key)
        if l == 0.0:
            return m * math.exp(s * z)
        base = 1.0 + l * s * z
        if base <= 0:
            raise OutOfRange(f"z={z} outside the Box-Cox support at key {key}")
        return m * base ** (1.0 / l)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def to_text(self) -> str:
        lines = []
        for (metric, sex), (keys, ls, ms, ss) in sorted(self._curves.items()):
            for k, l, m, s in zip(keys, ls, ms, ss):
                lines.append(f"{metric}|{sex}|{float(k)!r}|{float(l)!r}|{float(m)!r}|{float(s)!r}")
        return "\n".join(lines) + "\n"


def lms_z(table: LmsTable, metric: str, sex: str, key: float, x: float) -> float:
    return table.z(metric, sex, key, x)


def assess(table: LmsTable, sex: str, age_months: float, bmi_value: float) -> GrowthAssessment:
    """BMI-for-age assessment; obese at or above the 95th percentile."""
    z = table.z(BMI_FOR_AGE, sex, age_months, bmi_value)
    p = percentile_from_z(z)
    return GrowthAssessment(value=bmi_value, z=z, percentile=p, label=label_from_percentile(p))


def assess_weight_for_length(
    table: LmsTable, sex: str, length_cm: float, weight_kg: float
) -> GrowthAssessment:
    """Weight-for-length assessment for children under two."""
    z = table.z(WEIGHT_FOR_LENGTH, sex, length_cm, weight_kg)
    p = percentile_from_z(z)
    return GrowthAssessment(value=weight_kg, z=z, percentile=p, label=label_from_percentile(p))


def load_lms_table(path) -> LmsTable:
    """Parse a pipe-delimited LMS table file."""
    rows = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) != 6:
            raise ParseError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
        metric, sex = parts[0], parts[1]
        try:
            key, l, m, s = (float(v) for v in parts[2:])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
        rows.append((metric, sex, key, l, m, s))
    if not rows:
        raise ParseError(f"{path}: empty LMS table")
    return LmsTable(rows)


def reference_percentile_curves(
    table: LmsTable,
    metric: str,
    sex: str,
    percentiles=(5, 10, 25, 50, 75, 85, 90, 95),
    n_points: int = 60,
) -> dict:
    """Sample reference curves for charting; returns {percentile: [(key, value)]}."""
    lo, hi = table.key_range(metric, sex)
    keys = np.linspace(lo, hi, n_points)
    out = {}
    for p in percentiles:
        z = math.sqrt(2.0) * _erfinv(2.0 * (p / 100.0) - 1.0)
        out[p] = [(float(k), table.value_at_z(metric, sex, float(k), z)) for k in keys]
    return out


def _erfinv(y: float) -> float:
    """Inverse error function via Newton refinement of a rational seed."""
    if not -1.0 < y < 1.0:
        raise OutOfRange(f"erfinv argument {y} outside (-1, 1)")
    # Winitzki seed, then two Newton steps: more than enough for chart curves.
    a = 0.147
    ln_term = math.log(1.0 - y * y)
    seed = math.copysign(
        math.sqrt(math.sqrt((2.0 / (math.pi * a) + ln_term / 2.0) ** 2 - ln_term / a)
                  - (2.0 / (math.pi * a) + ln_term / 2.0)),
        y,
    )
    x = seed
    for _ in range(3):
        err = math.erf(x) - y
        x -= err * math.sqrt(math.pi) / 2.0 * math.exp(x * x)
    return x
