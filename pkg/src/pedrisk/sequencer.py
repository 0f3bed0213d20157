"""Turn a patient record into time-binned model inputs plus a demographic vector.

Ages are converted to months with a fixed 30.4375-day mean month so binning is
calendar-free and deterministic. Events landing in the same bin are aggregated
as a set of active input ids (binary presence), which makes the model input
independent of within-bin event order by construction.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

from .errors import InvalidSegments, OutOfSchedule
from .fhir_ingest import PatientRecord
from .registry import FeatureRegistry, quantize

DAYS_PER_MONTH = 30.4375

# monthly bins through 24 months, bimonthly afterwards
DEFAULT_SEGMENTS = ((0, 24, 1), (24, 240, 2))
# coarser variant: quarterly in year one, semiannual in year two, yearly after
COARSE_SEGMENTS = ((0, 12, 3), (12, 24, 6), (24, 240, 12))
NAMED_SCHEDULES = {"default": DEFAULT_SEGMENTS, "coarse": COARSE_SEGMENTS}


@dataclass(frozen=True)
class BinSchedule:
    segments: tuple[tuple[int, int, int], ...]
    boundaries: tuple[int, ...]

    @property
    def n_bins(self) -> int:
        return len(self.boundaries) - 1

    @property
    def span_months(self) -> int:
        return self.boundaries[-1]

    def n_bins_within(self, window_months: int) -> int:
        """Bins whose [start, end) interval lies fully inside the window."""
        return sum(1 for end in self.boundaries[1:] if end <= window_months)


@dataclass(frozen=True)
class TimeBinnedSequence:
    patient_id: str
    window_end_age_years: int
    bins: tuple[tuple[int, ...], ...]


@dataclass(frozen=True)
class DemographicVector:
    sex: int
    race: int
    ethnicity: int
    insurance: int
    region: int
    window_age: int

    def as_tuple(self) -> tuple[int, ...]:
        return (self.sex, self.race, self.ethnicity, self.insurance, self.region, self.window_age)


@dataclass(frozen=True)
class DemographicCardinalities:
    """Index 0 of every field is reserved for unknown."""

    sexes: tuple[str, ...] = ("female", "male")
    races: tuple[str, ...] = ("asian", "black", "white", "other")
    ethnicities: tuple[str, ...] = ("hispanic", "non_hispanic")
    insurances: tuple[str, ...] = ("private", "public")
    region_buckets: int = 8
    max_window_years: int = 10

    def as_tuple(self) -> tuple[int, ...]:
        return (
            len(self.sexes) + 1,
            len(self.races) + 1,
            len(self.ethnicities) + 1,
            len(self.insurances) + 1,
            self.region_buckets,
            self.max_window_years + 1,
        )


def make_schedule(segments=DEFAULT_SEGMENTS) -> BinSchedule:
    """Validate segments (contiguous from 0, widths dividing spans) and materialize boundaries."""
    segs = tuple((int(a), int(b), int(w)) for a, b, w in segments)
    if not segs:
        raise InvalidSegments("no segments")
    expected_start = 0
    boundaries = [0]
    for start, end, width in segs:
        if start != expected_start:
            raise InvalidSegments(f"segment starts at {start}, expected {expected_start}")
        if end <= start or width <= 0 or (end - start) % width != 0:
            raise InvalidSegments(f"bad segment ({start}, {end}, {width})")
        boundaries.extend(range(start + width, end + 1, width))
        expected_start = end
    return BinSchedule(segments=segs, boundaries=tuple(boundaries))


def bin_index(schedule: BinSchedule, age_days: float) -> int:
    """Index of the bin whose [start, end) month interval contains the age."""
    months = age_days / DAYS_PER_MONTH
    if age_days < 0 or months >= schedule.span_months:
        raise OutOfSchedule(f"age {age_days} days outside schedule span")
    base = 0
    for start, end, width in schedule.segments:
        if months < end:
            return base + int((months - start) // width)
        base += (end - start) // width
    raise OutOfSchedule(f"age {age_days} days outside schedule span")  # unreachable


def build_sequence(
    record: PatientRecord,
    registry: FeatureRegistry,
    schedule: BinSchedule,
    window_end_age_years: int,
) -> TimeBinnedSequence:
    """Aggregate registered events before the window end into per-bin id sets.

    Unregistered codes are dropped. Measurement values are quantized through
    the fitted registry; no unit conversion is attempted, values are assumed
    to arrive in the registry unit.
    """
    window_months = 12 * window_end_age_years
    n = schedule.n_bins_within(window_months)
    bins: list[set[int]] = [set() for _ in range(n)]
    for event in record.events:
        months = event.age_days / DAYS_PER_MONTH
        if months >= window_months:
            continue
        fid = registry.map_code(event.code_system, event.code)
        if fid is None:
            continue
        spec = registry.spec(fid)
        if spec.quantization is not None:
            if event.value is None:
                continue
            input_id = registry.input_id(fid, quantize(spec.quantization, event.value))
        else:
            input_id = registry.input_id(fid, 0)
        bins[bin_index(schedule, event.age_days)].add(input_id)
    return TimeBinnedSequence(
        patient_id=record.patient_id,
        window_end_age_years=window_end_age_years,
        bins=tuple(tuple(sorted(b)) for b in bins),
    )


def region_bucket(region_prefix: str, n_buckets: int) -> int:
    """Stable hash of a postal prefix into [1, n_buckets); 0 means unknown."""
    if not region_prefix or region_prefix == "unknown" or n_buckets < 2:
        return 0
    digest = hashlib.sha1(region_prefix.encode("utf-8")).digest()
    return 1 + int.from_bytes(digest[:4], "big") % (n_buckets - 1)


def encode_demographics(
    record: PatientRecord,
    window_end_age_years: int,
    cards: DemographicCardinalities,
) -> DemographicVector:
    def idx(value: str, vocab: tuple[str, ...]) -> int:
        return vocab.index(value) + 1 if value in vocab else 0

    window = window_end_age_years if 0 < window_end_age_years <= cards.max_window_years else 0
    return DemographicVector(
        sex=idx(record.sex, cards.sexes),
        race=idx(record.race, cards.races),
        ethnicity=idx(record.ethnicity, cards.ethnicities),
        insurance=idx(record.insurance, cards.insurances),
        region=region_bucket(record.region, cards.region_buckets),
        window_age=window,
    )


def write_sequences(path, sequences: list[TimeBinnedSequence]) -> None:
    """Columnar training cache: one `patient_id|bin|id,id` line per bin."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(f"#patient {seq.patient_id} window={seq.window_end_age_years} "
                     f"bins={len(seq.bins)}\n")
            for t, ids in enumerate(seq.bins):
                fh.write(f"{seq.patient_id}|{t}|{','.join(str(i) for i in ids)}\n")


def read_sequences(path) -> list[TimeBinnedSequence]:
    sequences: list[TimeBinnedSequence] = []
    current: list[tuple[int, ...]] | None = None
    meta: tuple[str, int] | None = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#patient "):
            if meta is not None:
                sequences.append(TimeBinnedSequence(meta[0], meta[1], tuple(current)))
            head = line.split()
            window = int(head[2].split("=")[1])
            meta = (head[1], window)
            current = []
            continue
        if not line.strip():
            continue
        _, _, ids = line.split("|")
        current.append(tuple(int(v) for v in ids.split(",")) if ids else ())
    if meta is not None:
        sequences.append(TimeBinnedSequence(meta[0], meta[1], tuple(current)))
    return sequences
