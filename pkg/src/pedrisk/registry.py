"""Curated concept registry: code -> feature id mapping and measurement quantization.

Registry files are UTF-8 pipe-delimited text. The first non-comment line is a
header ``#domains cond=<n> famhx=<n> med=<n> meas=<n>`` whose counts must
match the rows. Each row is::

    feature_id|domain|label|code_system:code[,code_system:code...]|quant=<spec>

where ``<spec>`` is ``none``, ``qN`` (fit N cohort quantiles later) or a
comma-separated list of fixed edges, optionally suffixed ``@unit``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateCode,
    InsufficientData,
    NonMonotoneEdges,
    NotFitted,
    ParseError,
)

DOMAINS = ("condition", "medication", "procedure", "measurement", "family_history")
HEADER_KEYS = {"cond": "condition", "famhx": "family_history", "med": "medication", "meas": "measurement"}

MODE_FIXED = "fixed_edges"
MODE_COHORT = "cohort_quantiles"


@dataclass(frozen=True)
class QuantizationSpec:
    mode: str
    unit: str = ""
    edges: tuple[float, ...] | None = None
    quantile_count: int | None = None

    def validate(self) -> None:
        if self.mode == MODE_FIXED:
            if not self.edges or len(self.edges) < 1:
                raise ParseError("fixed_edges spec needs at least one edge")
            if any(b <= a for a, b in zip(self.edges, self.edges[1:])):
                raise NonMonotoneEdges(f"edges {self.edges} not strictly increasing")
        elif self.mode == MODE_COHORT:
            if self.quantile_count is None or not (2 <= self.quantile_count <= 10):
                raise ParseError(f"quantile_count {self.quantile_count} outside [2, 10]")
        else:
            raise ParseError(f"unknown quantization mode {self.mode!r}")

    @property
    def n_bins(self) -> int:
        if self.mode != MODE_FIXED or self.edges is None:
            raise NotFitted("quantization not fitted; bin count unknown")
        return len(self.edges) + 1


@dataclass(frozen=True)
class FeatureSpec:
    feature_id: int
    domain: str
    label: str
    codes: tuple[tuple[str, str], ...]
    quantization: QuantizationSpec | None = None


def quantize(spec: QuantizationSpec, value: float) -> int:
    """Bin index = count of edges <= value, in [0, len(edges)]."""
    if spec.mode != MODE_FIXED or spec.edges is None:
        raise NotFitted("spec is still cohort_quantiles")
    return int(np.searchsorted(np.asarray(spec.edges), value, side="right"))


class FeatureRegistry:
    """Immutable feature dictionary with dense ids and an expanded input-id space.

    Presence-style features (conditions, medications, procedures, family
    history) occupy one model input id each; a fitted measurement with E edges
    occupies E+1 ids, one per quantization bin.
    """

    def __init__(self, entries: list[FeatureSpec]):
        ids = [e.feature_id for e in entries]
        if ids != list(range(len(entries))):
            raise ParseError("feature ids must be dense 0..N-1 in order")
        index: dict[tuple[str, str], int] = {}
        counts: dict[str, int] = {d: 0 for d in DOMAINS}
        for e in entries:
            if e.domain not in DOMAINS:
                raise ParseError(f"unknown domain {e.domain!r}")
            if (e.quantization is not None) != (e.domain == "measurement"):
                raise ParseError(f"feature {e.feature_id}: quantization iff measurement")
            if not e.codes or any(not c for _, c in e.codes):
                raise ParseError(f"feature {e.feature_id}: empty code")
            if e.quantization is not None:
                e.quantization.validate()
            counts[e.domain] += 1
            for pair in e.codes:
                if pair in index:
                    raise DuplicateCode(f"{pair} on features {index[pair]} and {e.feature_id}")
                index[pair] = e.feature_id
        self.entries: tuple[FeatureSpec, ...] = tuple(entries)
        self.index = index
        self.counts_by_domain = counts

    # --- lookup ---------------------------------------------------------

    def map_code(self, code_system: str, code: str) -> int | None:
        """Feature id owning this code, or None when unregistered."""
        return self.index.get((code_system, code))

    def spec(self, feature_id: int) -> FeatureSpec:
        return self.entries[feature_id]

    @property
    def fitted(self) -> bool:
        return all(
            e.quantization is None or e.quantization.mode == MODE_FIXED for e in self.entries
        )

    # --- expanded input-id space -----------------------------------------

    def _offsets(self) -> list[int]:
        if not self.fitted:
            raise NotFitted("fit cohort quantiles before using input ids")
        offsets = [0]
        for e in self.entries:
            width = e.quantization.n_bins if e.quantization is not None else 1
            offsets.append(offsets[-1] + width)
        return offsets

    @property
    def input_vocab_size(self) -> int:
        return self._offsets()[-1]

    def input_id(self, feature_id: int, bin_index: int = 0) -> int:
        offsets = self._offsets()
        width = offsets[feature_id + 1] - offsets[feature_id]
        if not 0 <= bin_index < width:
            raise ParseError(f"bin {bin_index} out of range for feature {feature_id}")
        return offsets[feature_id] + bin_index

    def owner_of(self, input_id: int) -> tuple[int, int]:
        """(feature_id, bin_index) owning an expanded input id."""
        offsets = np.asarray(self._offsets())
        if not 0 <= input_id < offsets[-1]:
            raise ParseError(f"input id {input_id} out of range")
        fid = int(np.searchsorted(offsets, input_id, side="right") - 1)
        return fid, input_id - int(offsets[fid])

    # --- serialization ----------------------------------------------------

    def to_text(self) -> str:
        c = self.counts_by_domain
        lines = [
            f"#domains cond={c['condition']} famhx={c['family_history']} "
            f"med={c['medication']} meas={c['measurement']}"
        ]
        for e in self.entries:
            codes = ",".join(f"{s}:{v}" for s, v in e.codes)
            q = e.quantization
            if q is None:
                quant = "none"
            elif q.mode == MODE_COHORT:
                quant = f"q{q.quantile_count}"
            else:
                quant = ",".join(repr(v) for v in q.edges)
            if q is not None and q.unit:
                quant += f"@{q.unit}"
            lines.append(f"{e.feature_id}|{e.domain}|{e.label}|{codes}|quant={quant}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def fingerprint(self) -> str:
        """Stable content hash; frozen alongside trained model weights."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _parse_quant(token: str, lineno: int) -> QuantizationSpec | None:
    if not token.startswith("quant="):
        raise ParseError(f"line {lineno}: fifth field must start with quant=")
    body = token[len("quant="):]
    if body == "none":
        return None
    unit = ""
    if "@" in body:
        body, unit = body.rsplit("@", 1)
    if body.startswith("q"):
        try:
            n = int(body[1:])
        except ValueError:
            raise ParseError(f"line {lineno}: bad quantile count {body!r}") from None
        return QuantizationSpec(mode=MODE_COHORT, quantile_count=n, unit=unit)
    try:
        edges = tuple(float(v) for v in body.split(","))
    except ValueError:
        raise ParseError(f"line {lineno}: bad edges {body!r}") from None
    return QuantizationSpec(mode=MODE_FIXED, edges=edges, unit=unit)


def load_registry(path) -> FeatureRegistry:
    """Parse and validate a registry file, including its header counts."""
    text = Path(path).read_text(encoding="utf-8")
    header_counts: dict[str, int] | None = None
    entries: list[FeatureSpec] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#domains"):
            header_counts = {}
            for tok in line.split()[1:]:
                key, _, val = tok.partition("=")
                if key not in HEADER_KEYS or not val.isdigit():
                    raise ParseError(f"line {lineno}: bad header token {tok!r}")
                header_counts[HEADER_KEYS[key]] = int(val)
            continue
        if line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) != 5:
            raise ParseError(f"line {lineno}: expected 5 fields, got {len(parts)}")
        try:
            fid = int(parts[0])
        except ValueError:
            raise ParseError(f"line {lineno}: bad feature id {parts[0]!r}") from None
        domain, label = parts[1], parts[2]
        codes = []
        for tok in parts[3].split(","):
            system, sep, code = tok.partition(":")
            if not sep or not system or not code:
                raise ParseError(f"line {lineno}: bad code token {tok!r}")
            codes.append((system, code))
        quant = _parse_quant(parts[4], lineno)
        entries.append(FeatureSpec(fid, domain, label, tuple(codes), quant))
    if header_counts is None:
        raise ParseError(f"{path}: missing #domains header")
    registry = FeatureRegistry(entries)
    for domain, n in header_counts.items():
        if registry.counts_by_domain[domain] != n:
            raise ParseError(
                f"{path}: header says {n} {domain} rows, file has "
                f"{registry.counts_by_domain[domain]}"
            )
    return registry


def map_code(registry: FeatureRegistry, code_system: str, code: str) -> int | None:
    return registry.map_code(code_system, code)


def fit_cohort_quantiles(
    registry: FeatureRegistry, cohort_measurements: dict[int, "np.ndarray"]
) -> FeatureRegistry:
    """Freeze cohort_quantiles specs at empirical quantiles of the training cohort.

    Quantiles use linear interpolation between closest ranks; duplicate edges
    are collapsed. The result is a new, fully fitted registry.
    """
    new_entries = []
    for e in registry.entries:
        q = e.quantization
        if q is None or q.mode == MODE_FIXED:
            new_entries.append(e)
            continue
        values = np.asarray(cohort_measurements.get(e.feature_id, ()), dtype=np.float64)
        n_distinct = np.unique(values).size
        if n_distinct < q.quantile_count:
            raise InsufficientData(
                f"feature {e.feature_id} ({e.label}): {n_distinct} distinct values "
                f"< quantile_count {q.quantile_count}"
            )
        probs = [j / q.quantile_count for j in range(1, q.quantile_count)]
        edges = np.quantile(values, probs, method="linear")
        edges = tuple(dict.fromkeys(float(v) for v in edges))
        if not edges:
            raise InsufficientData(f"feature {e.feature_id}: quantiles collapsed to nothing")
        fitted = QuantizationSpec(mode=MODE_FIXED, edges=edges, unit=q.unit)
        fitted.validate()
        new_entries.append(replace(e, quantization=fitted))
    return FeatureRegistry(new_entries)
