"""Typed error hierarchy shared by all pedrisk modules."""


class PedriskError(Exception):
    """Base class for every error raised by this package."""


# --- ingest -----------------------------------------------------------------

class MalformedDocument(PedriskError):
    """Input bytes are not valid JSON."""


class MissingPatient(PedriskError):
    """Bundle carries no Patient resource."""


class MultiplePatients(PedriskError):
    """Bundle carries more than one Patient resource."""


class SchemaViolation(PedriskError):
    """A required FHIR field is absent or structurally invalid."""


class NegativeAge(PedriskError):
    """Clinical event dated before the patient's birth."""


class MissingDate(PedriskError):
    """Resource has no usable clinical date."""


class Transport(PedriskError):
    """Connection failure or timeout while talking to a FHIR server."""


class NotFound(PedriskError):
    """FHIR server does not know the requested patient."""


class Unauthorized(PedriskError):
    """Upstream FHIR server returned 401/403."""

    def __init__(self, message, status_code=401):
        super().__init__(message)
        self.status_code = status_code


class PaginationLoop(PedriskError):
    """The same pagination link was seen twice."""


# --- registry ---------------------------------------------------------------

class ParseError(PedriskError):
    """Registry or table file row could not be parsed."""


class DuplicateCode(PedriskError):
    """The same (code_system, code) pair appears on two registry rows."""


class NonMonotoneEdges(PedriskError):
    """Quantization edges are not strictly increasing."""


class InsufficientData(PedriskError):
    """Too few distinct values to fit the requested quantiles."""


class NotFitted(PedriskError):
    """Quantization spec is still cohort_quantiles; fit it first."""


# --- growth -----------------------------------------------------------------

class NonPositiveInput(PedriskError):
    """Weight or height must be strictly positive."""


class OutOfRange(PedriskError):
    """Lookup key falls outside the reference table range."""


class UnknownSex(PedriskError):
    """Growth references are sex-specific; sex must be female or male."""


# --- sequencer --------------------------------------------------------------

class InvalidSegments(PedriskError):
    """Bin schedule segments overlap, gap, or have non-dividing widths."""


class OutOfSchedule(PedriskError):
    """Age falls outside the bin schedule span."""


# --- model ------------------------------------------------------------------

class InvalidConfig(PedriskError):
    """Model configuration failed validation."""


class ShapeMismatch(PedriskError):
    """Tensor shapes are inconsistent with the model config."""


class UnknownId(PedriskError):
    """Sequence contains an input id outside the model vocabulary."""


class AllMasked(PedriskError):
    """Every horizon is masked; loss is undefined."""


class NonFiniteGradient(PedriskError):
    """A gradient became NaN or Inf; the step was aborted."""


class VersionMismatch(PedriskError):
    """Weight container format version is not supported."""


class FingerprintMismatch(PedriskError):
    """Weights were trained against a different feature registry."""


class Corrupt(PedriskError):
    """Weight container is truncated or structurally damaged."""


# --- train/eval -------------------------------------------------------------

class TooSmall(PedriskError):
    """Cohort is too small to split."""


class SingleClass(PedriskError):
    """Operation needs both classes present."""


class DegenerateResampling(PedriskError):
    """Too many bootstrap resamples had to be skipped."""


class TooFewCalibrationPoints(PedriskError):
    """Conformal quantile index exceeds the calibration set size."""


# --- synth ------------------------------------------------------------------

class UnknownPlantedFeature(PedriskError):
    """Planted feature id does not exist in the registry."""


# --- service ----------------------------------------------------------------

class Ineligible(PedriskError):
    """Patient falls outside the supported prediction windows."""
