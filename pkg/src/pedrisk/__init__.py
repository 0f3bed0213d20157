"""pedrisk: pediatric obesity-risk prediction pipeline.

FHIR R4 ingest -> time-binned feature sequences -> recurrent risk model ->
REST service / CLI, with a built-in synthetic cohort for desk-scale training.
"""

__version__ = "0.1.0"
