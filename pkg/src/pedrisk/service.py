"""REST service wiring ingest -> sequencer -> model -> growth math.

Two prediction modes: POST /v1/predict takes a FHIR bundle body; GET
/v1/patients/{id}/predict pulls the same resources from an upstream FHIR
server. Both run the identical pipeline and serialize through canonical_json,
so equivalent inputs return byte-identical bodies. The loaded model is an
immutable context swapped atomically on reload; requests never mutate state.
"""
from __future__ import annotations

import threading
import uuid
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from . import errors as E
from .config import AppConfig
from .fhir_ingest import fetch_patient_everything, parse_bundle, to_patient_record
from .pipeline import SUPPORTED_WINDOWS, canonical_json, load_context, predict_from_record

PARSE_ERRORS = (E.MalformedDocument, E.MissingPatient, E.MultiplePatients,
                E.SchemaViolation, E.MissingDate, E.NegativeAge)


class ModelHolder:
    """Atomic swap point for the predictor context."""

    def __init__(self):
        self._lock = threading.Lock()
        self._ctx = None
        self.error: str | None = None

    def get(self):
        with self._lock:
            return self._ctx

    def set(self, ctx):
        with self._lock:
            self._ctx = ctx
            self.error = None

    def fail(self, message: str):
        with self._lock:
            self._ctx = None
            self.error = message


def _error(status: int, code: str, detail: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": code, "detail": detail})


def create_app(config: AppConfig) -> FastAPI:
    app = FastAPI(title="pedrisk", docs_url=None, redoc_url=None)
    holder = ModelHolder()
    app.state.holder = holder
    app.state.config = config

    def try_load():
        try:
            holder.set(load_context(config.weights_path, config.registry_path,
                                    config.lms_path, top_k=config.top_k))
        except Exception as exc:
            holder.fail(f"{type(exc).__name__}: {exc}")

    if config.weights_path and Path(config.weights_path).exists():
        try_load()
    else:
        holder.fail("weights not loaded")

    def authorized(request: Request) -> bool:
        if not config.token:
            return True
        return request.headers.get("Authorization") == f"Bearer {config.token}"

    def run_pipeline(record) -> Response:
        ctx = holder.get()
        doc = predict_from_record(ctx, record)
        return Response(content=canonical_json(doc), media_type="application/json")

    @app.post("/v1/predict")
    async def predict(request: Request):
        if not authorized(request):
            return _error(401, "unauthorized", "missing or wrong bearer token")
        if holder.get() is None:
            return _error(503, "model_unavailable", holder.error or "not loaded")
        body = await request.body()
        try:
            record = to_patient_record(parse_bundle(body))
            return run_pipeline(record)
        except PARSE_ERRORS as exc:
            return _error(400, type(exc).__name__, str(exc))
        except E.Ineligible as exc:
            return _error(422, "ineligible", str(exc))
        except Exception:
            return _error(500, "internal", f"error id {uuid.uuid4()}")

    @app.get("/v1/patients/{patient_id}/predict")
    async def predict_by_id(patient_id: str, request: Request, server: str | None = None):
        if not authorized(request):
            return _error(401, "unauthorized", "missing or wrong bearer token")
        if holder.get() is None:
            return _error(503, "model_unavailable", holder.error or "not loaded")
        upstream = server or config.upstream_fhir
        if not upstream:
            return _error(400, "no_upstream", "no FHIR server configured or passed")
        try:
            resources = fetch_patient_everything(upstream, patient_id)
            record = to_patient_record(resources)
            return run_pipeline(record)
        except E.NotFound as exc:
            return _error(404, "patient_not_found", str(exc))
        except E.Unauthorized as exc:
            return _error(exc.status_code, "upstream_unauthorized", str(exc))
        except (E.Transport, E.PaginationLoop, E.MalformedDocument) as exc:
            return _error(502, "upstream_error", str(exc))
        except PARSE_ERRORS as exc:
            return _error(400, type(exc).__name__, str(exc))
        except E.Ineligible as exc:
            return _error(422, "ineligible", str(exc))
        except Exception:
            return _error(500, "internal", f"error id {uuid.uuid4()}")

    @app.get("/v1/health")
    async def health():
        ctx = holder.get()
        if ctx is None:
            return {"status": "degraded", "detail": holder.error or "not loaded"}
        return {"status": "ok",
                "model_version": ctx.weights.meta.get("model_version", "uninitialized")}

    @app.get("/v1/model")
    async def model_info():
        ctx = holder.get()
        if ctx is None:
            return _error(503, "model_unavailable", holder.error or "not loaded")
        meta = ctx.weights.meta
        cfg = ctx.weights.config
        return {
            "model_version": meta.get("model_version", "uninitialized"),
            "registry_fingerprint": meta.get("registry_fingerprint", ""),
            "supported_windows": list(SUPPORTED_WINDOWS),
            "horizons": [1, 2, 3],
            "config": {
                "vocab_size": cfg.vocab_size, "embed_dim": cfg.embed_dim,
                "lstm_hidden": cfg.lstm_hidden, "lstm_layers": cfg.lstm_layers,
                "head_hidden": list(cfg.head_hidden), "dropout": cfg.dropout,
            },
            "conformal": meta.get("conformal"),
        }

    @app.post("/v1/model/reload")
    async def reload_model(request: Request):
        if not authorized(request):
            return _error(401, "unauthorized", "missing or wrong bearer token")
        try_load()
        if holder.get() is None:
            return _error(503, "model_unavailable", holder.error or "load failed")
        return {"status": "reloaded"}

    @app.get("/v1/smart/launch")
    async def smart_launch():
        # integration point only; the SMART authorization flow is out of scope
        return _error(501, "not_implemented", "SMART launch is stubbed in this build")

    if config.ui_dir and Path(config.ui_dir).is_dir():
        app.mount("/", StaticFiles(directory=config.ui_dir, html=True), name="ui")

    return app
