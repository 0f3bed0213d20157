"""Pipeline configuration file handling.

One YAML file drives every subcommand; precedence anywhere a value can come
from several places is CLI flag > PEDRISK_* environment variable > config
file > built-in default.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ParseError
from .sequencer import NAMED_SCHEDULES, DemographicCardinalities, make_schedule


@dataclass
class AppConfig:
    weights_path: str = "runs/demo/model.prsk"
    registry_path: str = ""          # frozen registry for inference; raw for training
    lms_path: str = ""
    schedule: object = "default"     # name or explicit [[start, end, width], ...]
    host: str = "127.0.0.1"
    port: int = 8000
    token: str | None = None
    top_k: int = 5
    upstream_fhir: str | None = None
    ui_dir: str | None = None
    cards: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    synth: dict = field(default_factory=dict)

    def make_schedule(self):
        if isinstance(self.schedule, str):
            try:
                return make_schedule(NAMED_SCHEDULES[self.schedule])
            except KeyError:
                raise ParseError(f"unknown schedule name {self.schedule!r}") from None
        return make_schedule(self.schedule)

    def make_cards(self) -> DemographicCardinalities:
        kwargs = dict(self.cards)
        for key in ("sexes", "races", "ethnicities", "insurances"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return DemographicCardinalities(**kwargs)

    def resolved(self) -> dict:
        return {
            "weights_path": self.weights_path, "registry_path": self.registry_path,
            "lms_path": self.lms_path, "schedule": self.schedule, "host": self.host,
            "port": self.port, "token": bool(self.token), "top_k": self.top_k,
            "upstream_fhir": self.upstream_fhir, "ui_dir": self.ui_dir,
            "cards": self.cards, "model": self.model, "train": self.train,
            "synth": self.synth,
        }

    def digest(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def default_data_path(name: str) -> str:
    return str(Path(__file__).parent / "data" / name)


def load_config(path=None) -> AppConfig:
    """Load a YAML config; missing file/keys fall back to package defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ParseError(f"{path}: config must be a mapping")
        raw = loaded
    cfg = AppConfig()
    paths = raw.get("paths", {})
    cfg.weights_path = paths.get("weights", cfg.weights_path)
    cfg.registry_path = paths.get("registry", default_data_path("demo_registry.psv"))
    cfg.lms_path = paths.get("lms", default_data_path("lms_demo.psv"))
    service = raw.get("service", {})
    cfg.host = service.get("host", cfg.host)
    cfg.port = int(service.get("port", cfg.port))
    cfg.token = service.get("token")
    cfg.top_k = int(service.get("top_k", cfg.top_k))
    cfg.upstream_fhir = service.get("upstream_fhir")
    cfg.ui_dir = service.get("ui_dir")
    cfg.schedule = raw.get("schedule", cfg.schedule)
    cfg.cards = raw.get("cards", {})
    cfg.model = raw.get("model", {})
    cfg.train = raw.get("train", {})
    cfg.synth = raw.get("synth", {})
    return cfg
