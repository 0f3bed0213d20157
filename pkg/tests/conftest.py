import json
from pathlib import Path

import numpy as np
import pytest

from pedrisk.config import default_data_path
from pedrisk.growth import load_lms_table
from pedrisk.model import ModelConfig
from pedrisk.registry import load_registry
from pedrisk.sequencer import DemographicCardinalities, make_schedule
from pedrisk.synth import SynthConfig, apply_eligibility, generate
from pedrisk.training import TrainConfig, train

FIXTURE_BUNDLE = Path(__file__).parent.parent / "src" / "pedrisk" / "data" / "fixture_bundle.json"


@pytest.fixture(scope="session")
def registry():
    return load_registry(default_data_path("demo_registry.psv"))


@pytest.fixture(scope="session")
def lms():
    return load_lms_table(default_data_path("lms_demo.psv"))


@pytest.fixture(scope="session")
def tiny_config():
    return ModelConfig(
        vocab_size=10, embed_dim=4, lstm_hidden=6, lstm_layers=2, attn_dim=5,
        demo_embed_dim=2, demo_cardinalities=(3, 3, 3, 3, 4, 5), head_hidden=(7, 5),
        dropout=0.0, loss_lambda=0.7, seed=3,
    )


@pytest.fixture(scope="session")
def small_cohort(registry, lms):
    cfg = SynthConfig(n_patients=120, seed=31,
                      planted_features=((0, 4.0), (13, 4.0)))
    cohort = apply_eligibility(generate(cfg, registry, lms))
    return [(r, {"site": t.site, "index_year": t.index_year}) for r, t in cohort]


@pytest.fixture(scope="session")
def artifacts(tmp_path_factory, registry, lms, small_cohort):
    """A small trained stack on disk: weights, frozen registry, report."""
    from pedrisk.model import save

    out = tmp_path_factory.mktemp("artifacts")
    tc = TrainConfig(windows=(2, 4), epochs=2, batch_size=32, lr=2e-3, seed=7)
    overrides = dict(embed_dim=16, lstm_hidden=24, attn_dim=12, head_hidden=(24, 16))
    weights, report, fitted = train(small_cohort, registry, lms, make_schedule(),
                                    DemographicCardinalities(), tc,
                                    model_overrides=overrides)
    save(weights, out / "model.prsk")
    fitted.save(out / "registry.psv")
    report.save(out / "eval_report.json")
    return {
        "dir": out,
        "weights_path": out / "model.prsk",
        "registry_path": out / "registry.psv",
        "lms_path": default_data_path("lms_demo.psv"),
        "weights": weights,
        "registry": fitted,
        "report": report,
    }


@pytest.fixture(scope="session")
def fixture_bundle_bytes():
    return FIXTURE_BUNDLE.read_bytes()


@pytest.fixture(scope="session")
def fixture_bundle(fixture_bundle_bytes):
    return json.loads(fixture_bundle_bytes)
