"""Operator command line: synth | train | eval | serve | predict.

Option precedence is CLI flag > PEDRISK_* environment variable > config file >
built-in default. Every artifact-producing command drops a run manifest next
to its output so results can be regenerated from one command line.
"""
from __future__ import annotations

import datetime as dt
import json
import platform
import sys
from pathlib import Path

import click
import numpy as np

from . import errors as E
from .config import AppConfig, load_config
from .fhir_ingest import parse_bundle, to_patient_record
from .growth import load_lms_table
from .model import save as save_weights
from .pipeline import canonical_json, load_context, predict_from_record
from .registry import load_registry
from .synth import SynthConfig, apply_eligibility, generate, read_cohort, write_cohort
from .training import TrainConfig, build_examples, evaluate, split, train

PACKAGE_VERSION = "0.1.0"


def _write_run_manifest(out_dir: Path, command: str, config: AppConfig, seed,
                        inputs: dict, outputs: dict, started: dt.datetime) -> None:
    doc = {
        "command": command,
        "config_hash": config.digest(),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "started_at": started.isoformat(),
        "finished_at": dt.datetime.now(dt.timezone.utc).isoformat(),
        "versions": {
            "pedrisk": PACKAGE_VERSION,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"run_manifest_{command}.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")


def _resolve_seed(ctx_seed, config_seed, default: int = 0) -> int:
    if ctx_seed is not None:
        return int(ctx_seed)
    if config_seed is not None:
        return int(config_seed)
    return default


@click.group()
@click.option("--config", "config_path", envvar="PEDRISK_CONFIG",
              type=click.Path(exists=True), help="pipeline config YAML")
@click.option("--workdir", envvar="PEDRISK_WORKDIR", type=click.Path(),
              help="resolve relative paths from here")
@click.option("--seed", envvar="PEDRISK_SEED", type=int, default=None,
              help="override the config seed")
@click.pass_context
def cli(ctx, config_path, workdir, seed):
    """Pediatric obesity-risk pipeline."""
    if workdir:
        import os

        os.makedirs(workdir, exist_ok=True)
        os.chdir(workdir)
    ctx.obj = {"config": load_config(config_path), "seed": seed}


@cli.command()
@click.option("--out", "out_dir", required=True, type=click.Path(), help="cohort directory")
@click.option("--n", "n_patients", type=int, default=None, help="override cohort size")
@click.pass_obj
def synth(obj, out_dir, n_patients):
    """Generate a synthetic cohort as FHIR bundles + strata manifest."""
    started = dt.datetime.now(dt.timezone.utc)
    config: AppConfig = obj["config"]
    params = dict(config.synth)
    params.setdefault("n_patients", 200)
    if n_patients is not None:
        params["n_patients"] = n_patients
    seed = _resolve_seed(obj["seed"], params.get("seed"))
    params["seed"] = seed
    if "planted_features" in params:
        params["planted_features"] = tuple(
            (int(f), float(m)) for f, m in params["planted_features"])
    for key in ("sites",):
        if key in params:
            params[key] = tuple(params[key])
    if "birth_year_range" in params:
        params["birth_year_range"] = tuple(params["birth_year_range"])
    synth_cfg = SynthConfig(**params)
    registry = load_registry(config.registry_path)
    lms = load_lms_table(config.lms_path)
    cohort = generate(synth_cfg, registry, lms)
    write_cohort(out_dir, cohort, skew_seed=seed)
    click.echo(f"wrote {len(cohort)} patients to {out_dir}")
    _write_run_manifest(Path(out_dir), "synth", config, seed,
                        {"registry": config.registry_path, "lms": config.lms_path},
                        {"cohort": str(out_dir), "n_patients": len(cohort)}, started)


def _train_config(config: AppConfig, seed) -> TrainConfig:
    params = dict(config.train)
    params["seed"] = _resolve_seed(seed, params.get("seed"))
    if "windows" in params:
        params["windows"] = tuple(int(w) for w in params["windows"])
    return TrainConfig(**params)


@cli.command("train")
@click.option("--cohort", "cohort_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.pass_obj
def train_cmd(obj, cohort_dir, out_dir):
    """Train on a cohort directory; writes weights, frozen registry, eval report."""
    started = dt.datetime.now(dt.timezone.utc)
    config: AppConfig = obj["config"]
    train_cfg = _train_config(config, obj["seed"])
    registry = load_registry(config.registry_path)
    lms = load_lms_table(config.lms_path)
    cohort = apply_eligibility(read_cohort(cohort_dir))
    schedule = config.make_schedule()
    cards = config.make_cards()

    def progress(epoch, train_loss, val_loss):
        click.echo(f"epoch {epoch:3d}  train {train_loss:.4f}  val {val_loss:.4f}")

    weights, report, fitted = train(cohort, registry, lms, schedule, cards,
                                    train_cfg, model_overrides=config.model,
                                    callbacks=progress)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_weights(weights, out / "model.prsk")
    fitted.save(out / "registry.psv")
    report.save(out / "eval_report.json")
    (out / "metrics.psv").write_text(report.metrics_table(), encoding="utf-8")
    click.echo(f"trained on {len(cohort)} eligible patients; artifacts in {out}")
    _write_run_manifest(out, "train", config, train_cfg.seed,
                        {"cohort": str(cohort_dir), "registry": config.registry_path},
                        {"weights": str(out / "model.prsk"),
                         "registry": str(out / "registry.psv"),
                         "report": str(out / "eval_report.json")}, started)


@cli.command("eval")
@click.option("--cohort", "cohort_dir", required=True, type=click.Path(exists=True))
@click.option("--weights", "weights_path", required=True, type=click.Path(exists=True))
@click.option("--registry", "registry_path", required=True, type=click.Path(exists=True),
              help="frozen registry written by train")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--split-mode", type=click.Choice(["test", "all"]), default="test",
              help="evaluate the seeded test split or the whole cohort")
@click.pass_obj
def eval_cmd(obj, cohort_dir, weights_path, registry_path, out_path, split_mode):
    """Evaluate stored weights on a cohort; writes the JSON report + flat table."""
    started = dt.datetime.now(dt.timezone.utc)
    config: AppConfig = obj["config"]
    train_cfg = _train_config(config, obj["seed"])
    cohort = apply_eligibility(read_cohort(cohort_dir))
    ctx = load_context(weights_path, registry_path, config.lms_path, top_k=config.top_k)
    subset = cohort
    if split_mode == "test":
        _, _, subset = split(cohort, train_cfg.seed)
    examples = build_examples(subset, ctx.registry, ctx.schedule, ctx.cards,
                              ctx.lms, train_cfg.windows)
    report = evaluate(ctx.weights, examples, bootstrap_reps=train_cfg.bootstrap_reps,
                      seed=train_cfg.seed)
    out = Path(out_path)
    report.save(out)
    out.with_suffix(".psv").write_text(report.metrics_table(), encoding="utf-8")
    click.echo(f"evaluated {len(examples)} examples; report at {out}")
    _write_run_manifest(out.parent if out.parent != Path("") else Path("."),
                        "eval", config, train_cfg.seed,
                        {"cohort": str(cohort_dir), "weights": str(weights_path)},
                        {"report": str(out)}, started)


@cli.command()
@click.option("--host", default=None)
@click.option("--port", type=int, default=None)
@click.pass_obj
def serve(obj, host, port):
    """Run the REST service."""
    import uvicorn

    from .service import create_app

    config: AppConfig = obj["config"]
    app = create_app(config)
    uvicorn.run(app, host=host or config.host, port=port or config.port,
                log_level="warning")


@cli.command()
@click.option("--in", "in_path", required=True, type=click.Path(exists=True),
              help="FHIR bundle JSON file")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="write the document here (exact bytes, no trailing newline)")
@click.option("--weights", "weights_path", default=None)
@click.option("--registry", "registry_path", default=None)
@click.pass_obj
def predict(obj, in_path, out_path, weights_path, registry_path):
    """Predict from a bundle file; prints the PredictionResult document."""
    started = dt.datetime.now(dt.timezone.utc)
    config: AppConfig = obj["config"]
    ctx = load_context(weights_path or config.weights_path,
                       registry_path or config.registry_path,
                       config.lms_path, top_k=config.top_k)
    record = to_patient_record(parse_bundle(Path(in_path).read_bytes()))
    doc = canonical_json(predict_from_record(ctx, record))
    if out_path:
        Path(out_path).write_bytes(doc.encode("utf-8"))
        _write_run_manifest(Path(out_path).parent if Path(out_path).parent != Path("")
                            else Path("."), "predict", config, None,
                            {"bundle": str(in_path)}, {"document": str(out_path)}, started)
    click.echo(doc)


def main(argv=None) -> int:
    """Entry point with the documented exit codes: 0 ok, 1 usage, 2 data, 3 internal."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except E.PedriskError as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports and exits
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return 3


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
