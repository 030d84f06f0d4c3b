import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import click
import typer
from loguru import logger
from pydantic import ValidationError
from sqlalchemy.exc import SQLAlchemyError

from ropscan.config import get_settings, versions
from ropscan.controllers import run_controller
from ropscan.database import get_session
from ropscan.schemas import DetectionVerdict, ModelConfig, RunConfig, TrainConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DETECTION = 3
EXIT_INTERNAL = 4

SEED_OPTION = typer.Option(0, "--seed", help="Seed for every random choice in the run")
WORKERS_OPTION = typer.Option(1, "--workers", min=1, help="Worker threads")


def parse_triple(value: str, name: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in value.split(","))
    except ValueError:
        raise typer.BadParameter(f"{value!r} is not a comma-separated list of integers", param_hint=name)
    if len(parts) != 3:
        raise typer.BadParameter(f"expected three values, got {len(parts)}", param_hint=name)
    return parts


def parse_floats(value: str, name: str) -> list[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise typer.BadParameter(f"{value!r} is not a comma-separated list of numbers", param_hint=name)


def make_configs(
    filters: str, kernels: str, learning_rate: float, momentum: float, batch_size: int, epochs: int,
    factor: float, dropout: float, seed: int, patience: int, validation_fraction: float,
) -> tuple[ModelConfig, TrainConfig]:
    try:
        model_config = ModelConfig(filters=parse_triple(filters, "--filters"),
                                   kernels=parse_triple(kernels, "--kernels"))
        train_config = TrainConfig(
            learning_rate=learning_rate, momentum=momentum, batch_size=batch_size, max_epochs=epochs,
            penalizing_factor=factor, dropout=dropout, seed=seed, patience=patience,
            validation_fraction=validation_fraction,
        )
    except ValidationError as e:
        raise typer.BadParameter(str(e))
    return model_config, train_config


@dataclass
class RunHandle:
    config: RunConfig
    run_id: int | None = None
    exit_code: int = EXIT_OK

    def record_verdicts(self, verdicts: list[DetectionVerdict]) -> None:
        if self.run_id is None:
            return
        try:
            with get_session() as db:
                for verdict in verdicts:
                    run_controller.record_verdict(db, self.run_id, verdict)
        except SQLAlchemyError as e:
            logger.warning("Could not record verdicts: {}", e)


def _ledger_start(config: RunConfig) -> int | None:
    if not get_settings().ledger:
        return None
    try:
        with get_session() as db:
            return run_controller.create_run(db, config).id
    except SQLAlchemyError as e:
        logger.warning("Run ledger unavailable: {}", e)
        return None


def _ledger_finish(run_id: int | None, exit_code: int) -> None:
    if run_id is None:
        return
    try:
        with get_session() as db:
            run_controller.finish_run(db, run_id, exit_code)
    except SQLAlchemyError as e:
        logger.warning("Could not close run {}: {}", run_id, e)


def _write_run_log(config: RunConfig) -> None:
    ctx = click.get_current_context(silent=True)
    obj = ctx.find_root().obj if ctx is not None else None
    path = (obj or {}).get("run_log")
    if path:
        record = {"config": json.loads(config.model_dump_json()), "versions": versions()}
        Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


@contextmanager
def tracked_run(command: str, seed: int | None = None, workers: int = 1, paths: dict | None = None, **options):
    """Log and record the effective configuration, map failures to exit codes."""
    config = RunConfig(
        command=command, seed=seed, workers=workers,
        paths={k: str(v) for k, v in (paths or {}).items() if v is not None},
        options=options,
    )
    logger.info("{} config: {}", command, config.model_dump_json())
    _write_run_log(config)
    handle = RunHandle(config, _ledger_start(config))
    try:
        yield handle
    except (typer.Exit, click.ClickException):
        _ledger_finish(handle.run_id, EXIT_USAGE)
        raise
    except Exception as e:
        logger.opt(exception=e).debug("{} traceback", command)
        logger.error("{} failed: {}", command, e)
        _ledger_finish(handle.run_id, EXIT_INTERNAL)
        raise typer.Exit(EXIT_INTERNAL)
    _ledger_finish(handle.run_id, handle.exit_code)
    if handle.exit_code:
        raise typer.Exit(handle.exit_code)
