import enum
from pathlib import Path

import typer

from ropscan.commands import hyper
from ropscan.commands.common import SEED_OPTION, WORKERS_OPTION, make_configs, parse_floats, tracked_run
from ropscan.schemas import GridSpec
from ropscan.services.encoding import build_dataset
from ropscan.services.evaluation import (
    cross_validate,
    factor_sweep,
    grid_search,
    holdout_evaluate,
    write_grid_tsv,
    write_metrics_tsv,
    write_summary,
)


class EvalMode(str, enum.Enum):
    holdout = "holdout"
    cv = "cv"
    grid = "grid"
    all = "all"


def evaluate(
    benign: Path = typer.Option(..., "--benign", exists=True, dir_okay=False),
    real: Path = typer.Option(..., "--real", exists=True, dir_okay=False),
    out: Path = typer.Option(..., "--out", help="TSV report"),
    summary: Path | None = typer.Option(None, "--summary", help="JSON summary (default: <out>.json)"),
    mode: EvalMode = typer.Option(EvalMode.all, "--mode", help="all = holdout + cv"),
    folds: int = typer.Option(5, "--folds", min=2),
    train_fraction: float = typer.Option(0.8, "--train-fraction", min=0.01, max=0.8),
    factors: str = typer.Option("", "--factors", help="e.g. 1,5,100: one holdout run per factor"),
    subset: int | None = typer.Option(None, "--subset", min=2, help="Grid: samples per cell"),
    repeats: int = typer.Option(3, "--repeats", min=1, help="Grid: runs per cell"),
    seed: int = SEED_OPTION,
    workers: int = WORKERS_OPTION,
    filters: str = hyper.FILTERS,
    kernels: str = hyper.KERNELS,
    learning_rate: float = hyper.LEARNING_RATE,
    momentum: float = hyper.MOMENTUM,
    batch_size: int = hyper.BATCH_SIZE,
    epochs: int = hyper.EPOCHS,
    factor: float = hyper.FACTOR,
    dropout: float = hyper.DROPOUT,
    patience: int = hyper.PATIENCE,
    validation_fraction: float = hyper.VALIDATION_FRACTION,
):
    """Holdout, k-fold, factor sweep and grid search reports."""
    model_config, train_config = make_configs(filters, kernels, learning_rate, momentum, batch_size, epochs,
                                              factor, dropout, seed, patience, validation_fraction)
    factor_list = parse_floats(factors, "--factors")
    summary = summary or out.with_suffix(".json")
    with tracked_run("eval", seed=seed, workers=workers,
                     paths={"benign": benign, "real": real, "out": out, "summary": summary},
                     mode=mode.value, folds=folds, train_fraction=train_fraction, factors=factor_list,
                     subset=subset, repeats=repeats, model=model_config.model_dump(),
                     train=train_config.model_dump()):
        dataset = build_dataset(benign, real)
        report: dict = {"samples": len(dataset), "n_max": dataset.n_max}

        if mode is EvalMode.grid:
            results = grid_search(dataset, GridSpec(repeats=repeats), train_config, subset, seed, workers)
            write_grid_tsv(out, results)
            ranked = [r for r in results if r.rank is not None]
            report["best"] = ranked[0].model_dump(mode="json") if ranked else None
            report["cells"] = len(results)
            write_summary(summary, report)
            typer.echo(f"{len(results)} cells; best: {report['best']}")
            return

        rows = []
        if mode in (EvalMode.holdout, EvalMode.all):
            holdout = holdout_evaluate(dataset, model_config, train_config, train_fraction, seed)
            rows.append(("holdout", holdout.metrics))
            report["holdout"] = holdout.metrics.model_dump()
            report["holdout_epochs"] = len(holdout.history.epochs)
        if mode in (EvalMode.cv, EvalMode.all):
            cv = cross_validate(dataset, folds, model_config, train_config, workers)
            rows += [(f.name, f.metrics) for f in cv.folds]
            report["cv"] = {
                "mean_accuracy": cv.mean_accuracy,
                "mean_detection_rate": cv.mean_detection_rate,
                "mean_false_positive_rate": cv.mean_false_positive_rate,
            }
        if factor_list:
            sweep = factor_sweep(dataset, factor_list, model_config, train_config, train_fraction, seed)
            rows += [(f"factor={f!r}", m) for f, m in sweep.items()]
            report["factors"] = {repr(f): m.model_dump() for f, m in sweep.items()}
        write_metrics_tsv(out, rows)
        report["best"] = {"model": model_config.model_dump(mode="json"), "train": train_config.model_dump()}
        write_summary(summary, report)
        for name, m in rows:
            typer.echo(f"{name}\tacc={m.accuracy:.4f}\tDR={m.detection_rate:.4f}\tFPR={m.false_positive_rate:.4f}")
