from pathlib import Path

import typer

from ropscan.commands import hyper
from ropscan.commands.common import SEED_OPTION, WORKERS_OPTION, make_configs, tracked_run
from ropscan.schemas import PipelineConfig
from ropscan.services.chain_gen import DEFAULT_LONG_FRACTION
from ropscan.services.pipeline import run_pipeline
from ropscan.services.scanner import MIN_GADGETS


def pipeline(
    image_path: Path = typer.Option(..., "--image", exists=True, dir_okay=False, help="RMIM file"),
    corpus: Path = typer.Option(..., "--corpus", exists=True, help="Benign input file or directory"),
    out_dir: Path = typer.Option(..., "--out-dir", file_okay=False, help="Directory for every artifact"),
    seed: int = SEED_OPTION,
    workers: int = WORKERS_OPTION,
    min_gadgets: int = typer.Option(MIN_GADGETS, "--min-gadgets", min=MIN_GADGETS),
    long_fraction: float = typer.Option(DEFAULT_LONG_FRACTION, "--long-fraction", min=0.0, max=1.0),
    train_fraction: float = typer.Option(0.8, "--train-fraction", min=0.01, max=0.95),
    folds: int = typer.Option(5, "--folds", min=0, help="k-fold cross-validation; below 2 skips it"),
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
    """Training phase end to end: scan, gen, train, eval."""
    model_config, train_config = make_configs(filters, kernels, learning_rate, momentum, batch_size, epochs,
                                              factor, dropout, seed, patience, validation_fraction)
    config = PipelineConfig(
        image=image_path, corpus=corpus, out_dir=out_dir, seed=seed, workers=workers,
        min_gadgets=min_gadgets, long_fraction=long_fraction, train_fraction=train_fraction,
        folds=folds, model=model_config, train=train_config,
    )
    with tracked_run("pipeline", seed=seed, workers=workers,
                     paths={"image": image_path, "corpus": corpus, "out_dir": out_dir},
                     **config.model_dump(mode="json", exclude={"image", "corpus", "out_dir", "seed", "workers"})):
        artifacts = run_pipeline(config)
        for name, path in artifacts.files.items():
            typer.echo(f"{name}\t{path}")
        if artifacts.holdout is not None:
            m = artifacts.holdout
            typer.echo(f"holdout\tacc={m.accuracy:.4f}\tDR={m.detection_rate:.4f}\tFPR={m.false_positive_rate:.4f}")
