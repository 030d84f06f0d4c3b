from pathlib import Path

import typer

from ropscan.commands import hyper
from ropscan.commands.common import SEED_OPTION, make_configs, tracked_run
from ropscan.services.chain_file import read_chains
from ropscan.services.cnn import CnnModel, load_model, save_model, train as train_model
from ropscan.services.encoding import dataset_from_sequences
from ropscan.services.memory_image import load_image


def train(
    benign: Path = typer.Option(..., "--benign", exists=True, dir_okay=False, help="Benign chains.tsv"),
    real: Path = typer.Option(..., "--real", exists=True, dir_okay=False, help="Real chains.tsv"),
    out: Path = typer.Option(..., "--out", help="Model file to write"),
    image_path: Path | None = typer.Option(None, "--image", exists=True, dir_okay=False,
                                           help="Image the chains came from; stamps the model"),
    resume: Path | None = typer.Option(None, "--resume", exists=True, dir_okay=False,
                                       help="Continue training this model for --epochs more"),
    seed: int = SEED_OPTION,
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
    progress: bool = typer.Option(False, "--progress/--no-progress"),
):
    """Train the CNN on benign vs real chains."""
    model_config, train_config = make_configs(filters, kernels, learning_rate, momentum, batch_size, epochs,
                                              factor, dropout, seed, patience, validation_fraction)
    paths = {"benign": benign, "real": real, "out": out, "image": image_path, "resume": resume}
    with tracked_run("train", seed=seed, paths=paths, model=model_config.model_dump(),
                     train=train_config.model_dump()):
        benign_seqs = [r.concat_bytes for r in read_chains(benign)]
        real_seqs = [r.concat_bytes for r in read_chains(real)]
        if resume is not None:
            model = load_model(resume)
            dataset = dataset_from_sequences(benign_seqs, real_seqs, n_max=model.n_max)
            history = train_model(model, dataset, epochs=epochs, progress=progress)
        else:
            dataset = dataset_from_sequences(benign_seqs, real_seqs)
            image = load_image(image_path) if image_path else None
            model = CnnModel(
                dataset.n_max, model_config, train_config,
                program=image.program_name if image else "",
                snapshot_id=image.snapshot_id if image else "",
            )
            history = train_model(model, dataset, progress=progress)
        save_model(model, out)
        for e in history.epochs:
            typer.echo(f"{e.epoch}\t{e.train_loss!r}\t{e.train_accuracy!r}\t{e.val_loss!r}\t{e.val_accuracy!r}")
        typer.echo(f"saved {out} (n_max={model.n_max}, epochs={model.epochs_trained})")
