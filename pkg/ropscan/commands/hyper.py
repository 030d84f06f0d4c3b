"""Hyper-parameter options shared by train, eval and pipeline."""
import typer

from ropscan.schemas import ModelConfig, TrainConfig

_M, _T = ModelConfig(), TrainConfig()

FILTERS = typer.Option(",".join(map(str, _M.filters)), "--filters", help="Three filter counts")
KERNELS = typer.Option(",".join(map(str, _M.kernels)), "--kernels", help="Three odd kernel sizes")
LEARNING_RATE = typer.Option(_T.learning_rate, "--lr")
MOMENTUM = typer.Option(_T.momentum, "--momentum")
BATCH_SIZE = typer.Option(_T.batch_size, "--batch-size")
EPOCHS = typer.Option(_T.max_epochs, "--epochs", help="Maximum epochs")
FACTOR = typer.Option(_T.penalizing_factor, "--factor", help="Loss weight of benign samples")
DROPOUT = typer.Option(_T.dropout, "--dropout")
PATIENCE = typer.Option(_T.patience, "--patience", help="Epochs without improvement before stopping")
VALIDATION_FRACTION = typer.Option(_T.validation_fraction, "--validation-fraction")
