from pathlib import Path

import typer

from ropscan.commands.common import EXIT_DETECTION, WORKERS_OPTION, tracked_run
from ropscan.schemas import Verdict
from ropscan.services.cnn import load_model
from ropscan.services.detection import detect_corpus, write_verdicts
from ropscan.services.memory_image import load_image
from ropscan.services.scanner import MIN_GADGETS, iter_inputs


def detect(
    image_path: Path = typer.Option(..., "--image", exists=True, dir_okay=False, help="RMIM file"),
    model_path: Path = typer.Option(..., "--model", exists=True, dir_okay=False, help="Trained model file"),
    inputs: Path = typer.Option(..., "--in", exists=True, help="Input file or directory"),
    out: Path | None = typer.Option(None, "--out", help="verdicts.tsv to write"),
    workers: int = WORKERS_OPTION,
    min_gadgets: int = typer.Option(MIN_GADGETS, "--min-gadgets", min=MIN_GADGETS),
):
    """Classify every potential gadget chain in the inputs; exit 3 if any input is a ROP payload."""
    paths = {"image": image_path, "model": model_path, "in": inputs, "out": out}
    with tracked_run("detect", workers=workers, paths=paths, min_gadgets=min_gadgets) as run:
        image = load_image(image_path)
        model = load_model(model_path)
        verdicts, errors = detect_corpus(image, model, iter_inputs(inputs), workers, min_gadgets)
        for source_id, error in errors:
            typer.echo(f"skipped {source_id}: {error}", err=True)
        if out is not None:
            write_verdicts(out, verdicts)
        for v in verdicts:
            typer.echo(f"{v.source_id}\t{v.verdict.value}\t{v.chains_found}\t{len(v.flagged_chains)}")
        run.record_verdicts(verdicts)
        if any(v.verdict is Verdict.ROP_PAYLOAD for v in verdicts):
            run.exit_code = EXIT_DETECTION
