from pathlib import Path

import typer

from ropscan.commands.common import WORKERS_OPTION, tracked_run
from ropscan.services.chain_file import write_chains
from ropscan.services.memory_image import load_image
from ropscan.services.scanner import MIN_GADGETS, GadgetCache, iter_inputs, scan_corpus


def scan(
    image_path: Path = typer.Option(..., "--image", exists=True, dir_okay=False, help="RMIM file"),
    inputs: Path = typer.Option(..., "--in", exists=True, help="Input file or directory"),
    out: Path = typer.Option(..., "--out", help="chains.tsv to write"),
    workers: int = WORKERS_OPTION,
    min_gadgets: int = typer.Option(MIN_GADGETS, "--min-gadgets", min=MIN_GADGETS),
    cache: bool = typer.Option(True, "--cache/--no-cache", help="Memoise per-address disassembly"),
):
    """ASL-guided disassembly of input data into potential gadget chains."""
    with tracked_run("scan", workers=workers, paths={"image": image_path, "in": inputs, "out": out},
                     min_gadgets=min_gadgets, cache=cache):
        image = load_image(image_path)
        result = scan_corpus(image, iter_inputs(inputs), workers, GadgetCache(image, cache), min_gadgets)
        write_chains(out, result.chains)
        for source_id, error in result.errors:
            typer.echo(f"skipped {source_id}: {error}", err=True)
        typer.echo(f"{len(result.chains)} chains from {result.inputs} inputs ({result.bytes_scanned} bytes)")
