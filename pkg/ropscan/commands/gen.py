from pathlib import Path

import typer

from ropscan.commands.common import SEED_OPTION, WORKERS_OPTION, tracked_run
from ropscan.services.chain_file import read_chains, write_chains
from ropscan.services.chain_gen import (
    DEFAULT_LONG_FRACTION,
    balance_to,
    build_catalog,
    check_register_discipline,
    histogram_within,
    length_histogram,
)
from ropscan.services.emulator import validate_chain
from ropscan.services.memory_image import load_image


def gen(
    image_path: Path = typer.Option(..., "--image", exists=True, dir_okay=False, help="RMIM file"),
    match: Path = typer.Option(..., "--match", exists=True, dir_okay=False, help="Benign chains.tsv to balance"),
    out: Path = typer.Option(..., "--out", help="real chains.tsv to write"),
    seed: int = SEED_OPTION,
    workers: int = WORKERS_OPTION,
    long_fraction: float = typer.Option(DEFAULT_LONG_FRACTION, "--long-fraction", min=0.0, max=1.0),
    validate: bool = typer.Option(False, "--validate", help="Re-run the emulator on every output chain"),
):
    """Generate as many valid real gadget chains as the benign file holds."""
    with tracked_run("gen", seed=seed, workers=workers, paths={"image": image_path, "match": match, "out": out},
                     long_fraction=long_fraction, validate=validate):
        image = load_image(image_path)
        benign = read_chains(match)
        catalog = build_catalog(image)
        chains = balance_to(benign, catalog, seed, long_fraction, workers)
        write_chains(out, chains)
        expected = length_histogram(r.byte_len for r in benign)
        actual = length_histogram(c.byte_len for c in chains)
        typer.echo(f"{len(chains)} chains, histogram match: {histogram_within(expected, actual)}")
        if validate:
            passed = sum(
                validate_chain(image, list(c.gadgets)).ok and check_register_discipline(c.gadgets)
                for c in chains
            )
            typer.echo(f"validated {passed}/{len(chains)}")
