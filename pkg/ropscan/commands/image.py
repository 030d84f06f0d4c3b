from pathlib import Path

import typer
from rich.console import Console
from rich.table import Table

from ropscan.commands.common import tracked_run
from ropscan.services.memory_image import build_image, load_image, write_image

app = typer.Typer(help="Build and inspect RMIM memory images", no_args_is_help=True)


def _parse_segment(spec: str) -> tuple[int, bytes]:
    base, sep, path = spec.partition(":")
    if not sep:
        raise typer.BadParameter(f"{spec!r} is not BASE:FILE", param_hint="--segment")
    try:
        address = int(base, 0)
    except ValueError:
        raise typer.BadParameter(f"{base!r} is not an address", param_hint="--segment")
    file = Path(path)
    if not file.is_file():
        raise typer.BadParameter(f"{path} does not exist", param_hint="--segment")
    return address, file.read_bytes()


@app.command("build")
def build(
    out: Path = typer.Option(..., "--out", help="RMIM file to write"),
    segment: list[str] = typer.Option(..., "--segment", help="BASE:FILE, repeatable"),
    name: str = typer.Option("", "--name", help="Program name for the run record"),
):
    """Assemble an RMIM image from raw executable segments."""
    pairs = [_parse_segment(s) for s in segment]
    with tracked_run("image build", paths={"out": out}, name=name, segments=segment):
        image = build_image(pairs, program_name=name)
        write_image(image, out)
        typer.echo(f"{out}\t{len(image.segments)} segments\t{image.total_size} bytes")


@app.command("info")
def info(image_path: Path = typer.Argument(..., exists=True, dir_okay=False, help="RMIM file")):
    """Print the segment table of an image."""
    with tracked_run("image info", paths={"image": image_path}):
        image = load_image(image_path)
        table = Table(title=f"{image.program_name} (snapshot {image.snapshot_id})")
        table.add_column("base")
        table.add_column("end")
        table.add_column("bytes", justify="right")
        for seg in image.segments:
            table.add_row(f"{seg.base:#010x}", f"{seg.end:#010x}", str(len(seg)))
        Console().print(table)
        typer.echo(f"total\t{image.total_size}")
