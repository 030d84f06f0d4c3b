from pathlib import Path

import typer

from ropscan import __version__
from ropscan.commands import bench, detect, disasm, evaluate, gen, image, pipeline, runs, scan, train
from ropscan.config import configure_logging, get_settings, load_config_file

app = typer.Typer(
    name="ropscan",
    help="ROP payload detection by ASL-guided disassembly and a 1D CNN",
    no_args_is_help=True,
    pretty_exceptions_enable=False,
)


def _version(value: bool):
    if value:
        typer.echo(__version__)
        raise typer.Exit()


@app.callback()
def main(
    ctx: typer.Context,
    config: Path | None = typer.Option(None, "--config", exists=True, dir_okay=False,
                                       help="YAML file of per-subcommand option defaults"),
    log_level: str | None = typer.Option(None, "--log-level", help="Overrides ROPSCAN_LOG"),
    run_log: Path | None = typer.Option(None, "--run-log", help="Write the effective run config as JSON here"),
    version: bool = typer.Option(False, "--version", callback=_version, is_eager=True),
):
    try:
        configure_logging(log_level or get_settings().log_level)
    except ValueError as e:
        raise typer.BadParameter(str(e), param_hint="--log-level")
    if config is not None:
        try:
            ctx.default_map = load_config_file(config)
        except ValueError as e:
            raise typer.BadParameter(str(e), param_hint="--config")
    ctx.obj = {"run_log": run_log}


app.add_typer(image.app, name="image")
app.add_typer(runs.app, name="runs")
app.command("disasm")(disasm.disasm)
app.command("scan")(scan.scan)
app.command("gen")(gen.gen)
app.command("train")(train.train)
app.command("eval")(evaluate.evaluate)
app.command("detect")(detect.detect)
app.command("bench")(bench.bench)
app.command("pipeline")(pipeline.pipeline)


if __name__ == "__main__":
    app()
