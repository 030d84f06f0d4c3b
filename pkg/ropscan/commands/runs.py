import typer
from rich.console import Console
from rich.table import Table

from ropscan.controllers import run_controller
from ropscan.database import get_session

app = typer.Typer(help="Inspect the run ledger", no_args_is_help=True)


@app.command("list")
def list_runs(
    command: str | None = typer.Option(None, "--command", help="Only runs of this subcommand"),
    limit: int = typer.Option(50, "--limit", min=1),
):
    """Most recent runs first."""
    with get_session() as db:
        records = run_controller.list_runs(db, command=command, limit=limit)
        table = Table(title="Runs")
        for column in ("id", "command", "started", "finished", "status", "exit"):
            table.add_column(column)
        for r in records:
            table.add_row(
                str(r.id), r.command,
                r.started_at.isoformat(timespec="seconds") if r.started_at else "",
                r.finished_at.isoformat(timespec="seconds") if r.finished_at else "",
                r.status, "" if r.exit_code is None else str(r.exit_code),
            )
    Console().print(table)


@app.command("show")
def show(run_id: int = typer.Argument(..., help="Run id")):
    """Effective configuration and recorded verdicts of one run."""
    with get_session() as db:
        record = run_controller.get_run(db, run_id)
        if record is None:
            typer.echo(f"no run {run_id}", err=True)
            raise typer.Exit(2)
        typer.echo(record.config_json)
        for v in run_controller.get_verdicts(db, run_id):
            typer.echo(f"{v.source_id}\t{v.verdict}\t{v.chains_found}\t{v.flagged_json}")
