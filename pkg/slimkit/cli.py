import typer
from rich.console import Console
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table
from pathlib import Path
from typing import List, Optional

app = typer.Typer(name="slim", help="Exact low-memory training for linear-attention transformers")
console = Console(stderr=True)


def _load(config_path: Path):
    """Config or exit 2"""
    from .utils.config import load_config
    from .utils.errors import ConfigError

    try:
        return load_config(config_path)
    except (ConfigError, FileNotFoundError) as e:
        console.print(f"[red]✗[/red] {e}")
        raise typer.Exit(2)


def _chunks(spec: str, length: int) -> List[int]:
    from .utils.config import parse_chunks
    from .utils.errors import ConfigError

    try:
        return parse_chunks(spec, length)
    except ConfigError as e:
        console.print(f"[red]✗[/red] {e}")
        raise typer.Exit(2)


def _emit(records, record_type, out: Optional[Path]):
    from .formats.records import to_csv, write_csv

    if out is None:
        typer.echo(to_csv(records, record_type), nl=False)
    else:
        write_csv(out, records, record_type)
        console.print(f"[green]✓[/green] Wrote {out}")


@app.command()
def gradcheck(
    config: Path = typer.Option(..., "--config", help="JSON/YAML run config"),
    chunks: str = typer.Option("1,8,64,full", "--chunks", help="Comma-separated chunk sizes; 'full' means C = L"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    tol: Optional[float] = typer.Option(None, "--tol", help="Default: the config's tolerance"),
    out: Optional[Path] = typer.Option(None, "--out", help="CSV path (stdout if omitted)"),
):
    """Compare the chunked gradient against full back-propagation"""
    from .utils.log import setup_logging
    setup_logging()

    cfg = _load(config)
    chunk_list = _chunks(chunks, cfg.model.seq_len)
    seed = cfg.seed if seed is None else seed
    tol = cfg.tolerance if tol is None else tol

    from .formats.records import RunRecord
    from .training.runs import gradcheck as run_gradcheck

    with Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        console=console,
        transient=True,
    ) as progress:
        task = progress.add_task(f"Checking {len(chunk_list)} chunk sizes...", total=None)
        rows = run_gradcheck(cfg, chunk_list, seed)
        progress.update(task, completed=True)

    failed = 0
    for row in rows:
        rec = row.record
        if rec.rel_grad_discrepancy <= tol:
            console.print(f"[green]✓[/green] C={rec.C}: discrepancy {rec.rel_grad_discrepancy:.3e}")
        else:
            failed += 1
            console.print(f"[red]✗[/red] C={rec.C}: discrepancy {rec.rel_grad_discrepancy:.3e} > {tol:.1e}")

    _emit([r.record for r in rows], RunRecord, out)

    if failed:
        raise typer.Exit(1)


@app.command()
def bench(
    config: Path = typer.Option(..., "--config"),
    chunks: str = typer.Option("1,8,64,full", "--chunks"),
    repeats: int = typer.Option(1, "--repeats"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out"),
    parallel: bool = typer.Option(False, "--parallel", help="Run chunk sizes on separate threads"),
    baseline: bool = typer.Option(False, "--baseline", help="Add a full-memory back-propagation row"),
):
    """Sweep chunk sizes: wall time, peak activation bytes, FLOPs"""
    from .utils.log import setup_logging
    setup_logging()

    cfg = _load(config)
    chunk_list = _chunks(chunks, cfg.model.seq_len)

    from .formats.records import RunRecord
    from .training.runs import bench as run_bench
    from .utils.errors import ConfigError

    try:
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
            transient=True,
        ) as progress:
            task = progress.add_task(f"Benchmarking {len(chunk_list)} chunk sizes...", total=None)
            rows = run_bench(cfg, chunk_list, repeats, seed=seed, parallel=parallel, baseline=baseline)
            progress.update(task, completed=True)
    except ConfigError as e:
        console.print(f"[red]✗[/red] {e}")
        raise typer.Exit(2)

    table = Table(title=f"📊 {cfg.name} (L={cfg.model.seq_len})")
    for col in ("C", "time (s)", "peak bytes", "forward", "replay", "backward", "rewind", "stitch", "discrepancy"):
        table.add_column(col, justify="right")
    for row in rows:
        rec, fl = row.record, row.flops
        table.add_row(
            "full" if rec.config_name.endswith(":full") else str(rec.C),
            f"{rec.wall_time_seconds:.3f}",
            f"{rec.peak_activation_bytes:,}",
            *(f"{fl[c]:,}" for c in ("forward", "replay", "backward", "rewind", "stitch")),
            f"{rec.rel_grad_discrepancy:.2e}",
        )
    console.print(table)

    _emit([r.record for r in rows], RunRecord, out)


@app.command()
def train(
    task: str = typer.Option("copying", "--task"),
    config: Path = typer.Option(..., "--config"),
    steps: Optional[int] = typer.Option(None, "--steps"),
    chunk: str = typer.Option("full", "--chunk", help="C, 'full', or 'finetune:C'"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    out: Optional[Path] = typer.Option(None, "--out"),
    checkpoint: Optional[Path] = typer.Option(None, "--checkpoint", help="Write final parameters here"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Start from a saved checkpoint"),
):
    """Train on the copying task with Adam"""
    from .utils.log import setup_logging
    setup_logging()

    if task != "copying":
        console.print(f"[red]✗[/red] Unknown task: {task}")
        raise typer.Exit(2)

    cfg = _load(config)
    steps = cfg.steps if steps is None else steps
    seed = cfg.seed if seed is None else seed

    from .formats.checkpoint import load_params, save_params
    from .formats.records import TrainRecord
    from .training.runs import train_copying
    from .utils.config import parse_schedule
    from .utils.errors import CheckpointError, ConfigError

    try:
        schedule = parse_schedule(chunk, cfg.model.seq_len)
        params = None
        if resume is not None:
            _, params = load_params(resume)
            console.print(f"[green]✓[/green] Resumed from {resume}")

        def show(rec: TrainRecord):
            console.print(
                f"step {rec.step:>6}  C={rec.C:<4} lr={rec.lr:.0e}  loss={rec.train_loss:.4f}  "
                f"acc={rec.accuracy:.3f}  bpc={rec.bits_per_char:.3f}"
            )

        params, records = train_copying(cfg, schedule, steps, seed, params=params, on_eval=show)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        console.print(f"[red]✗[/red] {e}")
        raise typer.Exit(2)

    if checkpoint is not None:
        save_params(checkpoint, params)
        console.print(f"[green]✓[/green] Saved checkpoint {checkpoint}")

    _emit(records, TrainRecord, out)


@app.command()
def init():
    """Write an example config"""
    import json
    from .utils.config import DESK_CONFIG

    with open("config.example.json", "w") as f:
        json.dump(DESK_CONFIG, f, indent=2)
        f.write("\n")

    console.print("[green]✓[/green] Created config.example.json")
    console.print("\nNext: adjust the model section, then run `slim gradcheck --config config.example.json`")


def main():
    app()
