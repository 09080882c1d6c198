"""Command-line interface for thermotrack.

Usage::

    thermotrack gen --seed 7 --len 50 --out data/
    thermotrack train --data data/ --out runs/model.npz --steps 300
    thermotrack track --checkpoint runs/model.npz --data data/ --out runs/logs/
    thermotrack eval runs/logs/*.jsonl --csv summary.csv
    thermotrack selftest
    thermotrack config --show
"""

from __future__ import annotations

import time
from pathlib import Path
from typing import Annotated, Optional

import typer
from rich.console import Console
from rich.table import Table

app = typer.Typer(
    name="thermotrack",
    help="Language-guided RGB-thermal tracking on synthetic desk-scale sequences.",
    no_args_is_help=True,
    context_settings={"help_option_names": ["-h", "--help"]},
)

console = Console(stderr=True)


def _fail(message: str, code: int) -> typer.Exit:
    console.print(f"[red]error:[/red] {message}")
    return typer.Exit(code)


def _load_config(path: Path | None):
    from thermotrack.config import ConfigError, load_config

    try:
        return load_config(path)
    except (ConfigError, FileNotFoundError) as e:
        raise _fail(str(e), 2) from None


@app.command()
def gen(
    out: Annotated[Optional[Path], typer.Option("--out", "-o", help="Dataset directory.")] = None,
    seed: Annotated[
        Optional[int],
        typer.Option("--seed", "-s", help="Generator seed [default: THERMOTRACK_SEED or 0]."),
    ] = None,
    length: Annotated[int, typer.Option("--len", "-n", help="Frames per sequence.")] = 50,
    edge: Annotated[int, typer.Option("--edge", help="Frame edge in pixels.")] = 128,
    count: Annotated[int, typer.Option("--count", "-c", help="Number of sequences.")] = 1,
    misalign: Annotated[
        bool, typer.Option("--misalign/--no-misalign", help="Write shifted alternate boxes.")
    ] = True,
):
    """Write a synthetic RGB/TIR dataset."""
    from thermotrack.config import default_output_dir
    from thermotrack.harness.synthetic import gen_dataset
    from thermotrack.io.dataset import save_dataset

    out = out or default_output_dir() / "data"
    if seed is None:
        seed = _load_config(None).seed
    try:
        sequences = gen_dataset(count, length, edge, seed, misalign=misalign)
    except ValueError as e:
        raise _fail(str(e), 2) from None
    paths = save_dataset(sequences, out)
    console.print(f"[green]Wrote {len(paths)} sequence(s) of {length} frames[/green] -> {out}")


@app.command()
def train(
    data: Annotated[Path, typer.Option("--data", "-d", help="Dataset directory.")],
    out: Annotated[Optional[Path], typer.Option("--out", "-o", help="Checkpoint path.")] = None,
    config: Annotated[
        Optional[Path], typer.Option("--config", help="JSON or key=value config file.")
    ] = None,
    steps: Annotated[Optional[int], typer.Option("--steps", help="Optimizer steps.")] = None,
    batch_size: Annotated[int, typer.Option("--batch-size", "-b", help="Samples per step.")] = 1,
    fixed_batch: Annotated[
        bool, typer.Option("--fixed-batch", help="Reuse one batch for every step.")
    ] = False,
    log: Annotated[
        Optional[Path], typer.Option("--log", help="Training log (default: next to checkpoint).")
    ] = None,
    profile: Annotated[bool, typer.Option("--profile", help="Print stage timings.")] = False,
):
    """Train a tracker and write a checkpoint plus a JSON-lines loss log."""
    from thermotrack.config import default_output_dir
    from thermotrack.harness import print_timings
    from thermotrack.harness.train import train as _train
    from thermotrack.io.dataset import load_dataset

    cfg = _load_config(config)
    try:
        dataset = load_dataset(data)
    except FileNotFoundError as e:
        raise _fail(str(e), 2) from None
    out = out or default_output_dir() / "model.npz"
    log = log or out.with_name(out.stem + "_train.jsonl")

    timings = {} if profile else None
    t0 = time.perf_counter()
    try:
        result = _train(
            dataset,
            cfg,
            steps=steps,
            fixed_batch=fixed_batch,
            batch_size=batch_size,
            log_path=log,
            progress=True,
            timings=timings,
        )
    except ValueError as e:
        raise _fail(str(e), 1) from None
    path = result.params.save(out, cfg)
    if timings is not None:
        print_timings(timings, time.perf_counter() - t0, console)
    console.print(f"[green bold]Done![/green bold] -> {path} (log {log})")


@app.command()
def track(
    checkpoint: Annotated[
        Optional[Path], typer.Option("--checkpoint", "-k", help="Checkpoint from `train`.")
    ] = None,
    data: Annotated[
        Optional[Path], typer.Option("--data", "-d", help="Sequence or dataset directory.")
    ] = None,
    out: Annotated[Optional[Path], typer.Option("--out", "-o", help="Run-log directory.")] = None,
    config: Annotated[
        Optional[Path],
        typer.Option("--config", help="Config used when the checkpoint has no sidecar."),
    ] = None,
    jobs: Annotated[int, typer.Option("--jobs", "-j", help="Sequences tracked in parallel.")] = 1,
    endpoint: Annotated[
        Optional[str], typer.Option("--endpoint", help="Description service URL.")
    ] = None,
    max_frames: Annotated[
        Optional[int], typer.Option("--max-frames", help="Stop after this many frames.")
    ] = None,
    profile: Annotated[bool, typer.Option("--profile", help="Print stage timings.")] = False,
):
    """Track every sequence of a dataset and write one run log per sequence."""
    from concurrent.futures import ThreadPoolExecutor, as_completed

    from thermotrack.config import default_output_dir
    from thermotrack.harness import print_timings
    from thermotrack.harness.tracker import run_tracker
    from thermotrack.io.dataset import load_dataset
    from thermotrack.model.network import TrackerNet
    from thermotrack.model.provider import RemoteProvider
    from thermotrack.params import ParameterStore

    if checkpoint is None:
        raise _fail("track needs --checkpoint (write one with `thermotrack train`)", 2)
    try:
        params, cfg = ParameterStore.load(checkpoint)
    except (FileNotFoundError, ValueError) as e:
        raise _fail(str(e), 2) from None
    cfg = cfg or _load_config(config)
    data = data or default_output_dir() / "data"
    out = out or default_output_dir() / "logs"
    try:
        sequences = load_dataset(data)
    except FileNotFoundError as e:
        raise _fail(str(e), 2) from None

    net = TrackerNet(params, cfg)
    timings = {} if profile else None
    t0 = time.perf_counter()

    def _run(seq):
        provider = RemoteProvider(endpoint) if endpoint else None
        log = run_tracker(seq, net, cfg, provider, max_frames=max_frames, timings=timings)
        return seq.name, log.write(out / f"{seq.name}.jsonl"), log.summary

    failed = []
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        futures = {pool.submit(_run, seq): seq.name for seq in sequences}
        for future in as_completed(futures):
            try:
                name, path, summary = future.result()
            except ValueError as e:
                console.print(f"  FAIL: {futures[future]}: {e}")
                failed.append(futures[future])
                continue
            console.print(f"  OK: {name} SR={summary['SR']:.3f} PR={summary['PR']:.3f} -> {path}")

    if timings is not None:
        print_timings(timings, time.perf_counter() - t0, console)
    if failed:
        console.print(f"\n{len(failed)}/{len(sequences)} failed.")
        raise typer.Exit(1)
    console.print(f"\nAll {len(sequences)} sequences tracked.")


@app.command(name="eval")
def evaluate(
    logs: Annotated[list[Path], typer.Argument(help="Run logs written by `track`.")],
    csv: Annotated[
        Optional[Path], typer.Option("--csv", help="Write the mean as metric,value rows.")
    ] = None,
    curves: Annotated[
        Optional[Path], typer.Option("--curves", help="Write success/precision curves.")
    ] = None,
    jobs: Annotated[int, typer.Option("--jobs", "-j", help="Logs read in parallel.")] = 1,
):
    """Summarize run logs: PR, SR, NPR, MPR and MSR per run and their mean."""
    from concurrent.futures import ThreadPoolExecutor

    import pandas as pd

    from thermotrack.harness import metrics
    from thermotrack.io.runlog import RunLog

    def _read(path: Path):
        log = RunLog.read(path)
        cfg = log.header.get("config", {})
        summary = log.compute_summary(
            cfg.get("pr_threshold", 20.0), cfg.get("npr_threshold", 0.2)
        )
        name = log.header.get("sequence") or path.stem
        return name, summary, metrics.curves(log.predictions(), log.ground_truth())

    try:
        with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
            results = list(pool.map(_read, logs))
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise _fail(str(e), 2) from None

    table = metrics.summary_table({name: s for name, s, _ in results})
    mean = table.mean(axis=0)
    view = Table(title="Tracking metrics")
    view.add_column("run")
    for col in table.columns:
        view.add_column(col, justify="right")
    for name, row in table.iterrows():
        view.add_row(str(name), *(f"{v:.4f}" for v in row))
    if len(table) > 1:
        view.add_row("[bold]mean[/bold]", *(f"{v:.4f}" for v in mean))
    Console().print(view)

    if csv is not None:
        csv.parent.mkdir(parents=True, exist_ok=True)
        rows = pd.DataFrame({"metric": mean.index, "value": mean.to_numpy()})
        rows.to_csv(csv, index=False)
        console.print(f"Wrote {csv}")
    if curves is not None:
        curves.parent.mkdir(parents=True, exist_ok=True)
        frames = [c.assign(run=name) for name, _, c in results]
        pd.concat(frames, ignore_index=True).to_csv(curves, index=False)
        console.print(f"Wrote {curves}")


@app.command()
def selftest(
    suite: Annotated[
        Optional[list[str]], typer.Option("--suite", help="Run only these suites.")
    ] = None,
    jobs: Annotated[int, typer.Option("--jobs", "-j", help="Suites run in parallel.")] = 1,
):
    """Run the oracle suites; exit 1 if any fails."""
    from thermotrack.selftest import run_suites

    try:
        results = run_suites(suite, jobs=jobs)
    except ValueError as e:
        raise _fail(str(e), 2) from None
    for r in results:
        mark = "[green]PASS[/green]" if r.passed else "[red]FAIL[/red]"
        console.print(f"  {mark} {r.name:16s} {r.seconds:6.2f} s  {r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        console.print(f"\n{len(failed)}/{len(results)} suites failed.")
        raise typer.Exit(1)
    console.print(f"\nAll {len(results)} suites passed.")


@app.command()
def config(
    show: Annotated[bool, typer.Option("--show", help="Print the config as JSON.")] = False,
    file: Annotated[
        Optional[Path], typer.Option("--file", "-f", help="Load this config file first.")
    ] = None,
):
    """Print the effective configuration (defaults plus file and environment)."""
    cfg = _load_config(file)
    if show or file is not None:
        typer.echo(cfg.to_json())
    else:
        console.print("Use --show to print the configuration.")


if __name__ == "__main__":
    app()
