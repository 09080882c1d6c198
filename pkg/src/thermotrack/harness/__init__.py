"""Synthetic data, tracking, training and evaluation."""

from __future__ import annotations

import threading
import time
from contextlib import contextmanager

from rich.console import Console

_TIMINGS_LOCK = threading.Lock()


@contextmanager
def stage_timer(timings: dict | None, name: str):
    """Accumulate wall time of a stage into ``timings`` if not None.

    Safe to share one ``timings`` dict between worker threads.
    """
    if timings is None:
        yield
        return
    t0 = time.perf_counter()
    try:
        yield
    finally:
        elapsed = time.perf_counter() - t0
        with _TIMINGS_LOCK:
            timings[name] = timings.get(name, 0.0) + elapsed


def print_timings(timings: dict, total: float, console: Console) -> None:
    """Print per-stage seconds and their share of ``total``."""
    console.print()
    console.print("[bold cyan]Stage timings[/bold cyan]")
    for k, v in timings.items():
        pct = 100 * v / total if total > 0 else 0
        console.print(f"  {k:20s}  {v:7.2f} s  ({pct:5.1f}%)")
    other = total - sum(timings.values())
    share = 100 * other / total if total > 0 else 0
    console.print(f"  {'(other)':20s}  {other:7.2f} s  ({share:5.1f}%)")
    console.print(f"  {'total':20s}  {total:7.2f} s")
